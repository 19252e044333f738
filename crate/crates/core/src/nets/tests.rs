use super::*;
use crate::tensor::{finite_diff_check, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_spec(backbone: Backbone) -> DenoiserSpec {
    DenoiserSpec {
        backbone,
        hidden: 32,
        blocks: 2,
        head_dim: 16,
        base_channels: 8,
        channel_mult: vec![1, 2, 2, 2],
        kernel: 3,
        predict: PredictTarget::Noise,
        cond_dim: 0,
    }
}

/// Finite-difference check of every parameter of a denoiser on a tiny batch.
fn gradcheck_denoiser(model: &mut dyn Denoiser, shape: &[usize], seed: u64) -> f64 {
    let mut r = rng(seed);
    model.params_mut().randomize(0.3, &mut r);
    let x = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
    let target = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
    let ts: Vec<usize> = (0..shape[0]).map(|i| (i * 7) % 50).collect();

    let loss_of = |m: &dyn Denoiser, g: &mut Graph| -> crate::error::Result<crate::tensor::Var> {
        let xv = g.constant(x.clone());
        let y = m.forward(g, xv, &ts, Cond::None)?;
        let tv = g.constant(target.clone());
        g.mse_loss(y, tv)
    };

    let mut g = Graph::new();
    let loss = loss_of(model, &mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.by_param(model.params());

    // finite_diff_check needs simultaneous &mut store and &model borrow;
    // clone the store for probing and graft values through a closure.
    let mut probe = model.params().clone();
    let report = finite_diff_check(&mut probe, &analytic, 1e-4, 1e-4, |s| {
        // rebuild a view of the model with probed parameters
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = model.forward_with(s, &mut g, xv, &ts, Cond::None)?;
        let tv = g.constant(target.clone());
        let l = g.mse_loss(y, tv)?;
        Ok(g.value(l).item())
    })
    .unwrap();
    assert!(report.pass(), "max rel err {:.3e} at {:?}", report.max_rel_err, worst(&report));
    report.max_rel_err
}

fn worst(report: &crate::tensor::FiniteDiffReport) -> Option<&crate::tensor::ParamCheck> {
    report
        .per_param
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
}


#[test]
fn mlp_zero_output_layer_predicts_bias() {
    let mut r = rng(1);
    let spec = DenoiserSpec { backbone: Backbone::Mlp, hidden: 16, head_dim: 16, ..small_spec(Backbone::Mlp) };
    let mut model = MlpDenoiser::new(spec, 4, None, &mut r).unwrap();
    // output layer is zero-initialized; set a recognizable bias
    let bias_id = model
        .params()
        .iter()
        .find(|(_, name, _)| *name == "body.2.b")
        .map(|(id, _, _)| id)
        .unwrap();
    model
        .params_mut()
        .set(bias_id, Tensor::from_vec(vec![4], vec![0.1, -0.2, 0.3, -0.4]).unwrap())
        .unwrap();
    let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
    let y = model.predict(&x, &[5], Cond::None).unwrap();
    for row in 0..3 {
        assert_eq!(y.row(row), &[0.1, -0.2, 0.3, -0.4]);
    }
}

#[test]
fn denoisers_are_deterministic_given_weights() {
    let mut r = rng(2);
    let model = DiT1d::new(small_spec(Backbone::Dit1d), 4, 3, &mut r).unwrap();
    let x = Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut r);
    let a = model.predict(&x, &[7], Cond::None).unwrap();
    let b = model.predict(&x, &[7], Cond::None).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn cond_on_unconditional_model_errors() {
    let mut r = rng(3);
    let model = MlpDenoiser::new(small_spec(Backbone::Mlp), 4, None, &mut r).unwrap();
    let x = Tensor::zeros(&[2, 4]);
    let values = Tensor::zeros(&[2, 1]);
    let keep = [true, true];
    let err = model.predict(&x, &[0], Cond::Batch { values: &values, keep: &keep });
    assert!(err.is_err());
}

#[test]
fn backbones_preserve_shape() {
    let mut r = rng(4);
    for backbone in [Backbone::Mlp, Backbone::Unet1d, Backbone::Dit1d] {
        let model = build_denoiser(&small_spec(backbone), 8, 4, &mut r).unwrap();
        let x = Tensor::rand_uniform(&[2, 8, 4], -1.0, 1.0, &mut r);
        let y = model.predict(&x, &[3], Cond::None).unwrap();
        assert_eq!(y.shape(), x.shape(), "{backbone:?} must be shape-preserving");
    }
}

#[test]
fn unet_rejects_indivisible_horizon() {
    let mut r = rng(5);
    let err = UNet1d::new(small_spec(Backbone::Unet1d), 6, 4, &mut r);
    match err {
        Err(e) => assert!(e.to_string().contains("multiple of 8"), "got {e}"),
        Ok(_) => panic!("horizon 6 must be rejected with 4 stages"),
    }
}

#[test]
fn unet_doubling_base_channels_roughly_quadruples_conv_params() {
    let mut r = rng(6);
    let spec8 = small_spec(Backbone::Unet1d);
    let spec16 = DenoiserSpec { base_channels: 16, ..spec8.clone() };
    let u8 = UNet1d::new(spec8, 8, 4, &mut r).unwrap();
    let u16 = UNet1d::new(spec16, 8, 4, &mut r).unwrap();
    let ratio = u16.conv_param_count() as f64 / u8.conv_param_count() as f64;
    assert!((3.0..=4.5).contains(&ratio), "conv-stack ratio {ratio}");
}

#[test]
fn dit_depth_difference_is_exactly_one_block() {
    let mut r = rng(7);
    let spec1 = DenoiserSpec { blocks: 1, ..small_spec(Backbone::Dit1d) };
    let spec2 = DenoiserSpec { blocks: 2, ..small_spec(Backbone::Dit1d) };
    let d1 = DiT1d::new(spec1, 6, 4, &mut r).unwrap();
    let d2 = DiT1d::new(spec2, 6, 4, &mut r).unwrap();
    let diff = d2.params().numel() - d1.params().numel();
    assert_eq!(diff, DiT1d::block_param_count(32));
}

#[test]
fn dit_rejects_bad_head_split() {
    let mut r = rng(8);
    let spec = DenoiserSpec { hidden: 30, head_dim: 16, ..small_spec(Backbone::Dit1d) };
    assert!(DiT1d::new(spec, 4, 3, &mut r).is_err());
}

#[test]
fn dit_attention_rows_sum_to_one() {
    let mut r = rng(9);
    let mut model = DiT1d::new(small_spec(Backbone::Dit1d), 5, 3, &mut r).unwrap();
    model.params_mut().randomize(0.4, &mut r);
    let x = Tensor::rand_uniform(&[2, 5, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (_, attn) = model.forward_with_attention(&mut g, xv, &[3], Cond::None).unwrap();
    assert_eq!(attn.len(), 2);
    for node in attn {
        let probs = g.attention_probs(node).unwrap();
        for row in probs.data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn backbones_are_time_permutation_sensitive() {
    // permuting plan rows must change the output for random weights
    let mut r = rng(10);
    for backbone in [Backbone::Unet1d, Backbone::Dit1d] {
        let mut hits = 0;
        for trial in 0..5 {
            let mut model = build_denoiser(&small_spec(backbone), 8, 3, &mut r).unwrap();
            model.params_mut().randomize(0.4, &mut r);
            let x = Tensor::rand_uniform(&[1, 8, 3], -1.0, 1.0, &mut r);
            // swap rows 1 and 6
            let mut xp = x.clone();
            for d in 0..3 {
                let (a, b) = (1 * 3 + d, 6 * 3 + d);
                xp.data_mut().swap(a, b);
            }
            let y = model.predict(&x, &[4], Cond::None).unwrap();
            let yp = model.predict(&xp, &[4], Cond::None).unwrap();
            let diff: f64 =
                y.data().iter().zip(yp.data()).map(|(a, b)| (a - b).abs()).sum();
            if diff > 1e-8 {
                hits += 1;
            } else {
                eprintln!("{backbone:?} trial {trial} insensitive (diff {diff})");
            }
        }
        assert!(hits >= 4, "{backbone:?} should be time-permutation sensitive");
    }
}

#[test]
fn cfg_null_path_differs_from_cond_path() {
    let mut r = rng(11);
    let spec = DenoiserSpec { cond_dim: 1, ..small_spec(Backbone::Mlp) };
    let mut model = MlpDenoiser::new(spec, 6, None, &mut r).unwrap();
    model.params_mut().randomize(0.4, &mut r);
    let x = Tensor::rand_uniform(&[2, 6], -1.0, 1.0, &mut r);
    let values = Tensor::from_vec(vec![2, 1], vec![0.9, 0.9]).unwrap();
    let on = model.predict(&x, &[3], Cond::Batch { values: &values, keep: &[true, true] }).unwrap();
    let off =
        model.predict(&x, &[3], Cond::Batch { values: &values, keep: &[false, false] }).unwrap();
    let diff: f64 = on.data().iter().zip(off.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-9, "null embedding must differ from a real condition");
}

#[test]
fn gradcheck_mlp_backbone() {
    let mut r = rng(12);
    let mut model = MlpDenoiser::new(small_spec(Backbone::Mlp), 6, None, &mut r).unwrap();
    gradcheck_denoiser(&mut model, &[2, 6], 100);
}

#[test]
fn gradcheck_mlp_with_condition() {
    // condition path (projection + null embedding) gets its own check
    let mut r = rng(13);
    let spec = DenoiserSpec { cond_dim: 2, hidden: 16, head_dim: 16, ..small_spec(Backbone::Mlp) };
    let mut model = MlpDenoiser::new(spec, 4, None, &mut r).unwrap();
    model.params_mut().randomize(0.3, &mut r);
    let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
    let values = Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut r);
    let keep = [true, false, true];
    let target = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r);
    let ts = [0usize, 9, 3];

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = model.forward(&mut g, xv, &ts, Cond::Batch { values: &values, keep: &keep }).unwrap();
    let tv = g.constant(target.clone());
    let loss = g.mse_loss(y, tv).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.by_param(model.params());

    let mut probe = model.params().clone();
    let report = finite_diff_check(&mut probe, &analytic, 1e-4, 1e-4, |s| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = model.forward_with(s, &mut g, xv, &ts, Cond::Batch { values: &values, keep: &keep })?;
        let tv = g.constant(target.clone());
        let l = g.mse_loss(y, tv)?;
        Ok(g.value(l).item())
    })
    .unwrap();
    assert!(report.pass(), "max rel err {:.3e}", report.max_rel_err);
}

#[test]
fn gradcheck_unet_backbone() {
    let mut r = rng(14);
    let mut model = UNet1d::new(small_spec(Backbone::Unet1d), 8, 2, &mut r).unwrap();
    gradcheck_denoiser(&mut model, &[1, 8, 2], 101);
}

#[test]
fn gradcheck_dit_backbone() {
    let mut r = rng(15);
    let mut model = DiT1d::new(small_spec(Backbone::Dit1d), 4, 2, &mut r).unwrap();
    gradcheck_denoiser(&mut model, &[1, 4, 2], 102);
}

#[test]
fn gradcheck_critics() {
    let mut r = rng(16);
    for body in [CriticBody::Transformer, CriticBody::Unet] {
        let spec = CriticSpec {
            body,
            noised: true,
            hidden: 16,
            blocks: 1,
            head_dim: 16,
            base_channels: 4,
            kernel: 3,
            train_steps: 0,
        };
        let mut critic = Critic::new(spec, 4, 3, &mut r).unwrap();
        critic.params_mut().randomize(0.3, &mut r);
        let x = Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut r);
        let target = Tensor::rand_uniform(&[2], -1.0, 1.0, &mut r);
        let ts = [1usize, 6];

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let v = critic.forward(&mut g, xv, &ts).unwrap();
        let tv = g.constant(target.clone());
        let loss = g.mse_loss(v, tv).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.by_param(critic.params());

        let mut probe = critic.params().clone();
        let report = finite_diff_check(&mut probe, &analytic, 1e-4, 1e-4, |s| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let v = critic.forward_with(s, &mut g, xv, &ts)?;
            let tv = g.constant(target.clone());
            let l = g.mse_loss(v, tv)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        assert!(report.pass(), "{body:?} max rel err {:.3e}", report.max_rel_err);
    }
}

#[test]
fn critic_input_gradient_matches_finite_differences() {
    let mut r = rng(17);
    let spec = CriticSpec {
        body: CriticBody::Transformer,
        noised: true,
        hidden: 16,
        blocks: 1,
        head_dim: 16,
        base_channels: 4,
        kernel: 3,
        train_steps: 0,
    };
    let mut critic = Critic::new(spec, 3, 2, &mut r).unwrap();
    critic.params_mut().randomize(0.4, &mut r);
    let x = Tensor::rand_uniform(&[2, 3, 2], -1.0, 1.0, &mut r);
    let (_, grad) = critic.value_input_grad(&x, &[2]).unwrap();
    let h = 1e-5;
    for j in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[j] += h;
        let mut dn = x.clone();
        dn.data_mut()[j] -= h;
        let vu: f64 = critic.values(&up, &[2]).unwrap().iter().sum();
        let vd: f64 = critic.values(&dn, &[2]).unwrap().iter().sum();
        let numeric = (vu - vd) / (2.0 * h);
        let a = grad.data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        assert!(rel < 1e-4, "critic input grad {j}: {a} vs {numeric}");
    }
}

#[test]
fn sinusoidal_embedding_is_bounded_and_distinct() {
    let e = sinusoidal_embedding(&[0, 1, 17, 999], 16);
    assert_eq!(e.shape(), &[4, 16]);
    assert!(e.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    let r0: Vec<f64> = e.row(0).to_vec();
    let r3: Vec<f64> = e.row(3).to_vec();
    assert_ne!(r0, r3);
}
