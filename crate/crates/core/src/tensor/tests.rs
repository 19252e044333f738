use super::*;
use crate::error::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Check a single-input op against central finite differences on the input.
fn check_input_grad(
    shape: &[usize],
    seed: u64,
    build: impl Fn(&mut Graph, Var) -> Result<Var>,
) {
    let mut r = rng(seed);
    let x0 = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
    let eval = |x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = build(&mut g, xv).unwrap();
        let loss = weighted_sum(&mut g, y, seed);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let xv = g.constant(x0.clone());
    let y = build(&mut g, xv).unwrap();
    let loss = weighted_sum(&mut g, y, seed);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.grad(xv).expect("input grad");

    let h = 1e-5;
    for j in 0..x0.numel() {
        let mut up = x0.clone();
        up.data_mut()[j] += h;
        let mut down = x0.clone();
        down.data_mut()[j] -= h;
        let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
        let a = analytic.data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        assert!(
            rel < 1e-4,
            "input grad mismatch at {j}: analytic {a} vs numeric {numeric} (rel {rel:.2e})"
        );
    }
}

/// Fixed pseudo-random weighting so the scalar loss exercises every output.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
    let prod = g.mul(y, w).unwrap();
    g.sum(prod)
}

#[test]
fn grad_add_broadcast() {
    check_input_grad(&[3, 4], 1, |g, x| {
        let mut r = rng(7);
        let b = g.constant(Tensor::rand_uniform(&[4], -1.0, 1.0, &mut r));
        g.add(x, b)
    });
    // gradient also flows into the broadcast side
    check_input_grad(&[4], 2, |g, x| {
        let mut r = rng(8);
        let a = g.constant(Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        g.add(a, x)
    });
}

#[test]
fn grad_sub_mul_broadcast() {
    check_input_grad(&[2, 1, 3], 3, |g, x| {
        let mut r = rng(9);
        let b = g.constant(Tensor::rand_uniform(&[2, 5, 3], -1.0, 1.0, &mut r));
        g.mul(x, b)
    });
    check_input_grad(&[5, 3], 4, |g, x| {
        let mut r = rng(10);
        let b = g.constant(Tensor::rand_uniform(&[3], -1.0, 1.0, &mut r));
        g.sub(x, b)
    });
}

#[test]
fn grad_matmul() {
    check_input_grad(&[4, 3], 5, |g, x| {
        let mut r = rng(11);
        let w = g.constant(Tensor::rand_uniform(&[3, 6], -1.0, 1.0, &mut r));
        g.matmul(x, w)
    });
    // gradient w.r.t. the rhs, with a batched lhs
    check_input_grad(&[3, 6], 6, |g, x| {
        let mut r = rng(12);
        let a = g.constant(Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut r));
        g.matmul(a, x)
    });
}

#[test]
fn grad_conv1d() {
    for (shape, wshape) in [
        (vec![2, 6, 3], vec![4, 3, 5]),
        (vec![1, 4, 2], vec![2, 2, 3]),
    ] {
        let ws = wshape.clone();
        check_input_grad(&shape, 13, move |g, x| {
            let mut r = rng(14);
            let w = g.constant(Tensor::rand_uniform(&ws, -1.0, 1.0, &mut r));
            let b = g.constant(Tensor::rand_uniform(&[ws[0]], -1.0, 1.0, &mut r));
            g.conv1d(x, w, b)
        });
        // weight gradient
        let xs = shape.clone();
        check_input_grad(&wshape, 15, move |g, w| {
            let mut r = rng(16);
            let x = g.constant(Tensor::rand_uniform(&xs, -1.0, 1.0, &mut r));
            let b = g.constant(Tensor::rand_uniform(&[g.value(w).shape()[0]], -1.0, 1.0, &mut r));
            g.conv1d(x, w, b)
        });
    }
}

#[test]
fn grad_norms() {
    check_input_grad(&[3, 5], 17, |g, x| g.layer_norm(x, 1e-5));
    check_input_grad(&[2, 4, 6], 18, |g, x| g.group_norm(x, 3, 1e-5));
    check_input_grad(&[2, 4, 6], 19, |g, x| g.group_norm(x, 6, 1e-5));
}

#[test]
fn grad_softmax_and_activations() {
    check_input_grad(&[4, 5], 20, |g, x| g.softmax(x));
    check_input_grad(&[3, 4], 21, |g, x| Ok(g.silu(x)));
    check_input_grad(&[3, 4], 22, |g, x| Ok(g.gelu(x)));
    check_input_grad(&[3, 4], 23, |g, x| Ok(g.mish(x)));
}

#[test]
fn grad_sdpa_all_inputs() {
    let shape = [2, 4, 6]; // B=2, L=4, E=6, 2 heads of size 3
    check_input_grad(&shape, 24, |g, q| {
        let mut r = rng(25);
        let k = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
        let v = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
        g.sdpa(q, k, v, 2)
    });
    check_input_grad(&shape, 26, |g, k| {
        let mut r = rng(27);
        let q = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
        let v = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
        g.sdpa(q, k, v, 2)
    });
    check_input_grad(&shape, 28, |g, v| {
        let mut r = rng(29);
        let q = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
        let k = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
        g.sdpa(q, k, v, 2)
    });
}

#[test]
fn grad_embedding_concat_slice_reduce() {
    check_input_grad(&[5, 3], 30, |g, table| g.embedding(table, &[1, 4, 1, 0]));
    check_input_grad(&[2, 3], 31, |g, x| {
        let mut r = rng(32);
        let other = g.constant(Tensor::rand_uniform(&[2, 2], -1.0, 1.0, &mut r));
        g.concat(&[x, other], 1)
    });
    check_input_grad(&[3, 6], 33, |g, x| g.slice(x, 1, 2, 3));
    check_input_grad(&[4, 3], 34, |g, x| {
        let m = g.mean_axis(x, 0)?;
        Ok(m)
    });
    check_input_grad(&[2, 4, 3], 35, |g, x| g.avg_pool2(x));
    check_input_grad(&[2, 3, 2], 36, |g, x| g.upsample2(x));
    check_input_grad(&[2, 6], 37, |g, x| g.reshape(x, vec![3, 4]));
}

#[test]
fn grad_mse_both_sides() {
    check_input_grad(&[3, 4], 38, |g, x| {
        let mut r = rng(39);
        let t = g.constant(Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        g.mse_loss(x, t)
    });
    check_input_grad(&[3, 4], 40, |g, t| {
        let mut r = rng(41);
        let x = g.constant(Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        g.mse_loss(x, t)
    });
}

#[test]
fn backward_sum_of_parameter_is_ones() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(vec![3], vec![0.3, -0.7, 2.0]).unwrap());
    let mut g = Graph::new();
    let pv = g.param(&store, p);
    let loss = g.sum(pv);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.by_param(&store)[0].data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_half_squared_norm_gradient_is_identity() {
    // loss = 0.5 * ||p||^2 with p = [2, -1] -> grad = [2, -1]
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(vec![2], vec![2.0, -1.0]).unwrap());
    let mut g = Graph::new();
    let pv = g.param(&store, p);
    let sq = g.mul(pv, pv).unwrap();
    let s = g.sum(sq);
    let loss = g.scale(s, 0.5);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.by_param(&store)[0].data(), &[2.0, -1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[3]));
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_unreachable_params_get_zero_grads() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::ones(&[2]));
    let b = store.add("b", Tensor::ones(&[2]));
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let _bv = g.param(&store, b);
    let loss = g.sum(av);
    let grads = g.backward(loss).unwrap();
    let by_param = grads.by_param(&store);
    assert_eq!(by_param[0].data(), &[1.0, 1.0]);
    assert_eq!(by_param[1].data(), &[0.0, 0.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut r = rng(77);
        let mut store = ParamStore::new();
        let w = store.add_kaiming("w", &[4, 4], 4, &mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut r));
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv).unwrap();
        let y = g.mish(y);
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        grads.by_param(&store)[0].data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "identical graph + seed must give bit-identical gradients");
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    // the spec's MSE-of-a-small-MLP oracle, end to end through the store
    let mut r = rng(100);
    let mut store = ParamStore::new();
    let w1 = store.add_kaiming("w1", &[3, 8], 3, &mut r);
    let b1 = store.add_zeros("b1", &[8]);
    let w2 = store.add_kaiming("w2", &[8, 2], 8, &mut r);
    let b2 = store.add_zeros("b2", &[2]);
    store.randomize(0.8, &mut r);
    let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut r);
    let t = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut r);

    let forward = |s: &ParamStore, g: &mut Graph| -> Result<Var> {
        let xv = g.constant(x.clone());
        let tv = g.constant(t.clone());
        let w1v = g.param(s, w1);
        let b1v = g.param(s, b1);
        let w2v = g.param(s, w2);
        let b2v = g.param(s, b2);
        let h = g.linear(xv, w1v, b1v)?;
        let h = g.silu(h);
        let yv = g.linear(h, w2v, b2v)?;
        g.mse_loss(yv, tv)
    };

    let mut g = Graph::new();
    let loss = forward(&store, &mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.by_param(&store);

    let report = finite_diff_check(&mut store, &analytic, 1e-4, 1e-4, |s| {
        let mut g = Graph::new();
        let loss = forward(s, &mut g)?;
        Ok(g.value(loss).item())
    })
    .unwrap();
    assert!(report.pass(), "max rel err {:.3e}", report.max_rel_err);
}

#[test]
fn finite_diff_check_linear_model_is_tight() {
    let mut r = rng(200);
    let mut store = ParamStore::new();
    let w = store.add_kaiming("w", &[3, 2], 3, &mut r);
    let x = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut r);
    let forward = |s: &ParamStore, g: &mut Graph| -> Result<Var> {
        let xv = g.constant(x.clone());
        let wv = g.param(s, w);
        let y = g.matmul(xv, wv)?;
        Ok(g.sum(y))
    };
    let mut g = Graph::new();
    let loss = forward(&store, &mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.by_param(&store);
    let report = finite_diff_check(&mut store, &analytic, 1e-4, 1e-8, |s| {
        let mut g = Graph::new();
        let loss = forward(s, &mut g)?;
        Ok(g.value(loss).item())
    })
    .unwrap();
    // linear in parameters: central differences are exact up to roundoff
    assert!(report.max_rel_err < 1e-8, "max rel err {:.3e}", report.max_rel_err);
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap());
    let mut adam = Adam::new(AdamConfig::default(), &store);
    // seed the moments with one nonzero step, then feed zero gradients
    adam.step(&mut store, &[Tensor::from_vec(vec![2], vec![0.5, 0.5]).unwrap()]).unwrap();
    let (m_after_1, _) = adam.moments(0);
    let m1 = m_after_1.data()[0];
    let snapshot = store.value(store.ids().next().unwrap()).clone();
    for _ in 0..50 {
        adam.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
    }
    let (m, v) = adam.moments(0);
    assert!(m.data()[0].abs() < m1.abs() * 1e-2, "first moment should decay");
    assert!(v.data()[0] > 0.0);
    // params drift only a little once the gradient is zero (moments decay)
    let drift = (store.value(store.ids().next().unwrap()).data()[0] - snapshot.data()[0]).abs();
    assert!(drift < 60.0 * adam.config.lr);
}

#[test]
fn adam_truly_zero_history_keeps_params_unchanged() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap());
    let before = store.value(store.ids().next().unwrap()).clone();
    let mut adam = Adam::new(AdamConfig::default(), &store);
    for _ in 0..10 {
        adam.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
    }
    assert_eq!(store.value(store.ids().next().unwrap()).data(), before.data());
}

#[test]
fn adam_single_step_is_bias_corrected() {
    // from zeroed state with g = 1 and lr = 3e-4 the first update is -lr
    let mut store = ParamStore::new();
    store.add("p", Tensor::from_vec(vec![1], vec![0.0]).unwrap());
    let mut adam = Adam::new(AdamConfig::default(), &store);
    adam.step(&mut store, &[Tensor::from_vec(vec![1], vec![1.0]).unwrap()]).unwrap();
    let p = store.value(store.ids().next().unwrap()).data()[0];
    assert!((p - (-3e-4)).abs() < 1e-9, "got {p}");
}

#[test]
fn adam_constant_gradient_update_approaches_lr_sign() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::from_vec(vec![1], vec![0.0]).unwrap());
    let mut adam = Adam::new(AdamConfig::default(), &store);
    let g = Tensor::from_vec(vec![1], vec![-0.37]).unwrap();
    let mut prev = 0.0;
    let mut last_delta = 0.0;
    for _ in 0..500 {
        adam.step(&mut store, &[g.clone()]).unwrap();
        let p = store.value(store.ids().next().unwrap()).data()[0];
        last_delta = p - prev;
        prev = p;
    }
    // step magnitude approaches lr, direction is -sign(g)
    assert!((last_delta - 3e-4).abs() < 3e-6, "delta {last_delta}");
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::zeros(&[2]));
    let mut adam = Adam::new(AdamConfig::default(), &store);
    assert!(adam.step(&mut store, &[Tensor::zeros(&[3])]).is_err());
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = rng(300);
    for _ in 0..20 {
        let x = Tensor::rand_uniform(&[6, 9], -5.0, 5.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv).unwrap();
        let out = g.value(y);
        for row in 0..6 {
            let s: f64 = out.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(out.row(row).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn sdpa_probs_are_row_stochastic() {
    let mut r = rng(301);
    let q = Tensor::rand_uniform(&[2, 5, 8], -2.0, 2.0, &mut r);
    let k = Tensor::rand_uniform(&[2, 5, 8], -2.0, 2.0, &mut r);
    let v = Tensor::rand_uniform(&[2, 5, 8], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let out = g.sdpa(qv, kv, vv, 4).unwrap();
    let probs = g.attention_probs(out).unwrap();
    assert_eq!(probs.shape(), &[2, 4, 5, 5]);
    for row in probs.data().chunks(5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut r = rng(400);
    let mut store = ParamStore::new();
    store.add_kaiming("layer.w", &[7, 3], 7, &mut r);
    store.add_kaiming("layer.b", &[3], 3, &mut r);
    store.add("odd/shape", Tensor::rand_uniform(&[2, 1, 4], -10.0, 10.0, &mut r));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &store).unwrap();

    let entries = load_checkpoint(&path).unwrap();
    assert_eq!(entries.len(), 3);
    for ((_, name, value), (lname, lvalue)) in store.iter().zip(&entries) {
        assert_eq!(name, lname);
        assert_eq!(value.shape(), lvalue.shape());
        // bit-exact comparison
        for (a, b) in value.data().iter().zip(lvalue.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    // save -> load -> save gives identical bytes
    let mut store2 = ParamStore::new();
    store2.add_zeros("layer.w", &[7, 3]);
    store2.add_zeros("layer.b", &[3]);
    store2.add_zeros("odd/shape", &[2, 1, 4]);
    super::checkpoint::restore_store(&path, &mut store2).unwrap();
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&path2, &store2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}
