use super::{NoiseSchedule, SamplerSpec, Solver};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Anything that predicts the noise component of `x_t` at level `t`.
/// Guidance algorithms wrap a base predictor and return a modified one.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Adapter for closures (used heavily in tests).
pub struct ClosurePredictor<F: Fn(&Tensor, usize) -> Result<Tensor>>(pub F);

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> NoisePredictor for ClosurePredictor<F> {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (self.0)(x_t, t)
    }
}

/// Hard conditioning: coordinates where `mask` is nonzero are overwritten
/// with `values` after every solver step, so known entries (the current
/// state in row 0 of a plan) survive sampling exactly.
#[derive(Debug, Clone)]
pub struct Inpaint {
    mask: Tensor,
    values: Tensor,
}

impl Inpaint {
    pub fn new(mask: Tensor, values: Tensor) -> Result<Self> {
        if mask.shape() != values.shape() {
            return Err(Error::ShapeMismatch(format!(
                "inpaint mask {:?} vs values {:?}",
                mask.shape(),
                values.shape()
            )));
        }
        Ok(Self { mask, values })
    }

    /// Mask covering row 0 of an `[H, D]` plan, clamped to `first_row`,
    /// with only the first `dims` columns constrained.
    pub fn first_row(horizon: usize, width: usize, dims: usize, first_row: &[f64]) -> Result<Self> {
        if first_row.len() != dims || dims > width {
            return Err(Error::ShapeMismatch(format!(
                "first_row of {} values for {dims} constrained dims (width {width})",
                first_row.len()
            )));
        }
        let mut mask = Tensor::zeros(&[horizon, width]);
        let mut values = Tensor::zeros(&[horizon, width]);
        for j in 0..dims {
            mask.data_mut()[j] = 1.0;
            values.data_mut()[j] = first_row[j];
        }
        Ok(Self { mask, values })
    }

    /// Overwrite masked coordinates in every batch row of `x`.
    pub fn apply(&self, x: &mut Tensor) {
        let per = self.mask.numel();
        debug_assert_eq!(x.numel() % per, 0, "inpaint shape must divide batch");
        for row in x.data_mut().chunks_mut(per) {
            for (i, (m, v)) in self.mask.data().iter().zip(self.values.data()).enumerate() {
                if *m != 0.0 {
                    row[i] = *v;
                }
            }
        }
    }
}

/// Evenly spaced subsequence of `[0, T)` with `steps` entries, ascending.
pub fn time_subsequence(timesteps: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|i| i * timesteps / steps).collect()
}

/// Run the reverse process from a fresh latent. The returned sample has
/// shape `shape` (leading axis = batch).
pub fn sample<R: Rng>(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    shape: &[usize],
    inpaint: Option<&Inpaint>,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate(schedule)?;
    let latent = {
        let mut z = Tensor::randn(shape, rng);
        for v in z.data_mut() {
            *v *= spec.temperature;
        }
        z
    };
    sample_from_latent(model, schedule, spec, latent, inpaint, rng)
}

/// Run the reverse process from a caller-provided initial latent. With DDIM
/// (eta = 0) the result is a deterministic function of (weights, latent).
pub fn sample_from_latent<R: Rng>(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    latent: Tensor,
    inpaint: Option<&Inpaint>,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate(schedule)?;
    let ts = time_subsequence(schedule.timesteps, spec.steps);
    let mut x = latent;
    if let Some(ip) = inpaint {
        ip.apply(&mut x);
    }
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let ab_t = schedule.alpha_bars[t];
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bars[ts[i - 1]] };
        let eps = model.predict_noise(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(Error::ShapeMismatch(format!(
                "predictor returned {:?} for input {:?}",
                eps.shape(),
                x.shape()
            )));
        }
        // implied clean sample
        let mut x0 = Tensor::zeros(x.shape());
        let inv_sqrt_ab = 1.0 / ab_t.sqrt();
        let coef_eps = (1.0 - ab_t).sqrt();
        for ((x0v, &xv), &ev) in x0.data_mut().iter_mut().zip(x.data()).zip(eps.data()) {
            let mut v = inv_sqrt_ab * (xv - coef_eps * ev);
            if spec.clip_sample {
                v = v.clamp(-1.0, 1.0);
            }
            *x0v = v;
        }
        match spec.solver {
            Solver::Ddim => {
                // deterministic update (eta = 0)
                let (c0, c1) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                for ((xv, &x0v), &ev) in x.data_mut().iter_mut().zip(x0.data()).zip(eps.data()) {
                    *xv = c0 * x0v + c1 * ev;
                }
            }
            Solver::Ddpm => {
                // posterior q(x_{t_prev} | x_t, x0) over the retained subsequence
                let beta_eff = 1.0 - ab_t / ab_prev;
                let var = (beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)).max(0.0);
                let sigma = var.sqrt();
                let coef_x0 = ab_prev.sqrt() * beta_eff / (1.0 - ab_t);
                let coef_xt = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
                let inject = i > 0;
                for (xv, &x0v) in x.data_mut().iter_mut().zip(x0.data()) {
                    let mean = coef_x0 * x0v + coef_xt * *xv;
                    let noise: f64 = if inject { rng.sample(StandardNormal) } else { 0.0 };
                    *xv = mean + spec.temperature * sigma * noise;
                }
            }
        }
        if let Some(ip) = inpaint {
            ip.apply(&mut x);
        }
    }
    Ok(x)
}
