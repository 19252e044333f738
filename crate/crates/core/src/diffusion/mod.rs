//! Noise schedules, the forward (noising) process, training losses and the
//! DDPM/DDIM reverse samplers with temperature and inpainting.

mod loss;
mod sample;

pub use loss::{diffusion_training_loss, diffusion_training_loss_with};
pub use sample::{sample, sample_from_latent, time_subsequence, ClosurePredictor, Inpaint, NoisePredictor};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Diffusion noise schedule: per-step betas, alphas, cumulative alpha
/// products and the posterior standard deviations used by ancestral
/// sampling and classifier guidance.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }
}

/// Build a schedule with `timesteps >= 2` levels.
///
/// Linear: betas evenly spaced over [1e-4, 0.02] (the original DDPM range).
/// Cosine: squared-cosine cumulative alphas with betas clipped below 0.999.
pub fn make_schedule(kind: ScheduleKind, timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::InvalidConfig(format!(
            "schedule needs at least 2 timesteps, got {timesteps}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            (0..timesteps)
                .map(|t| lo + (hi - lo) * t as f64 / (timesteps - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            (0..timesteps)
                .map(|t| {
                    let ab_t = f((t + 1) as f64) / f0;
                    let ab_prev = f(t as f64) / f0;
                    (1.0 - ab_t / ab_prev).clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let sigmas: Vec<f64> = (0..timesteps)
        .map(|t| {
            let ab_prev = if t == 0 { 1.0 } else { alpha_bars[t - 1] };
            (betas[t] * (1.0 - ab_prev) / (1.0 - alpha_bars[t])).max(0.0).sqrt()
        })
        .collect();
    let schedule = NoiseSchedule { kind, timesteps, betas, alphas, alpha_bars, sigmas };
    debug_assert!(schedule.betas.iter().all(|&b| b > 0.0 && b < 1.0));
    debug_assert!(schedule.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    Ok(schedule)
}

/// Forward process: `x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t >= schedule.timesteps {
        return Err(Error::Contract(format!(
            "timestep {t} out of range (T = {})",
            schedule.timesteps
        )));
    }
    if noise.shape() != x0.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs x0 {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bars[t];
    let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| c0 * x + c1 * e)
        .collect();
    Tensor::from_vec(x0.shape().to_vec(), data)
}

/// Per-example forward process for a batch with per-row timesteps.
pub fn q_sample_batch(
    x0: &Tensor,
    ts: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let batch = x0.shape()[0];
    if ts.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} timesteps for batch of {batch}",
            ts.len()
        )));
    }
    if noise.shape() != x0.shape() {
        return Err(Error::ShapeMismatch("noise shape mismatch".into()));
    }
    let row = x0.numel() / batch;
    let mut out = vec![0.0; x0.numel()];
    for (b, &t) in ts.iter().enumerate() {
        if t >= schedule.timesteps {
            return Err(Error::Contract(format!(
                "timestep {t} out of range (T = {})",
                schedule.timesteps
            )));
        }
        let ab = schedule.alpha_bars[t];
        let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..row {
            out[b * row + j] = c0 * x0.data()[b * row + j] + c1 * noise.data()[b * row + j];
        }
    }
    Tensor::from_vec(x0.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Ddpm,
    Ddim,
}

/// How to run the reverse process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub solver: Solver,
    /// Number of denoising steps (an evenly spaced subsequence of the
    /// training schedule when smaller than `T`).
    pub steps: usize,
    /// Scale on injected Gaussian noise. For DDIM (eta = 0) only the initial
    /// latent draw is scaled, since no other noise enters.
    pub temperature: f64,
    /// Clamp the implied clean sample to [-1, 1] after each step
    /// (data is normalized to that range).
    pub clip_sample: bool,
}

impl SamplerSpec {
    pub fn ddim(steps: usize, temperature: f64) -> Self {
        Self { solver: Solver::Ddim, steps, temperature, clip_sample: true }
    }

    pub fn ddpm(steps: usize, temperature: f64) -> Self {
        Self { solver: Solver::Ddpm, steps, temperature, clip_sample: true }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.timesteps {
            return Err(Error::InvalidConfig(format!(
                "sampling steps {} must be in [1, T = {}]",
                self.steps, schedule.timesteps
            )));
        }
        if self.temperature < 0.0 {
            return Err(Error::InvalidConfig("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
