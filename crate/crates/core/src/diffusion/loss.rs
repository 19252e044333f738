use super::{q_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::{Cond, Denoiser, PredictTarget};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Denoising loss with timesteps and noise drawn from `rng` (one uniform
/// timestep per example). Condition dropout masks, when any, arrive
/// pre-sampled inside `cond`.
pub fn diffusion_training_loss<R: Rng>(
    g: &mut Graph,
    model: &dyn Denoiser,
    x0: &Tensor,
    cond: Cond,
    schedule: &NoiseSchedule,
    predict: PredictTarget,
    rng: &mut R,
) -> Result<Var> {
    let batch = *x0
        .shape()
        .first()
        .ok_or_else(|| Error::Contract("empty training batch".into()))?;
    if batch == 0 {
        return Err(Error::Contract("empty training batch".into()));
    }
    let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..schedule.timesteps)).collect();
    let noise = Tensor::randn(x0.shape(), rng);
    diffusion_training_loss_with(g, model, x0, cond, &ts, &noise, schedule, predict)
}

/// Deterministic core of the denoising loss: callers provide the timesteps
/// and the noise draw. Noise mode regresses the model on the injected noise;
/// clean mode regresses it on the original sample.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_training_loss_with(
    g: &mut Graph,
    model: &dyn Denoiser,
    x0: &Tensor,
    cond: Cond,
    ts: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
    predict: PredictTarget,
) -> Result<Var> {
    let x_t = q_sample_batch(x0, ts, noise, schedule)?;
    let x_t = g.constant(x_t);
    let pred = model.forward(g, x_t, ts, cond)?;
    let target = match predict {
        PredictTarget::Noise => g.constant(noise.clone()),
        PredictTarget::Clean => g.constant(x0.clone()),
    };
    g.mse_loss(pred, target)
}
