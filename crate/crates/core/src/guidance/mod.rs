//! Guided sampling: classifier-free guidance, classifier guidance through a
//! differentiable return critic, and Monte Carlo sampling with selection.

mod critic_train;

pub use critic_train::{train_critic, CriticTrainOptions};

use crate::diffusion::{sample, Inpaint, NoisePredictor, NoiseSchedule, SamplerSpec};
use crate::error::{Error, Result};
use crate::nets::{Cond, Critic, Denoiser, PredictTarget};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceAlgo {
    None,
    Cg,
    Cfg,
    Mcss,
}

/// Guided-sampling configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub algo: GuidanceAlgo,
    /// Guidance strength w.
    pub scale: f64,
    /// CFG condition, in normalized-return units.
    pub target_return: f64,
    /// Condition-dropout probability used when training CFG models.
    pub p_uncond: f64,
    /// Candidate count N for sampling with selection.
    pub candidates: usize,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            algo: GuidanceAlgo::Mcss,
            scale: 1.0,
            target_return: 1.0,
            p_uncond: 0.1,
            candidates: 50,
        }
    }
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 0.0 {
            return Err(Error::InvalidConfig("guidance scale must be >= 0".into()));
        }
        if self.candidates < 1 {
            return Err(Error::InvalidConfig("candidate count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidConfig("p_uncond must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Convert a model prediction to the noise domain if needed.
fn to_eps(pred: Tensor, x_t: &Tensor, t: usize, schedule: &NoiseSchedule, target: PredictTarget) -> Tensor {
    match target {
        PredictTarget::Noise => pred,
        PredictTarget::Clean => {
            let ab = schedule.alpha_bars[t];
            let (c0, c1) = (ab.sqrt(), 1.0 / (1.0 - ab).sqrt());
            let data = x_t
                .data()
                .iter()
                .zip(pred.data())
                .map(|(&x, &x0)| (x - c0 * x0) * c1)
                .collect();
            Tensor::from_vec(x_t.shape().to_vec(), data).expect("eps conversion shape")
        }
    }
}

/// Noise prediction straight from a denoiser, conditional or null-routed.
/// Unconditional models (`cond_dim = 0`) pass `cond: None`.
pub struct PlannerPredictor<'a> {
    pub model: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    /// Condition row broadcast to the batch, e.g. a target return.
    pub cond: Option<Vec<f64>>,
    /// When a condition row is present: route through it (true) or through
    /// the learned null embedding (false).
    pub conditional: bool,
}

impl<'a> PlannerPredictor<'a> {
    pub fn unconditional(model: &'a dyn Denoiser, schedule: &'a NoiseSchedule) -> Self {
        let cond = (model.spec().cond_dim > 0).then(|| vec![0.0; model.spec().cond_dim]);
        Self { model, schedule, cond, conditional: false }
    }

    fn run(&self, x_t: &Tensor, t: usize, conditional: bool) -> Result<Tensor> {
        let batch = x_t.shape()[0];
        let pred = match &self.cond {
            None => self.model.predict(x_t, &[t], Cond::None)?,
            Some(row) => {
                let mut data = Vec::with_capacity(batch * row.len());
                for _ in 0..batch {
                    data.extend_from_slice(row);
                }
                let values = Tensor::from_vec(vec![batch, row.len()], data)?;
                let keep = vec![conditional; batch];
                self.model.predict(x_t, &[t], Cond::Batch { values: &values, keep: &keep })?
            }
        };
        Ok(to_eps(pred, x_t, t, self.schedule, self.model.spec().predict))
    }
}

impl NoisePredictor for PlannerPredictor<'_> {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.run(x_t, t, self.conditional)
    }
}

/// Classifier-free guidance:
/// `eps = eps(x, t, null) + w * (eps(x, t, c) - eps(x, t, null))`.
/// `w = 0` and `w = 1` short-circuit to exactly the unconditional and
/// conditional predictions.
pub struct CfgPredictor<'a> {
    base: PlannerPredictor<'a>,
    w: f64,
}

impl<'a> CfgPredictor<'a> {
    pub fn new(
        model: &'a dyn Denoiser,
        schedule: &'a NoiseSchedule,
        target_return: f64,
        w: f64,
    ) -> Result<Self> {
        if model.spec().cond_dim == 0 {
            return Err(Error::Contract(
                "classifier-free guidance needs a condition-capable model (cond_dim > 0)".into(),
            ));
        }
        let mut cond = vec![0.0; model.spec().cond_dim];
        cond[0] = target_return;
        Ok(Self {
            base: PlannerPredictor { model, schedule, cond: Some(cond), conditional: true },
            w,
        })
    }
}

impl NoisePredictor for CfgPredictor<'_> {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        if self.w == 0.0 {
            return self.base.run(x_t, t, false);
        }
        if self.w == 1.0 {
            return self.base.run(x_t, t, true);
        }
        let uncond = self.base.run(x_t, t, false)?;
        let cond = self.base.run(x_t, t, true)?;
        let data = uncond
            .data()
            .iter()
            .zip(cond.data())
            .map(|(&u, &c)| u + self.w * (c - u))
            .collect();
        Tensor::from_vec(x_t.shape().to_vec(), data)
    }
}

/// Differentiable guidance potential whose input gradient steers sampling.
/// Realized by the noised return critic; tests substitute analytic forms.
pub trait GuidancePotential {
    /// Per-row values and d(sum of values)/d(input).
    fn value_and_grad(&self, x: &Tensor, t: usize) -> Result<(Vec<f64>, Tensor)>;
}

impl GuidancePotential for Critic {
    fn value_and_grad(&self, x: &Tensor, t: usize) -> Result<(Vec<f64>, Tensor)> {
        self.value_input_grad(x, &[t])
    }
}

/// Classifier guidance: `eps_bar = eps - w * sigma_t * grad V(x_t)`.
/// `w = 0` short-circuits to the unguided prediction.
pub struct CgPredictor<'a> {
    base: PlannerPredictor<'a>,
    potential: &'a dyn GuidancePotential,
    w: f64,
}

impl<'a> CgPredictor<'a> {
    pub fn new(
        model: &'a dyn Denoiser,
        schedule: &'a NoiseSchedule,
        critic: &'a Critic,
        w: f64,
    ) -> Result<Self> {
        if !critic.spec().noised {
            return Err(Error::Contract(
                "classifier guidance needs a critic trained on noised inputs".into(),
            ));
        }
        Ok(Self {
            base: PlannerPredictor::unconditional(model, schedule),
            potential: critic,
            w,
        })
    }

    /// Test hook: guide with an arbitrary differentiable potential.
    pub fn with_potential(
        model: &'a dyn Denoiser,
        schedule: &'a NoiseSchedule,
        potential: &'a dyn GuidancePotential,
        w: f64,
    ) -> Self {
        Self { base: PlannerPredictor::unconditional(model, schedule), potential, w }
    }
}

impl NoisePredictor for CgPredictor<'_> {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let eps = self.base.predict_noise(x_t, t)?;
        if self.w == 0.0 {
            return Ok(eps);
        }
        let (_, grad) = self.potential.value_and_grad(x_t, t)?;
        let sigma = self.base.schedule.sigma(t);
        let data = eps
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&e, &g)| e - self.w * sigma * g)
            .collect();
        Tensor::from_vec(x_t.shape().to_vec(), data)
    }
}

/// Outcome of sampling with selection.
#[derive(Debug, Clone)]
pub struct McssSelection {
    /// The winning plan, shape `[H, W]`.
    pub plan: Tensor,
    pub index: usize,
    pub value: f64,
    /// Critic value of every candidate, in sampling order.
    pub values: Vec<f64>,
}

/// Sample `n` unconditional plans (as one batched call) with the first state
/// inpainted, then return the critic's argmax. Ties break toward the lowest
/// candidate index.
pub fn mcss_select<R: Rng>(
    model: &dyn NoisePredictor,
    critic: &Critic,
    schedule: &NoiseSchedule,
    sampler: &SamplerSpec,
    plan_shape: (usize, usize),
    inpaint: Option<&Inpaint>,
    n: usize,
    rng: &mut R,
) -> Result<McssSelection> {
    if n < 1 {
        return Err(Error::Contract("candidate count must be >= 1".into()));
    }
    let (h, w) = plan_shape;
    let batch = sample(model, schedule, sampler, &[n, h, w], inpaint, rng)?;
    let values = critic.values(&batch, &[0])?;
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let plan = batch.slice_leading(best, 1).reshaped(vec![h, w])?;
    Ok(McssSelection { plan, index: best, value: values[best], values })
}

#[cfg(test)]
mod tests;
