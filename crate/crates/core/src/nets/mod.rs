//! Denoiser backbones (MLP / U-Net-1D / DiT-1D), critics and inverse
//! dynamics. Every network maps (noised input, diffusion timestep, optional
//! condition) to a prediction of the same shape as the input.

mod critic;
mod dit;
pub mod invdyn;
mod mlp;
mod unet;

pub use critic::{Critic, CriticBody, CriticSpec};
pub use dit::DiT1d;
pub use invdyn::{InvDyn, InvDynBody};
pub use mlp::MlpDenoiser;
pub use unet::UNet1d;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which network family denoises the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Mlp,
    Unet1d,
    Dit1d,
}

/// What the denoiser is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictTarget {
    Noise,
    Clean,
}

/// Architecture hyperparameters shared by all backbones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub backbone: Backbone,
    /// Transformer/MLP width.
    pub hidden: usize,
    /// Transformer depth / number of MLP hidden layers.
    pub blocks: usize,
    /// Attention head size.
    pub head_dim: usize,
    /// U-Net base channel count.
    pub base_channels: usize,
    /// Per-stage channel multipliers.
    pub channel_mult: Vec<usize>,
    /// Conv kernel size (odd).
    pub kernel: usize,
    pub predict: PredictTarget,
    /// Condition vector width; 0 = unconditional model.
    pub cond_dim: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::Dit1d,
            hidden: 256,
            blocks: 2,
            head_dim: 32,
            base_channels: 32,
            channel_mult: vec![1, 2, 2, 2],
            kernel: 5,
            predict: PredictTarget::Noise,
            cond_dim: 0,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.head_dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden ({}) must be a positive multiple of head_dim ({})",
                self.hidden, self.head_dim
            )));
        }
        if self.channel_mult.is_empty() {
            return Err(Error::InvalidConfig("channel_mult must be non-empty".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidConfig(format!("kernel ({}) must be odd", self.kernel)));
        }
        if self.blocks == 0 {
            return Err(Error::InvalidConfig("blocks must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optional conditioning for one forward pass. `keep[b] = false` routes
/// example `b` through the learned null-condition embedding (the
/// condition-dropout path used to train classifier-free guidance).
#[derive(Clone, Copy)]
pub enum Cond<'a> {
    None,
    Batch { values: &'a Tensor, keep: &'a [bool] },
}

/// A denoising network over trajectories `[B, H, D]` (the MLP backbone also
/// accepts flat `[B, D]` inputs).
pub trait Denoiser {
    /// Forward pass reading parameter values from `params` (which must have
    /// the model's own layout). The finite-difference oracle probes a cloned
    /// store through this hook.
    fn forward_with(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        x: Var,
        t: &[usize],
        cond: Cond,
    ) -> Result<Var>;

    fn forward(&self, g: &mut Graph, x: Var, t: &[usize], cond: Cond) -> Result<Var> {
        self.forward_with(self.params(), g, x, t, cond)
    }

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn spec(&self) -> &DenoiserSpec;

    /// Forward pass that discards the tape afterwards.
    fn predict(&self, x: &Tensor, t: &[usize], cond: Cond) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv, t, cond)?;
        Ok(g.value(y).clone())
    }
}

/// A planner backbone of any of the three families.
pub enum PlannerNet {
    Mlp(MlpDenoiser),
    Unet(UNet1d),
    Dit(DiT1d),
}

impl PlannerNet {
    pub fn as_dit(&self) -> Option<&DiT1d> {
        match self {
            PlannerNet::Dit(d) => Some(d),
            _ => None,
        }
    }
}

impl Denoiser for PlannerNet {
    fn forward_with(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        x: Var,
        t: &[usize],
        cond: Cond,
    ) -> Result<Var> {
        match self {
            PlannerNet::Mlp(m) => m.forward_with(params, g, x, t, cond),
            PlannerNet::Unet(m) => m.forward_with(params, g, x, t, cond),
            PlannerNet::Dit(m) => m.forward_with(params, g, x, t, cond),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            PlannerNet::Mlp(m) => m.params(),
            PlannerNet::Unet(m) => m.params(),
            PlannerNet::Dit(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            PlannerNet::Mlp(m) => m.params_mut(),
            PlannerNet::Unet(m) => m.params_mut(),
            PlannerNet::Dit(m) => m.params_mut(),
        }
    }

    fn spec(&self) -> &DenoiserSpec {
        match self {
            PlannerNet::Mlp(m) => m.spec(),
            PlannerNet::Unet(m) => m.spec(),
            PlannerNet::Dit(m) => m.spec(),
        }
    }
}

/// Build the backbone named by `spec` for `[horizon, data_dim]` trajectories.
pub fn build_denoiser<R: Rng>(
    spec: &DenoiserSpec,
    horizon: usize,
    data_dim: usize,
    rng: &mut R,
) -> Result<PlannerNet> {
    spec.validate()?;
    Ok(match spec.backbone {
        Backbone::Mlp => PlannerNet::Mlp(MlpDenoiser::new(
            spec.clone(),
            horizon * data_dim,
            Some((horizon, data_dim)),
            rng,
        )?),
        Backbone::Unet1d => PlannerNet::Unet(UNet1d::new(spec.clone(), horizon, data_dim, rng)?),
        Backbone::Dit1d => PlannerNet::Dit(DiT1d::new(spec.clone(), horizon, data_dim, rng)?),
    })
}

/// Sinusoidal embedding of diffusion timesteps, shape `[ts.len(), dim]`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = (dim / 2).max(1);
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..dim {
            let pair = i % half;
            let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
            let freq = (-(pair as f64) * (10_000f64).ln() / denom).exp();
            let angle = t * freq;
            data.push(if i < half { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(vec![ts.len(), dim], data).expect("time embedding shape")
}

/// Timestep indices broadcast to the batch: accepts a per-example slice or a
/// single shared timestep.
pub(crate) fn broadcast_ts(t: &[usize], batch: usize) -> Result<Vec<usize>> {
    if t.len() == batch {
        Ok(t.to_vec())
    } else if t.len() == 1 {
        Ok(vec![t[0]; batch])
    } else {
        Err(Error::ShapeMismatch(format!(
            "got {} timesteps for batch of {}",
            t.len(),
            batch
        )))
    }
}

/// Condition embedding with the learned-null dropout path:
/// `keep[b] * proj(values[b]) + (1 - keep[b]) * null_row`.
pub(crate) fn cond_embedding(
    g: &mut Graph,
    store: &ParamStore,
    proj_w: crate::tensor::ParamId,
    proj_b: crate::tensor::ParamId,
    null_row: crate::tensor::ParamId,
    values: &Tensor,
    keep: &[bool],
) -> Result<Var> {
    let batch = values.shape()[0];
    if keep.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "cond keep mask has {} entries for batch of {}",
            keep.len(),
            batch
        )));
    }
    let vals = g.constant(values.clone());
    let w = g.param(store, proj_w);
    let b = g.param(store, proj_b);
    let proj = g.linear(vals, w, b)?;
    let mask = Tensor::from_vec(
        vec![batch, 1],
        keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
    )?;
    let inv_mask = mask.map(|v| 1.0 - v);
    let mask = g.constant(mask);
    let inv_mask = g.constant(inv_mask);
    let null = g.param(store, null_row);
    let kept = g.mul(proj, mask)?;
    let dropped = g.mul(null, inv_mask)?;
    g.add(kept, dropped)
}

#[cfg(test)]
mod tests;
