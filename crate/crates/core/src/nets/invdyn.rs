use super::{Backbone, Cond, Denoiser, DenoiserSpec, MlpDenoiser, PredictTarget};
use crate::diffusion::{sample, ClosurePredictor, NoiseSchedule, SamplerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvDynBody {
    /// MLP diffusion head sampled with DDPM (default).
    Diffusion,
    /// Plain MLP regression.
    Regular,
}

/// Inverse dynamics: maps a (current state, planned next state) pair to the
/// action connecting them, in normalized coordinates. With `centralize` the
/// input pair is `(0, s_next - s)` instead of `(s, s_next)`, which helps
/// generalization on navigation tasks.
pub struct InvDyn {
    pub centralize: bool,
    state_dim: usize,
    action_dim: usize,
    kind: Kind,
}

enum Kind {
    Diffusion { model: MlpDenoiser, schedule: NoiseSchedule, sampler: SamplerSpec },
    Regular { params: ParamStore, layers: Vec<(ParamId, ParamId)> },
}

impl InvDyn {
    pub fn new_diffusion<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        schedule: NoiseSchedule,
        sampler: SamplerSpec,
        centralize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = DenoiserSpec {
            backbone: Backbone::Mlp,
            hidden,
            blocks: 2,
            head_dim: hidden.min(32),
            predict: PredictTarget::Noise,
            cond_dim: 2 * state_dim,
            ..DenoiserSpec::default()
        };
        let model = MlpDenoiser::new(spec, action_dim, None, rng)?;
        Ok(Self {
            centralize,
            state_dim,
            action_dim,
            kind: Kind::Diffusion { model, schedule, sampler },
        })
    }

    pub fn new_regular<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        centralize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let widths = [2 * state_dim, hidden, hidden, action_dim];
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let w = params.add_kaiming(&format!("layer.{i}.w"), &[pair[0], pair[1]], pair[0], rng);
            let b = params.add_zeros(&format!("layer.{i}.b"), &[pair[1]]);
            layers.push((w, b));
        }
        Ok(Self { centralize, state_dim, action_dim, kind: Kind::Regular { params, layers } })
    }

    pub fn body(&self) -> InvDynBody {
        match self.kind {
            Kind::Diffusion { .. } => InvDynBody::Diffusion,
            Kind::Regular { .. } => InvDynBody::Regular,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// The training-pair transform: `(s, s_next)` or centralized
    /// `(0, s_next - s)`.
    pub fn pair_input(&self, s: &[f64], s_next: &[f64]) -> Vec<f64> {
        pair_input(s, s_next, self.centralize)
    }

    pub fn params(&self) -> &ParamStore {
        match &self.kind {
            Kind::Diffusion { model, .. } => model.params(),
            Kind::Regular { params, .. } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match &mut self.kind {
            Kind::Diffusion { model, .. } => model.params_mut(),
            Kind::Regular { params, .. } => params,
        }
    }

    /// Denoiser behind the diffusion body (training hook).
    pub fn diffusion_model(&self) -> Option<(&MlpDenoiser, &NoiseSchedule)> {
        match &self.kind {
            Kind::Diffusion { model, schedule, .. } => Some((model, schedule)),
            Kind::Regular { .. } => None,
        }
    }

    /// Regression forward for the plain body: `pairs [B, 2*Ds]` -> `[B, Da]`.
    pub fn regular_forward(&self, g: &mut Graph, pairs: Var) -> Result<Var> {
        match &self.kind {
            Kind::Regular { params, layers } => {
                let mut h = pairs;
                for (i, (w, b)) in layers.iter().enumerate() {
                    let (wv, bv) = (g.param(params, *w), g.param(params, *b));
                    h = g.linear(h, wv, bv)?;
                    if i + 1 < layers.len() {
                        h = g.silu(h);
                    }
                }
                Ok(h)
            }
            Kind::Diffusion { .. } => {
                Err(Error::Contract("regular_forward called on a diffusion inverse dynamics".into()))
            }
        }
    }

    /// Produce the (normalized) action for a normalized state pair.
    pub fn infer<R: Rng>(&self, s: &[f64], s_next: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if s.len() != self.state_dim || s_next.len() != self.state_dim {
            return Err(Error::ShapeMismatch(format!(
                "state pair dims {}/{} vs model {}",
                s.len(),
                s_next.len(),
                self.state_dim
            )));
        }
        let pair =
            Tensor::from_vec(vec![1, 2 * self.state_dim], self.pair_input(s, s_next))?;
        match &self.kind {
            Kind::Diffusion { model, schedule, sampler } => {
                let keep = [true];
                let predictor = ClosurePredictor(|x_t: &Tensor, t: usize| {
                    model.predict(x_t, &[t], Cond::Batch { values: &pair, keep: &keep })
                });
                let action =
                    sample(&predictor, schedule, sampler, &[1, self.action_dim], None, rng)?;
                Ok(action.into_data())
            }
            Kind::Regular { .. } => {
                let mut g = Graph::new();
                let pv = g.constant(pair);
                let out = self.regular_forward(&mut g, pv)?;
                Ok(g.value(out).data().to_vec())
            }
        }
    }
}

/// Standalone pair transform shared with the dataset builder.
pub fn pair_input(s: &[f64], s_next: &[f64], centralize: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.len() * 2);
    if centralize {
        out.extend(std::iter::repeat(0.0).take(s.len()));
        out.extend(s_next.iter().zip(s).map(|(&n, &c)| n - c));
    } else {
        out.extend_from_slice(s);
        out.extend_from_slice(s_next);
    }
    out
}
