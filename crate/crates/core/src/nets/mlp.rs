use super::{broadcast_ts, cond_embedding, sinusoidal_embedding, Cond, Denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

/// MLP denoiser over a flat vector: a 2-layer timestep-embedding stack
/// feeding a 3-layer body. Doubles as the inverse-dynamics diffusion head
/// (action in, state pair as condition) and as a flat-trajectory planner.
pub struct MlpDenoiser {
    spec: DenoiserSpec,
    in_dim: usize,
    /// When set, trajectory input `[B, H, D]` is flattened to `[B, H*D]`
    /// on the way in and restored on the way out.
    token_shape: Option<(usize, usize)>,
    params: ParamStore,
    ids: Ids,
}

struct Ids {
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    cond: Option<(ParamId, ParamId, ParamId)>, // proj w, proj b, null row
    body: Vec<(ParamId, ParamId)>,
}

impl MlpDenoiser {
    pub fn new<R: Rng>(
        spec: DenoiserSpec,
        in_dim: usize,
        token_shape: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let e = spec.hidden;
        let mut params = ParamStore::new();
        let time_w1 = params.add_kaiming("time.w1", &[e, e], e, rng);
        let time_b1 = params.add_zeros("time.b1", &[e]);
        let time_w2 = params.add_kaiming("time.w2", &[e, e], e, rng);
        let time_b2 = params.add_zeros("time.b2", &[e]);
        let cond = if spec.cond_dim > 0 {
            let w = params.add_kaiming("cond.w", &[spec.cond_dim, e], spec.cond_dim, rng);
            let b = params.add_zeros("cond.b", &[e]);
            let null = params.add_kaiming("cond.null", &[1, e], e, rng);
            Some((w, b, null))
        } else {
            None
        };
        let body_in = in_dim + e + if cond.is_some() { e } else { 0 };
        let mut body = Vec::new();
        let mut widths = vec![body_in];
        widths.extend(std::iter::repeat(e).take(2));
        widths.push(in_dim);
        for (i, pair) in widths.windows(2).enumerate() {
            let (din, dout) = (pair[0], pair[1]);
            let last = i + 2 == widths.len();
            let w = if last {
                // zero-init output layer: the untrained model predicts its bias
                params.add_zeros(&format!("body.{i}.w"), &[din, dout])
            } else {
                params.add_kaiming(&format!("body.{i}.w"), &[din, dout], din, rng)
            };
            let b = params.add_zeros(&format!("body.{i}.b"), &[dout]);
            body.push((w, b));
        }
        Ok(Self {
            spec,
            in_dim,
            token_shape,
            params,
            ids: Ids { time_w1, time_b1, time_w2, time_b2, cond, body },
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }
}

impl Denoiser for MlpDenoiser {
    fn forward_with(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        x: Var,
        t: &[usize],
        cond: Cond,
    ) -> Result<Var> {
        let in_shape = g.value(x).shape().to_vec();
        let batch = in_shape[0];
        let flat_dim: usize = in_shape[1..].iter().product();
        if flat_dim != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "mlp denoiser expects {} features, got {:?}",
                self.in_dim, in_shape
            )));
        }
        let x2 = if in_shape.len() == 2 { x } else { g.reshape(x, vec![batch, flat_dim])? };
        let ts = broadcast_ts(t, batch)?;

        let temb = g.constant(sinusoidal_embedding(&ts, self.spec.hidden));
        let (w1, b1) = (g.param(params, self.ids.time_w1), g.param(params, self.ids.time_b1));
        let h = g.linear(temb, w1, b1)?;
        let h = g.silu(h);
        let (w2, b2) = (g.param(params, self.ids.time_w2), g.param(params, self.ids.time_b2));
        let temb = g.linear(h, w2, b2)?;

        let mut features = vec![x2, temb];
        match (cond, &self.ids.cond) {
            (Cond::None, None) => {}
            (Cond::Batch { values, keep }, Some((cw, cb, cnull))) => {
                if values.shape() != [batch, self.spec.cond_dim] {
                    return Err(Error::ShapeMismatch(format!(
                        "condition shape {:?}, expected [{batch}, {}]",
                        values.shape(),
                        self.spec.cond_dim
                    )));
                }
                let c = cond_embedding(g, params, *cw, *cb, *cnull, values, keep)?;
                features.push(c);
            }
            (Cond::Batch { .. }, None) => {
                return Err(Error::Contract(
                    "condition provided to an unconditional model (cond_dim = 0)".into(),
                ));
            }
            (Cond::None, Some(_)) => {
                return Err(Error::Contract(
                    "conditional model requires a condition batch (use keep=false for null)".into(),
                ));
            }
        }
        let mut h = g.concat(&features, 1)?;
        let n_layers = self.ids.body.len();
        for (i, (w, b)) in self.ids.body.iter().enumerate() {
            let (wv, bv) = (g.param(params, *w), g.param(params, *b));
            h = g.linear(h, wv, bv)?;
            if i + 1 < n_layers {
                h = g.silu(h);
            }
        }
        if in_shape.len() == 2 {
            Ok(h)
        } else {
            g.reshape(h, in_shape)
        }
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }
}

impl MlpDenoiser {
    /// Convenience for tests: prediction for a flat batch with no tape kept.
    pub fn predict_flat(&self, x: &Tensor, t: &[usize], cond: Cond) -> Result<Tensor> {
        self.predict(x, t, cond)
    }

    pub fn token_shape(&self) -> Option<(usize, usize)> {
        self.token_shape
    }
}
