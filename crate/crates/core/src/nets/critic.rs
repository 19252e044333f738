use super::{broadcast_ts, sinusoidal_embedding};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

/// Critic body family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticBody {
    /// U-Net style conv encoder, value = linear layer over time-pooled features.
    Unet,
    /// Vanilla pre-LN transformer, value = linear projection of the first token.
    Transformer,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CriticSpec {
    pub body: CriticBody,
    /// Trained on noised inputs (with the diffusion schedule) or clean-only.
    pub noised: bool,
    pub hidden: usize,
    pub blocks: usize,
    pub head_dim: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub train_steps: usize,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            body: CriticBody::Transformer,
            noised: false,
            hidden: 256,
            blocks: 2,
            head_dim: 32,
            base_channels: 32,
            kernel: 5,
            train_steps: 200_000,
        }
    }
}

/// Scalar-valued trajectory critic: `[B, H, D]` -> `[B]` predicted
/// normalized return.
pub struct Critic {
    spec: CriticSpec,
    horizon: usize,
    data_dim: usize,
    params: ParamStore,
    ids: Ids,
}

enum Ids {
    Transformer {
        x_proj_w: ParamId,
        x_proj_b: ParamId,
        pos: ParamId,
        time_w: ParamId,
        time_b: ParamId,
        blocks: Vec<TfBlock>,
        head_w: ParamId,
        head_b: ParamId,
    },
    Unet {
        time_w: ParamId,
        time_b: ParamId,
        convs: Vec<(ParamId, ParamId, usize)>, // w, b, groups
        films: Vec<(ParamId, ParamId)>,
        head_w: ParamId,
        head_b: ParamId,
    },
}

struct TfBlock {
    qkv_w: ParamId,
    qkv_b: ParamId,
    attn_out_w: ParamId,
    attn_out_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

fn norm_groups(channels: usize) -> usize {
    // at least 4 channels per group keeps the normalization well conditioned
    // at desk-scale widths; 8 groups from 32 channels up
    let cap = (channels / 4).clamp(1, 8);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl Critic {
    pub fn new<R: Rng>(
        spec: CriticSpec,
        horizon: usize,
        data_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.hidden == 0 || spec.hidden % spec.head_dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "critic hidden ({}) must be a multiple of head_dim ({})",
                spec.hidden, spec.head_dim
            )));
        }
        let mut params = ParamStore::new();
        let ids = match spec.body {
            CriticBody::Transformer => {
                let e = spec.hidden;
                let x_proj_w = params.add_kaiming("x_proj.w", &[data_dim, e], data_dim, rng);
                let x_proj_b = params.add_zeros("x_proj.b", &[e]);
                let pos = params.add_kaiming("pos", &[horizon, e], e, rng);
                let time_w = params.add_kaiming("time.w", &[e, e], e, rng);
                let time_b = params.add_zeros("time.b", &[e]);
                let mut blocks = Vec::new();
                for i in 0..spec.blocks {
                    blocks.push(TfBlock {
                        qkv_w: params.add_kaiming(&format!("block.{i}.qkv.w"), &[e, 3 * e], e, rng),
                        qkv_b: params.add_zeros(&format!("block.{i}.qkv.b"), &[3 * e]),
                        attn_out_w: params
                            .add_kaiming(&format!("block.{i}.attn_out.w"), &[e, e], e, rng),
                        attn_out_b: params.add_zeros(&format!("block.{i}.attn_out.b"), &[e]),
                        mlp_w1: params.add_kaiming(&format!("block.{i}.mlp.w1"), &[e, 4 * e], e, rng),
                        mlp_b1: params.add_zeros(&format!("block.{i}.mlp.b1"), &[4 * e]),
                        mlp_w2: params
                            .add_kaiming(&format!("block.{i}.mlp.w2"), &[4 * e, e], 4 * e, rng),
                        mlp_b2: params.add_zeros(&format!("block.{i}.mlp.b2"), &[e]),
                    });
                }
                let head_w = params.add_kaiming("head.w", &[e, 1], e, rng);
                let head_b = params.add_zeros("head.b", &[1]);
                Ids::Transformer { x_proj_w, x_proj_b, pos, time_w, time_b, blocks, head_w, head_b }
            }
            CriticBody::Unet => {
                let c = spec.base_channels;
                let k = spec.kernel;
                let time_w = params.add_kaiming("time.w", &[c, c], c, rng);
                let time_b = params.add_zeros("time.b", &[c]);
                // a small conv encoder: widths c, 2c, 2c with pooling between
                let widths = [data_dim, c, 2 * c, 2 * c];
                let mut convs = Vec::new();
                let mut films = Vec::new();
                for i in 0..3 {
                    let (cin, cout) = (widths[i], widths[i + 1]);
                    convs.push((
                        params.add_kaiming(&format!("enc.{i}.w"), &[cout, cin, k], cin * k, rng),
                        params.add_zeros(&format!("enc.{i}.b"), &[cout]),
                        norm_groups(cout),
                    ));
                    films.push((
                        params.add_kaiming(&format!("enc.{i}.film.w"), &[c, 2 * cout], c, rng),
                        params.add_zeros(&format!("enc.{i}.film.b"), &[2 * cout]),
                    ));
                }
                let head_w = params.add_kaiming("head.w", &[2 * c, 1], 2 * c, rng);
                let head_b = params.add_zeros("head.b", &[1]);
                Ids::Unet { time_w, time_b, convs, films, head_w, head_b }
            }
        };
        Ok(Self { spec, horizon, data_dim, params, ids })
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Build the value head into `g`: `x [B, H, D]` -> `[B]`.
    pub fn forward(&self, g: &mut Graph, x: Var, t: &[usize]) -> Result<Var> {
        self.forward_with(&self.params, g, x, t)
    }

    /// Same, reading parameter values from an external store.
    pub fn forward_with(&self, params: &ParamStore, g: &mut Graph, x: Var, t: &[usize]) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.horizon || shape[2] != self.data_dim {
            return Err(Error::ShapeMismatch(format!(
                "critic expects [B, {}, {}], got {:?}",
                self.horizon, self.data_dim, shape
            )));
        }
        let batch = shape[0];
        let ts = broadcast_ts(t, batch)?;
        match &self.ids {
            Ids::Transformer { x_proj_w, x_proj_b, pos, time_w, time_b, blocks, head_w, head_b } => {
                let e = self.spec.hidden;
                let heads = e / self.spec.head_dim;
                let (xw, xb) = (g.param(params, *x_proj_w), g.param(params, *x_proj_b));
                let mut tokens = g.linear(x, xw, xb)?;
                let pos_table = g.param(params, *pos);
                let positions: Vec<usize> = (0..self.horizon).collect();
                let p = g.embedding(pos_table, &positions)?;
                tokens = g.add(tokens, p)?;
                // timestep embedding added to every token (relevant for the
                // noised critic; the clean critic is always called with t=0)
                let temb_in = g.constant(sinusoidal_embedding(&ts, e));
                let (tw, tb) = (g.param(params, *time_w), g.param(params, *time_b));
                let temb = g.linear(temb_in, tw, tb)?;
                let temb = g.reshape(temb, vec![batch, 1, e])?;
                tokens = g.add(tokens, temb)?;
                for blk in blocks {
                    let normed = g.layer_norm(tokens, 1e-5)?;
                    let (qw, qb) = (g.param(params, blk.qkv_w), g.param(params, blk.qkv_b));
                    let qkv = g.linear(normed, qw, qb)?;
                    let q = g.slice(qkv, 2, 0, e)?;
                    let k = g.slice(qkv, 2, e, e)?;
                    let v = g.slice(qkv, 2, 2 * e, e)?;
                    let attn = g.sdpa(q, k, v, heads)?;
                    let (ow, ob) =
                        (g.param(params, blk.attn_out_w), g.param(params, blk.attn_out_b));
                    let attn_out = g.linear(attn, ow, ob)?;
                    tokens = g.add(tokens, attn_out)?;
                    let normed = g.layer_norm(tokens, 1e-5)?;
                    let (w1, b1) = (g.param(params, blk.mlp_w1), g.param(params, blk.mlp_b1));
                    let h = g.linear(normed, w1, b1)?;
                    let h = g.gelu(h);
                    let (w2, b2) = (g.param(params, blk.mlp_w2), g.param(params, blk.mlp_b2));
                    let mlp_out = g.linear(h, w2, b2)?;
                    tokens = g.add(tokens, mlp_out)?;
                }
                let tokens = g.layer_norm(tokens, 1e-5)?;
                // linear projection head on the first token output
                let first = g.slice(tokens, 1, 0, 1)?;
                let first = g.reshape(first, vec![batch, e])?;
                let (hw, hb) = (g.param(params, *head_w), g.param(params, *head_b));
                let out = g.linear(first, hw, hb)?;
                g.reshape(out, vec![batch])
            }
            Ids::Unet { time_w, time_b, convs, films, head_w, head_b } => {
                let c = self.spec.base_channels;
                let temb_in = g.constant(sinusoidal_embedding(&ts, c));
                let (tw, tb) = (g.param(params, *time_w), g.param(params, *time_b));
                let temb = g.linear(temb_in, tw, tb)?;
                let temb = g.mish(temb);
                let mut h = x;
                for (i, ((cw, cb, groups), (fw, fb))) in convs.iter().zip(films).enumerate() {
                    let (wv, bv) = (g.param(params, *cw), g.param(params, *cb));
                    h = g.conv1d(h, wv, bv)?;
                    h = g.group_norm(h, *groups, 1e-5)?;
                    h = g.mish(h);
                    let (fwv, fbv) = (g.param(params, *fw), g.param(params, *fb));
                    let film = g.linear(temb, fwv, fbv)?;
                    let cout = g.value(h).shape()[2];
                    let scale = g.slice(film, 1, 0, cout)?;
                    let shift = g.slice(film, 1, cout, cout)?;
                    let scale = g.reshape(scale, vec![batch, 1, cout])?;
                    let shift = g.reshape(shift, vec![batch, 1, cout])?;
                    let scale1 = g.add_scalar(scale, 1.0);
                    h = g.mul(h, scale1)?;
                    h = g.add(h, shift)?;
                    if i + 1 < convs.len() && g.value(h).shape()[1] % 2 == 0 {
                        h = g.avg_pool2(h)?;
                    }
                }
                // value = linear layer over time-pooled features
                let pooled = g.mean_axis(h, 1)?;
                let (hw, hb) = (g.param(params, *head_w), g.param(params, *head_b));
                let out = g.linear(pooled, hw, hb)?;
                g.reshape(out, vec![batch])
            }
        }
    }

    /// Predicted values for a batch, tape discarded.
    pub fn values(&self, x: &Tensor, t: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, t)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Sum of values over the batch and its gradient w.r.t. the input.
    /// Rows are independent, so the input gradient holds each row's own
    /// value gradient. This is the hook classifier guidance differentiates.
    pub fn value_input_grad(&self, x: &Tensor, t: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, t)?;
        let values = g.value(out).data().to_vec();
        let total = g.sum(out);
        let grads = g.backward(total)?;
        let gx = grads
            .grad(xv)
            .cloned()
            .ok_or_else(|| Error::Contract("critic input unreachable from value".into()))?;
        Ok((values, gx))
    }
}

/// Wrapper so generic training code can treat the critic like the denoisers
/// for checkpoint/optimizer purposes.
impl Critic {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }
}

