use super::{broadcast_ts, cond_embedding, sinusoidal_embedding, Cond, Denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use rand::Rng;

/// 1-D diffusion transformer over `[B, H, D]` trajectories: each of the H
/// plan positions is a token. Timestep (plus optional condition) embeddings
/// modulate every block through adaptive layer norm, zero-initialized so an
/// untrained model is an identity-with-zero-output network.
pub struct DiT1d {
    spec: DenoiserSpec,
    horizon: usize,
    data_dim: usize,
    params: ParamStore,
    ids: Ids,
}

struct BlockIds {
    mod_w: ParamId,
    mod_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    attn_out_w: ParamId,
    attn_out_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

struct Ids {
    x_proj_w: ParamId,
    x_proj_b: ParamId,
    pos: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    cond: Option<(ParamId, ParamId, ParamId)>,
    blocks: Vec<BlockIds>,
    final_mod_w: ParamId,
    final_mod_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// MLP expansion ratio inside each block (not stated by the reference
/// configuration; the conventional factor of 4 is used).
const MLP_RATIO: usize = 4;

impl DiT1d {
    pub fn new<R: Rng>(
        spec: DenoiserSpec,
        horizon: usize,
        data_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let e = spec.hidden;
        let mut params = ParamStore::new();
        let x_proj_w = params.add_kaiming("x_proj.w", &[data_dim, e], data_dim, rng);
        let x_proj_b = params.add_zeros("x_proj.b", &[e]);
        let pos = params.add_kaiming("pos", &[horizon, e], e, rng);
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
        let mut blocks = Vec::with_capacity(spec.blocks);
        for i in 0..spec.blocks {
            blocks.push(BlockIds {
                // adaLN-zero: modulation starts at identity / zero gates
                mod_w: params.add_zeros(&format!("block.{i}.mod.w"), &[e, 6 * e]),
                mod_b: params.add_zeros(&format!("block.{i}.mod.b"), &[6 * e]),
                qkv_w: params.add_kaiming(&format!("block.{i}.qkv.w"), &[e, 3 * e], e, rng),
                qkv_b: params.add_zeros(&format!("block.{i}.qkv.b"), &[3 * e]),
                attn_out_w: params.add_kaiming(&format!("block.{i}.attn_out.w"), &[e, e], e, rng),
                attn_out_b: params.add_zeros(&format!("block.{i}.attn_out.b"), &[e]),
                mlp_w1: params.add_kaiming(&format!("block.{i}.mlp.w1"), &[e, MLP_RATIO * e], e, rng),
                mlp_b1: params.add_zeros(&format!("block.{i}.mlp.b1"), &[MLP_RATIO * e]),
                mlp_w2: params.add_kaiming(
                    &format!("block.{i}.mlp.w2"),
                    &[MLP_RATIO * e, e],
                    MLP_RATIO * e,
                    rng,
                ),
                mlp_b2: params.add_zeros(&format!("block.{i}.mlp.b2"), &[e]),
            });
        }
        let final_mod_w = params.add_zeros("final.mod.w", &[e, 2 * e]);
        let final_mod_b = params.add_zeros("final.mod.b", &[2 * e]);
        let out_w = params.add_zeros("final.out.w", &[e, data_dim]);
        let out_b = params.add_zeros("final.out.b", &[data_dim]);
        Ok(Self {
            spec,
            horizon,
            data_dim,
            params,
            ids: Ids {
                x_proj_w,
                x_proj_b,
                pos,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                cond,
                blocks,
                final_mod_w,
                final_mod_b,
                out_w,
                out_b,
            },
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_blocks(&self) -> usize {
        self.ids.blocks.len()
    }

    /// Forward pass that also returns the attention nodes of every block so
    /// callers can read head-averaged attention weights from the graph.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        x: Var,
        t: &[usize],
        cond: Cond,
    ) -> Result<(Var, Vec<Var>)> {
        self.forward_attention_with(&self.params, g, x, t, cond)
    }

    /// Same, reading parameter values from an external store.
    pub fn forward_attention_with(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        x: Var,
        t: &[usize],
        cond: Cond,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.horizon || shape[2] != self.data_dim {
            return Err(Error::ShapeMismatch(format!(
                "dit expects [B, {}, {}], got {:?}",
                self.horizon, self.data_dim, shape
            )));
        }
        let batch = shape[0];
        let e = self.spec.hidden;
        let heads = e / self.spec.head_dim;
        let ts = broadcast_ts(t, batch)?;

        // conditioning vector c = time embedding (+ condition embedding)
        let temb_in = g.constant(sinusoidal_embedding(&ts, e));
        let (w1, b1) = (g.param(params, self.ids.time_w1), g.param(params, self.ids.time_b1));
        let h = g.linear(temb_in, w1, b1)?;
        let h = g.silu(h);
        let (w2, b2) = (g.param(params, self.ids.time_w2), g.param(params, self.ids.time_b2));
        let mut cvec = g.linear(h, w2, b2)?;
        match (cond, &self.ids.cond) {
            (Cond::None, None) => {}
            (Cond::Batch { values, keep }, Some((cw, cb, cnull))) => {
                let ce = cond_embedding(g, params, *cw, *cb, *cnull, values, keep)?;
                cvec = g.add(cvec, ce)?;
            }
            (Cond::Batch { .. }, None) => {
                return Err(Error::Contract(
                    "condition provided to an unconditional model (cond_dim = 0)".into(),
                ));
            }
            (Cond::None, Some(_)) => {
                return Err(Error::Contract(
                    "conditional model requires a condition batch".into(),
                ));
            }
        }
        let cvec_act = g.silu(cvec);

        // token embedding + learned positions
        let (xw, xb) = (g.param(params, self.ids.x_proj_w), g.param(params, self.ids.x_proj_b));
        let mut tokens = g.linear(x, xw, xb)?;
        let pos_table = g.param(params, self.ids.pos);
        let positions: Vec<usize> = (0..self.horizon).collect();
        let pos = g.embedding(pos_table, &positions)?;
        tokens = g.add(tokens, pos)?;

        let mut attn_nodes = Vec::with_capacity(self.ids.blocks.len());
        for blk in &self.ids.blocks {
            let (mw, mb) = (g.param(params, blk.mod_w), g.param(params, blk.mod_b));
            let modulation = g.linear(cvec_act, mw, mb)?; // [B, 6E]
            let parts: Vec<Var> = (0..6)
                .map(|i| {
                    let s = g.slice(modulation, 1, i * e, e)?;
                    g.reshape(s, vec![batch, 1, e])
                })
                .collect::<Result<_>>()?;
            let (shift1, scale1, gate1, shift2, scale2, gate2) =
                (parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]);

            // attention sublayer
            let normed = g.layer_norm(tokens, 1e-5)?;
            let scale1p = g.add_scalar(scale1, 1.0);
            let modded = g.mul(normed, scale1p)?;
            let modded = g.add(modded, shift1)?;
            let (qw, qb) = (g.param(params, blk.qkv_w), g.param(params, blk.qkv_b));
            let qkv = g.linear(modded, qw, qb)?;
            let q = g.slice(qkv, 2, 0, e)?;
            let k = g.slice(qkv, 2, e, e)?;
            let v = g.slice(qkv, 2, 2 * e, e)?;
            let attn = g.sdpa(q, k, v, heads)?;
            attn_nodes.push(attn);
            let (ow, ob) = (g.param(params, blk.attn_out_w), g.param(params, blk.attn_out_b));
            let attn_out = g.linear(attn, ow, ob)?;
            let gated = g.mul(attn_out, gate1)?;
            tokens = g.add(tokens, gated)?;

            // mlp sublayer
            let normed = g.layer_norm(tokens, 1e-5)?;
            let scale2p = g.add_scalar(scale2, 1.0);
            let modded = g.mul(normed, scale2p)?;
            let modded = g.add(modded, shift2)?;
            let (w1, b1) = (g.param(params, blk.mlp_w1), g.param(params, blk.mlp_b1));
            let h = g.linear(modded, w1, b1)?;
            let h = g.gelu(h);
            let (w2, b2) = (g.param(params, blk.mlp_w2), g.param(params, blk.mlp_b2));
            let mlp_out = g.linear(h, w2, b2)?;
            let gated = g.mul(mlp_out, gate2)?;
            tokens = g.add(tokens, gated)?;
        }

        let (fw, fb) = (g.param(params, self.ids.final_mod_w), g.param(params, self.ids.final_mod_b));
        let final_mod = g.linear(cvec_act, fw, fb)?;
        let shift = g.slice(final_mod, 1, 0, e)?;
        let scale = g.slice(final_mod, 1, e, e)?;
        let shift = g.reshape(shift, vec![batch, 1, e])?;
        let scale = g.reshape(scale, vec![batch, 1, e])?;
        let normed = g.layer_norm(tokens, 1e-5)?;
        let scalep = g.add_scalar(scale, 1.0);
        let modded = g.mul(normed, scalep)?;
        let modded = g.add(modded, shift)?;
        let (ow, ob) = (g.param(params, self.ids.out_w), g.param(params, self.ids.out_b));
        let out = g.linear(modded, ow, ob)?;
        Ok((out, attn_nodes))
    }

    /// Analytic parameter count of one transformer block for this width.
    pub fn block_param_count(hidden: usize) -> usize {
        let e = hidden;
        (e * 6 * e + 6 * e)           // adaLN modulation
            + (e * 3 * e + 3 * e)     // qkv projection
            + (e * e + e)             // attention output
            + (e * MLP_RATIO * e + MLP_RATIO * e) // mlp in
            + (MLP_RATIO * e * e + e) // mlp out
    }
}

impl Denoiser for DiT1d {
    fn forward_with(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        x: Var,
        t: &[usize],
        cond: Cond,
    ) -> Result<Var> {
        self.forward_attention_with(params, g, x, t, cond).map(|(out, _)| out)
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
