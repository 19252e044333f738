use super::{broadcast_ts, cond_embedding, sinusoidal_embedding, Cond, Denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use rand::Rng;

/// Temporal 1-D U-Net over `[B, H, D]` trajectories. Residual conv blocks
/// (kernel `spec.kernel`, same padding, group norm, Mish) with FiLM-style
/// scale/shift injection of the timestep embedding, average-pool downsampling
/// and nearest-neighbor upsampling with skip concatenation.
pub struct UNet1d {
    spec: DenoiserSpec,
    horizon: usize,
    data_dim: usize,
    params: ParamStore,
    ids: Ids,
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

struct ResBlockIds {
    conv1: ConvIds,
    conv2: ConvIds,
    film_w: ParamId,
    film_b: ParamId,
    skip: Option<ConvIds>,
    groups: usize,
}

struct Ids {
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    cond: Option<(ParamId, ParamId, ParamId)>,
    conv_in: ConvIds,
    down: Vec<[ResBlockIds; 2]>,
    mid: [ResBlockIds; 2],
    up: Vec<[ResBlockIds; 2]>,
    final_conv: ConvIds,
    final_groups: usize,
    out_proj: ConvIds,
}

fn norm_groups(channels: usize) -> usize {
    // at least 4 channels per group keeps the normalization well conditioned
    // at desk-scale widths; 8 groups from 32 channels up
    let cap = (channels / 4).clamp(1, 8);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl UNet1d {
    pub fn new<R: Rng>(
        spec: DenoiserSpec,
        horizon: usize,
        data_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let stages = spec.channel_mult.len();
        let factor = 1usize << (stages - 1);
        if horizon % factor != 0 || horizon == 0 {
            return Err(Error::InvalidConfig(format!(
                "U-Net with {} stages needs the horizon to be a positive multiple of {}, got {}",
                stages, factor, horizon
            )));
        }
        let channels: Vec<usize> =
            spec.channel_mult.iter().map(|m| m * spec.base_channels).collect();
        let time_dim = 4 * spec.base_channels;
        let mut params = ParamStore::new();
        let k = spec.kernel;

        let time_w1 =
            params.add_kaiming("time.w1", &[spec.base_channels, time_dim], spec.base_channels, rng);
        let time_b1 = params.add_zeros("time.b1", &[time_dim]);
        let time_w2 = params.add_kaiming("time.w2", &[time_dim, time_dim], time_dim, rng);
        let time_b2 = params.add_zeros("time.b2", &[time_dim]);
        let cond = if spec.cond_dim > 0 {
            let w = params.add_kaiming("cond.w", &[spec.cond_dim, time_dim], spec.cond_dim, rng);
            let b = params.add_zeros("cond.b", &[time_dim]);
            let null = params.add_kaiming("cond.null", &[1, time_dim], time_dim, rng);
            Some((w, b, null))
        } else {
            None
        };

        let conv = |params: &mut ParamStore, name: &str, cin: usize, cout: usize, kk: usize, rng: &mut R| ConvIds {
            w: params.add_kaiming(name, &[cout, cin, kk], cin * kk, rng),
            b: params.add_zeros(&format!("{name}.bias"), &[cout]),
        };
        let res = |params: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R| ResBlockIds {
            conv1: ConvIds {
                w: params.add_kaiming(&format!("{name}.conv1.w"), &[cout, cin, k], cin * k, rng),
                b: params.add_zeros(&format!("{name}.conv1.b"), &[cout]),
            },
            conv2: ConvIds {
                w: params.add_kaiming(&format!("{name}.conv2.w"), &[cout, cout, k], cout * k, rng),
                b: params.add_zeros(&format!("{name}.conv2.b"), &[cout]),
            },
            film_w: params.add_kaiming(&format!("{name}.film.w"), &[time_dim, 2 * cout], time_dim, rng),
            film_b: params.add_zeros(&format!("{name}.film.b"), &[2 * cout]),
            skip: (cin != cout).then(|| ConvIds {
                w: params.add_kaiming(&format!("{name}.skip.w"), &[cout, cin, 1], cin, rng),
                b: params.add_zeros(&format!("{name}.skip.b"), &[cout]),
            }),
            groups: norm_groups(cout),
        };

        let conv_in = conv(&mut params, "conv_in", data_dim, channels[0], k, rng);
        let mut down = Vec::new();
        for i in 0..stages {
            let cin = if i == 0 { channels[0] } else { channels[i - 1] };
            down.push([
                res(&mut params, &format!("down.{i}.0"), cin, channels[i], rng),
                res(&mut params, &format!("down.{i}.1"), channels[i], channels[i], rng),
            ]);
        }
        let c_last = *channels.last().unwrap();
        let mid = [
            res(&mut params, "mid.0", c_last, c_last, rng),
            res(&mut params, "mid.1", c_last, c_last, rng),
        ];
        let mut up = Vec::new();
        for i in (0..stages - 1).rev() {
            let cin = channels[i + 1] + channels[i]; // upsampled features + skip
            up.push([
                res(&mut params, &format!("up.{i}.0"), cin, channels[i], rng),
                res(&mut params, &format!("up.{i}.1"), channels[i], channels[i], rng),
            ]);
        }
        let final_conv = conv(&mut params, "final.conv", channels[0], channels[0], k, rng);
        // zero-init projection: the untrained model predicts zeros
        let out_proj = ConvIds {
            w: params.add_zeros("final.proj.w", &[data_dim, channels[0], 1]),
            b: params.add_zeros("final.proj.b", &[data_dim]),
        };
        Ok(Self {
            spec,
            horizon,
            data_dim,
            params,
            ids: Ids {
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                cond,
                conv_in,
                down,
                mid,
                up,
                final_conv,
                final_groups: norm_groups(channels[0]),
                out_proj,
            },
        })
    }

    fn res_block(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        x: Var,
        temb: Var,
        ids: &ResBlockIds,
    ) -> Result<Var> {
        let (w1, b1) = (g.param(params, ids.conv1.w), g.param(params, ids.conv1.b));
        let mut h = g.conv1d(x, w1, b1)?;
        h = g.group_norm(h, ids.groups, 1e-5)?;
        h = g.mish(h);
        // FiLM: channelwise (1 + scale) * h + shift from the time embedding
        let (fw, fb) = (g.param(params, ids.film_w), g.param(params, ids.film_b));
        let film = g.linear(temb, fw, fb)?;
        let c = g.value(h).shape()[2];
        let batch = g.value(h).shape()[0];
        let scale = g.slice(film, 1, 0, c)?;
        let shift = g.slice(film, 1, c, c)?;
        let scale = g.reshape(scale, vec![batch, 1, c])?;
        let shift = g.reshape(shift, vec![batch, 1, c])?;
        let scale1 = g.add_scalar(scale, 1.0);
        h = g.mul(h, scale1)?;
        h = g.add(h, shift)?;
        let (w2, b2) = (g.param(params, ids.conv2.w), g.param(params, ids.conv2.b));
        h = g.conv1d(h, w2, b2)?;
        h = g.group_norm(h, ids.groups, 1e-5)?;
        h = g.mish(h);
        let skip = match &ids.skip {
            Some(sc) => {
                let (sw, sb) = (g.param(params, sc.w), g.param(params, sc.b));
                g.conv1d(x, sw, sb)?
            }
            None => x,
        };
        g.add(h, skip)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    /// Parameter count of the convolution stacks only (kernels + biases),
    /// excluding time/condition embedding and FiLM projections.
    pub fn conv_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, name, _)| name.contains("conv") || name.contains("skip") || name.contains("proj"))
            .map(|(_, _, t)| t.numel())
            .sum()
    }
}

impl Denoiser for UNet1d {
    fn forward_with(
        &self,
        params: &ParamStore,
        g: &mut Graph,
        x: Var,
        t: &[usize],
        cond: Cond,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.horizon || shape[2] != self.data_dim {
            return Err(Error::ShapeMismatch(format!(
                "unet expects [B, {}, {}], got {:?}",
                self.horizon, self.data_dim, shape
            )));
        }
        let batch = shape[0];
        let ts = broadcast_ts(t, batch)?;

        let temb_in = g.constant(sinusoidal_embedding(&ts, self.spec.base_channels));
        let (w1, b1) = (g.param(params, self.ids.time_w1), g.param(params, self.ids.time_b1));
        let h = g.linear(temb_in, w1, b1)?;
        let h = g.mish(h);
        let (w2, b2) = (g.param(params, self.ids.time_w2), g.param(params, self.ids.time_b2));
        let mut temb = g.linear(h, w2, b2)?;

        match (cond, &self.ids.cond) {
            (Cond::None, None) => {}
            (Cond::Batch { values, keep }, Some((cw, cb, cnull))) => {
                let c = cond_embedding(g, params, *cw, *cb, *cnull, values, keep)?;
                temb = g.add(temb, c)?;
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

        let (cw, cb) = (g.param(params, self.ids.conv_in.w), g.param(params, self.ids.conv_in.b));
        let mut h = g.conv1d(x, cw, cb)?;
        let stages = self.ids.down.len();
        let mut skips = Vec::new();
        for (i, blocks) in self.ids.down.iter().enumerate() {
            h = self.res_block(params, g, h, temb, &blocks[0])?;
            h = self.res_block(params, g, h, temb, &blocks[1])?;
            if i < stages - 1 {
                skips.push(h);
                h = g.avg_pool2(h)?;
            }
        }
        h = self.res_block(params, g, h, temb, &self.ids.mid[0])?;
        h = self.res_block(params, g, h, temb, &self.ids.mid[1])?;
        for blocks in &self.ids.up {
            h = g.upsample2(h)?;
            let skip = skips.pop().expect("skip stack underflow");
            h = g.concat(&[h, skip], 2)?;
            h = self.res_block(params, g, h, temb, &blocks[0])?;
            h = self.res_block(params, g, h, temb, &blocks[1])?;
        }
        let (fw, fb) = (g.param(params, self.ids.final_conv.w), g.param(params, self.ids.final_conv.b));
        h = g.conv1d(h, fw, fb)?;
        h = g.group_norm(h, self.ids.final_groups, 1e-5)?;
        h = g.mish(h);
        let (ow, ob) = (g.param(params, self.ids.out_proj.w), g.param(params, self.ids.out_proj.b));
        g.conv1d(h, ow, ob)
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
