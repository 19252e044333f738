use super::train::TrainedBundle;
use crate::diffusion::{sample, Inpaint, NoisePredictor};
use crate::error::{Error, Result};
use crate::guidance::PlannerPredictor;
use crate::nets::{Cond, DiT1d, Denoiser};
use crate::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::io::Write;
use std::path::Path;

/// Head-averaged attention matrices captured while sampling one plan.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub horizon: usize,
    pub layers: usize,
    pub env_id: String,
    pub stride: usize,
    pub checkpoint: String,
    pub entries: Vec<AttentionEntry>,
}

/// One `[H, H]` head-averaged attention matrix.
#[derive(Debug, Clone)]
pub struct AttentionEntry {
    pub layer: usize,
    /// Index into the sampler's step sequence (0 = most noised).
    pub step_index: usize,
    /// Underlying schedule timestep.
    pub t: usize,
    pub weights: Tensor,
}

impl AttentionEntry {
    /// Mean attention mass at offsets strictly beyond `cutoff`.
    pub fn long_range_mass(&self, cutoff: usize) -> f64 {
        let h = self.weights.shape()[0];
        let mut mass = 0.0;
        for i in 0..h {
            for j in 0..h {
                if i.abs_diff(j) > cutoff {
                    mass += self.weights.data()[i * h + j];
                }
            }
        }
        mass / h as f64
    }
}

impl AttentionDump {
    /// Every matrix must be row-stochastic.
    pub fn rows_are_distributions(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| {
            let h = e.weights.shape()[0];
            (0..h).all(|i| {
                let s: f64 = e.weights.row(i).iter().sum();
                (s - 1.0).abs() < tol && e.weights.row(i).iter().all(|&v| (0.0..=1.0 + tol).contains(&v))
            })
        })
    }

    pub fn mean_long_range_mass(&self, cutoff: usize) -> f64 {
        let n = self.entries.len().max(1);
        self.entries.iter().map(|e| e.long_range_mass(cutoff)).sum::<f64>() / n as f64
    }

    /// Write one CSV per (layer, step) plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for e in &self.entries {
            let name = format!("attention_layer{}_step{:03}.csv", e.layer, e.step_index);
            let path = dir.join(&name);
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            let h = e.weights.shape()[0];
            for i in 0..h {
                let row: Vec<String> = e.weights.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(f, "{}", row.join(","))?;
            }
            files.push(path);
        }
        let manifest = serde_json::json!({
            "horizon": self.horizon,
            "stride": self.stride,
            "task": self.env_id,
            "checkpoint": self.checkpoint,
            "layers": self.layers,
            "steps": self.entries.iter().map(|e| e.step_index).collect::<std::collections::BTreeSet<_>>(),
            "files": files.iter().map(|p| p.file_name().unwrap().to_string_lossy().to_string()).collect::<Vec<_>>(),
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(files)
    }
}

/// Predictor wrapper that records head-averaged attention at chosen
/// timesteps while the sampler runs.
struct CapturingPredictor<'a> {
    dit: &'a DiT1d,
    base: PlannerPredictor<'a>,
    capture_ts: Vec<usize>,
    captured: RefCell<Vec<(usize, Vec<Tensor>)>>,
}

impl NoisePredictor for CapturingPredictor<'_> {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        if self.capture_ts.contains(&t) {
            let mut g = Graph::new();
            let xv = g.constant(x_t.clone());
            // condition-capable models are read through the null path
            let cond_dim = self.dit.spec().cond_dim;
            let null_values = Tensor::zeros(&[x_t.shape()[0], cond_dim.max(1)]);
            let keep = vec![false; x_t.shape()[0]];
            let cond = if cond_dim == 0 {
                Cond::None
            } else {
                Cond::Batch { values: &null_values, keep: &keep }
            };
            let (_, attn_nodes) = self.dit.forward_with_attention(&mut g, xv, &[t], cond)?;
            let mut mats = Vec::with_capacity(attn_nodes.len());
            for node in attn_nodes {
                let probs = g
                    .attention_probs(node)
                    .ok_or_else(|| Error::Contract("attention probs missing".into()))?;
                mats.push(head_average(&probs)?);
            }
            self.captured.borrow_mut().push((t, mats));
        }
        self.base.predict_noise(x_t, t)
    }
}

/// Average `[B, heads, L, L]` over batch and heads into `[L, L]`.
fn head_average(probs: &Tensor) -> Result<Tensor> {
    let s = probs.shape();
    let (b, heads, l) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; l * l];
    for bi in 0..b {
        for h in 0..heads {
            let base = ((bi * heads) + h) * l * l;
            for (o, v) in out.iter_mut().zip(&probs.data()[base..base + l * l]) {
                *o += v;
            }
        }
    }
    let inv = 1.0 / (b * heads) as f64;
    for v in &mut out {
        *v *= inv;
    }
    Tensor::from_vec(vec![l, l], out)
}

/// Sample one plan from a transformer bundle, recording the first-layer
/// (or all-layer) attention at the requested sampler steps.
pub fn dump_attention(
    bundle: &TrainedBundle,
    step_indices: &[usize],
    all_layers: bool,
    seed: u64,
) -> Result<AttentionDump> {
    let dit = bundle.planner.as_dit().ok_or_else(|| {
        Error::Contract("attention dumps need a transformer planner backbone".into())
    })?;
    let sampler = bundle.sampler_spec();
    if let Some(&bad) = step_indices.iter().find(|&&s| s >= sampler.steps) {
        return Err(Error::Contract(format!(
            "denoise step {bad} out of range (sampler runs {} steps)",
            sampler.steps
        )));
    }
    // map sampler step indices (0 = most noised end of the run) to timesteps
    let t_of_index = crate::diffusion::time_subsequence(bundle.schedule.timesteps, sampler.steps);
    let capture_ts: Vec<usize> =
        step_indices.iter().map(|&i| t_of_index[sampler.steps - 1 - i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = bundle.env_template();
    let state = env.reset(&mut rng);
    let norm_state = bundle.state_norm.normalize(&state);
    let width = bundle.plan_width();
    let horizon = bundle.config.planner.horizon;
    let inpaint = Inpaint::first_row(horizon, width, norm_state.len(), &norm_state)?;

    let predictor = CapturingPredictor {
        dit,
        base: PlannerPredictor::unconditional(&bundle.planner, &bundle.schedule),
        capture_ts,
        captured: RefCell::new(Vec::new()),
    };
    sample(
        &predictor,
        &bundle.schedule,
        &sampler,
        &[1, horizon, width],
        Some(&inpaint),
        &mut rng,
    )?;

    let captured = predictor.captured.into_inner();
    let mut entries = Vec::new();
    for (t, mats) in captured {
        let step_index = sampler.steps
            - 1
            - t_of_index.iter().position(|&tt| tt == t).expect("captured t in sequence");
        for (layer, weights) in mats.into_iter().enumerate() {
            if !all_layers && layer != 0 {
                continue;
            }
            entries.push(AttentionEntry { layer, step_index, t, weights });
        }
    }
    entries.sort_by_key(|e| (e.layer, e.step_index));
    Ok(AttentionDump {
        horizon,
        layers: if all_layers { dit.num_blocks() } else { 1 },
        env_id: bundle.env_id.clone(),
        stride: bundle.config.planner.stride,
        checkpoint: format!("{}/seed{}", bundle.config.config_hash(), bundle.seed),
        entries,
    })
}
