//! Configuration, the training/execution driver, the ablation sweep runner
//! and the result/attention emitters.

mod attention;
mod evalrun;
mod sweep;
mod train;

pub use attention::{dump_attention, AttentionDump, AttentionEntry};
pub use evalrun::{append_results, read_results, run_eval, ResultRow, RESULTS_VERSION};
pub use sweep::{run_sweep, summarize, SweepAxis, SweepOutcome, SweepSummaryRow};
pub use train::{run_train, BundlePaths, TrainReport, TrainedBundle};

use crate::dataset::ReturnMode;
use crate::diffusion::{ScheduleKind, Solver};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceAlgo, GuidanceSpec};
use crate::nets::{Backbone, CriticBody, InvDynBody, PredictTarget};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Full experiment configuration, one TOML file per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub env: EnvSpec,
    pub dataset: DatasetConfig,
    pub planner: PlannerConfig,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub invdyn: InvDynConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub expert_frac: f64,
    pub noisy_frac: f64,
    pub random_frac: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_return_mode")]
    pub return_mode: ReturnMode,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub normalize_states: bool,
    /// Load a pre-generated dataset file instead of generating one.
    #[serde(default)]
    pub path: Option<std::path::PathBuf>,
}

fn default_return_mode() -> ReturnMode {
    ReturnMode::IqlMaze
}

fn default_gamma() -> f64 {
    0.997
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    /// Plan states, produce actions with inverse dynamics.
    Separate,
    /// Plan state-action rows, execute the generated action directly.
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_channel_mult")]
    pub channel_mult: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_predict")]
    pub predict: PredictTarget,
    /// Planning horizon H (tokens per plan).
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Planning stride M (environment steps per plan token).
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_action_mode")]
    pub action_mode: ActionMode,
}

fn default_backbone() -> Backbone {
    Backbone::Dit1d
}
fn default_hidden() -> usize {
    64
}
fn default_blocks() -> usize {
    2
}
fn default_head_dim() -> usize {
    32
}
fn default_base_channels() -> usize {
    16
}
fn default_channel_mult() -> Vec<usize> {
    vec![1, 2, 2, 2]
}
fn default_kernel() -> usize {
    5
}
fn default_predict() -> PredictTarget {
    PredictTarget::Noise
}
fn default_horizon() -> usize {
    32
}
fn default_stride() -> usize {
    1
}
fn default_action_mode() -> ActionMode {
    ActionMode::Separate
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub solver: Solver,
    /// Inference steps for the planner.
    pub steps: usize,
    pub temperature: f64,
    pub schedule: ScheduleKind,
    /// Training timestep count T.
    pub train_timesteps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Ddim,
            steps: 20,
            temperature: 1.0,
            schedule: ScheduleKind::Linear,
            train_timesteps: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub body: CriticBody,
    pub hidden: usize,
    pub blocks: usize,
    pub head_dim: usize,
    pub base_channels: usize,
    pub train_steps: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            body: CriticBody::Transformer,
            hidden: 64,
            blocks: 2,
            head_dim: 32,
            base_channels: 16,
            train_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvDynConfig {
    pub body: InvDynBody,
    pub hidden: usize,
    /// Feed `(0, s_next - s)` instead of `(s, s_next)`. Defaults to true on
    /// navigation (point-maze) environments.
    pub centralize: Option<bool>,
    /// Diffusion body: training timesteps (= DDPM sampling steps).
    pub timesteps: usize,
    pub temperature: f64,
    pub train_steps: usize,
}

impl Default for InvDynConfig {
    fn default() -> Self {
        Self {
            body: InvDynBody::Diffusion,
            hidden: 128,
            centralize: None,
            timesteps: 10,
            temperature: 0.5,
            train_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Print a loss line every this many steps (0 = silent).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 50_000, batch: 128, lr: 3e-4, log_every: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub replan_every: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, replan_every: 1, seed: 0 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// All choice-set and cross-field checks; rejected configs never reach
    /// training.
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.planner.horizon < 2 {
            return Err(Error::InvalidConfig("planner horizon must be >= 2".into()));
        }
        if self.planner.stride < 1 {
            return Err(Error::InvalidConfig("planner stride must be >= 1".into()));
        }
        if self.planner.kernel % 2 == 0 {
            return Err(Error::InvalidConfig("conv kernel must be odd".into()));
        }
        if self.planner.hidden % self.planner.head_dim != 0 {
            return Err(Error::InvalidConfig(
                "planner hidden must be a multiple of head_dim".into(),
            ));
        }
        if self.planner.backbone == Backbone::Unet1d {
            let factor = 1usize << (self.planner.channel_mult.len() - 1);
            if self.planner.horizon % factor != 0 {
                return Err(Error::InvalidConfig(format!(
                    "U-Net planner needs horizon divisible by {factor}, got {}",
                    self.planner.horizon
                )));
            }
        }
        if self.sampler.train_timesteps < 2 {
            return Err(Error::InvalidConfig("train_timesteps must be >= 2".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.sampler.train_timesteps {
            return Err(Error::InvalidConfig(format!(
                "sampler steps {} must be in [1, {}]",
                self.sampler.steps, self.sampler.train_timesteps
            )));
        }
        let frac_sum =
            self.dataset.expert_frac + self.dataset.noisy_frac + self.dataset.random_frac;
        if (frac_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "dataset mix fractions sum to {frac_sum}, expected 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.dataset.gamma) || self.dataset.gamma == 0.0 {
            return Err(Error::InvalidConfig("gamma must lie in (0, 1]".into()));
        }
        if self.train.batch == 0 || self.train.steps == 0 {
            return Err(Error::InvalidConfig("train.steps and train.batch must be >= 1".into()));
        }
        if self.eval.replan_every == 0 || self.eval.replan_every > self.planner.stride.max(1) {
            return Err(Error::InvalidConfig(format!(
                "replan_every must lie in [1, stride = {}]",
                self.planner.stride
            )));
        }
        Ok(())
    }

    /// The critic trains on noised inputs exactly when classifier guidance
    /// will differentiate it at noised samples.
    pub fn critic_noised(&self) -> bool {
        self.guidance.algo == GuidanceAlgo::Cg
    }

    pub fn needs_critic(&self) -> bool {
        matches!(self.guidance.algo, GuidanceAlgo::Cg | GuidanceAlgo::Mcss)
    }

    pub fn needs_invdyn(&self) -> bool {
        self.planner.action_mode == ActionMode::Separate
    }

    /// Planner condition width: CFG conditions on the normalized return.
    pub fn planner_cond_dim(&self) -> usize {
        if self.guidance.algo == GuidanceAlgo::Cfg {
            1
        } else {
            0
        }
    }

    pub fn invdyn_centralize(&self) -> bool {
        self.invdyn.centralize.unwrap_or(matches!(self.env, EnvSpec::PointMaze { .. }))
    }

    /// Stable content hash: canonical JSON of the parsed config (field order
    /// is fixed by the struct, so reordering keys in the file cannot change
    /// the hash).
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests;
