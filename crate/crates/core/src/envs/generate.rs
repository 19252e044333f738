use super::{PointMazeEnv, RewardMode, StageTaskEnv, ToyEnv};
use crate::dataset::{
    DatasetMeta, EpisodeRecord, OfflineDataset, PolicyMix, ReturnMode, ScoreReference,
};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Standard deviation of the Gaussian action noise of the "noisy" policy.
pub const NOISY_SIGMA: f64 = 0.3;
/// Episode count per reference policy when anchoring normalized scores.
pub const SCORE_REF_EPISODES: usize = 200;

/// Everything needed to rebuild a dataset from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub env: EnvSpec,
    pub mix: PolicyMix,
    pub episodes: usize,
    pub seed: u64,
    pub return_mode: ReturnMode,
    pub gamma: f64,
    pub normalize_states: bool,
}

/// Declarative environment choice (mirrors the config file section).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    PointMaze {
        layout: super::MazeName,
        #[serde(default = "default_reward")]
        reward: RewardMode,
        #[serde(default)]
        max_steps: Option<usize>,
    },
    StageTask {
        #[serde(default = "default_stages")]
        stages: usize,
        #[serde(default)]
        max_steps: Option<usize>,
    },
}

fn default_reward() -> RewardMode {
    RewardMode::Sparse
}

fn default_stages() -> usize {
    4
}

impl EnvSpec {
    pub fn build(&self) -> ToyEnv {
        match self {
            EnvSpec::PointMaze { layout, reward, max_steps } => {
                let steps = max_steps.unwrap_or_else(|| PointMazeEnv::default_max_steps(*layout));
                ToyEnv::PointMaze(PointMazeEnv::new(*layout, *reward, steps))
            }
            EnvSpec::StageTask { stages, max_steps } => {
                ToyEnv::StageTask(StageTaskEnv::new(*stages, max_steps.unwrap_or(200)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PolicyTag {
    Expert,
    Noisy,
    Random,
}

/// Roll one full episode with a scripted policy; rng drives reset, policy
/// noise and random actions.
fn roll_episode(env: &mut ToyEnv, tag: PolicyTag, rng: &mut ChaCha8Rng) -> EpisodeRecord {
    let mut states = env.reset(rng);
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let terminated;
    let truncated;
    loop {
        let action = match tag {
            PolicyTag::Expert => env.expert_action(0.0, rng),
            PolicyTag::Noisy => env.expert_action(NOISY_SIGMA, rng),
            PolicyTag::Random => (0..env.action_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let out = env.step(&action);
        actions.extend_from_slice(&action);
        rewards.push(out.reward);
        if out.done() {
            terminated = out.terminated;
            truncated = out.truncated;
            break;
        }
        states.extend_from_slice(&out.state);
    }
    // states recorded per decision point; the final post-step state is dropped
    EpisodeRecord { states, actions, rewards, terminated, truncated }
}

/// Mean return of a scripted policy over `episodes` fresh episodes.
fn mean_return(env_template: &ToyEnv, tag: PolicyTag, episodes: usize, seed: u64) -> f64 {
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ep as u64 + 1);
        let mut env = env_template.clone();
        let record = roll_episode(&mut env, tag, &mut rng);
        total += record.rewards.iter().sum::<f64>();
    }
    total / episodes as f64
}

/// Empirical expert/random anchors for normalized scoring.
pub fn measure_score_reference(env_template: &ToyEnv, seed: u64) -> ScoreReference {
    ScoreReference {
        random_mean: mean_return(env_template, PolicyTag::Random, SCORE_REF_EPISODES, seed ^ 0x5c04e_4a0d),
        expert_mean: mean_return(env_template, PolicyTag::Expert, SCORE_REF_EPISODES, seed ^ 0x5c04e_e417),
    }
}

/// Generate an offline dataset with the requested policy mix. Fully
/// deterministic in (spec, seed): per-episode rng streams, fixed policy
/// allocation, shuffled with the dataset seed.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<OfflineDataset> {
    if spec.episodes == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one episode".into()));
    }
    let mix = spec.mix;
    PolicyMix::new(mix.expert, mix.noisy, mix.random)?;
    let env_template = spec.env.build();

    // fixed counts per policy, remainder to random
    let n = spec.episodes;
    let n_expert = (mix.expert * n as f64).round() as usize;
    let n_noisy = ((mix.noisy * n as f64).round() as usize).min(n - n_expert);
    let mut tags = Vec::with_capacity(n);
    tags.extend(std::iter::repeat(PolicyTag::Expert).take(n_expert));
    tags.extend(std::iter::repeat(PolicyTag::Noisy).take(n_noisy));
    tags.extend(std::iter::repeat(PolicyTag::Random).take(n - n_expert - n_noisy));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..tags.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        tags.swap(i, j);
    }

    let mut episodes = Vec::with_capacity(n);
    for (i, tag) in tags.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let mut env = env_template.clone();
        episodes.push(roll_episode(&mut env, *tag, &mut rng));
    }

    let score_ref = measure_score_reference(&env_template, spec.seed);
    let meta = DatasetMeta {
        env_id: env_template.env_id(),
        state_dim: env_template.state_dim(),
        action_dim: env_template.action_dim(),
        episode_count: episodes.len(),
        mix,
        seed: spec.seed,
        return_mode: spec.return_mode,
        gamma: spec.gamma,
        score_ref: Some(score_ref),
        format_version: crate::dataset::io::FORMAT_VERSION,
    };
    OfflineDataset::build(episodes, meta, spec.normalize_states)
}
