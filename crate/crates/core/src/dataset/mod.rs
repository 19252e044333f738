//! Offline-dataset ingestion: per-step return computation (with optional
//! navigation shaping), min-max normalization, jump-step segment
//! construction and inverse-dynamics pair extraction.

pub mod io;
mod normalize;
mod segments;

pub use io::{export_csv, load_dataset, save_dataset};
pub use normalize::{MinMaxNormalizer, ReturnNormalizer};
pub use segments::{build_segments, SegmentHandle, SegmentSet};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Episodes longer than this are truncated before segmentation.
pub const EPISODE_CLIP: usize = 1000;

/// One recorded episode (raw, unnormalized).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// Row-major `[len, state_dim]`.
    pub states: Vec<f64>,
    /// Row-major `[len, action_dim]`.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, i: usize, state_dim: usize) -> &[f64] {
        &self.states[i * state_dim..(i + 1) * state_dim]
    }

    pub fn action(&self, i: usize, action_dim: usize) -> &[f64] {
        &self.actions[i * action_dim..(i + 1) * action_dim]
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let l = self.rewards.len();
        if self.states.len() != l * state_dim || self.actions.len() != l * action_dim {
            return Err(Error::Dataset(format!(
                "episode blocks disagree: {} states, {} actions, {} rewards (dims {}/{})",
                self.states.len(),
                self.actions.len(),
                l,
                state_dim,
                action_dim
            )));
        }
        if self.terminated && self.truncated {
            return Err(Error::Dataset("episode both terminated and truncated".into()));
        }
        Ok(())
    }
}

/// Temporal credit assignment mode for return targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnMode {
    /// Plain discounted return of the raw rewards.
    Discount,
    /// Navigation shaping: a -1 penalty is applied to every step's reward
    /// before discounting.
    IqlMaze,
}

/// Discounted return-to-go at every step of one episode.
pub fn compute_returns(episode: &EpisodeRecord, mode: ReturnMode, gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) || gamma <= 0.0 {
        return Err(Error::Contract(format!("discount factor {gamma} outside (0, 1]")));
    }
    if episode.rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Contract("non-finite reward".into()));
    }
    let shaped = |r: f64| match mode {
        ReturnMode::Discount => r,
        ReturnMode::IqlMaze => r - 1.0,
    };
    let mut out = vec![0.0; episode.len()];
    let mut acc = 0.0;
    for t in (0..episode.len()).rev() {
        acc = shaped(episode.rewards[t]) + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Generator policy mix recorded in dataset metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyMix {
    pub expert: f64,
    pub noisy: f64,
    pub random: f64,
}

impl PolicyMix {
    pub fn new(expert: f64, noisy: f64, random: f64) -> Result<Self> {
        let sum = expert + noisy + random;
        if (sum - 1.0).abs() > 1e-9 || expert < 0.0 || noisy < 0.0 || random < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "policy mix ({expert}, {noisy}, {random}) must be nonnegative and sum to 1"
            )));
        }
        Ok(Self { expert, noisy, random })
    }
}

/// Empirical normalization anchors: mean return of the scripted expert and
/// of the uniform-random policy, measured at dataset-build time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReference {
    pub random_mean: f64,
    pub expert_mean: f64,
}

impl ScoreReference {
    /// `100 * (ret - random) / (expert - random)`.
    pub fn normalized_score(&self, mean_return: f64) -> f64 {
        100.0 * (mean_return - self.random_mean) / (self.expert_mean - self.random_mean)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episode_count: usize,
    pub mix: PolicyMix,
    pub seed: u64,
    pub return_mode: ReturnMode,
    pub gamma: f64,
    pub score_ref: Option<ScoreReference>,
    pub format_version: u32,
}

/// The assembled offline dataset: raw episodes plus everything derived from
/// them (per-step returns, fitted normalizers). Immutable once built.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    pub episodes: Vec<EpisodeRecord>,
    pub returns: Vec<Vec<f64>>,
    pub state_norm: MinMaxNormalizer,
    pub action_norm: MinMaxNormalizer,
    pub return_norm: ReturnNormalizer,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    /// Compute returns and fit all normalizers. `normalize_states = false`
    /// swaps in identity state/action maps (the return map always applies:
    /// guidance targets are defined on [-1, 1]).
    pub fn build(
        episodes: Vec<EpisodeRecord>,
        meta: DatasetMeta,
        normalize_states: bool,
    ) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Dataset("dataset has no episodes".into()));
        }
        for ep in &episodes {
            ep.validate(meta.state_dim, meta.action_dim)?;
        }
        let returns: Vec<Vec<f64>> = episodes
            .iter()
            .map(|ep| compute_returns(ep, meta.return_mode, meta.gamma))
            .collect::<Result<_>>()?;
        let (state_norm, action_norm) = if normalize_states {
            (
                MinMaxNormalizer::fit(
                    episodes.iter().flat_map(|ep| ep.states.chunks(meta.state_dim)),
                    meta.state_dim,
                ),
                MinMaxNormalizer::fit(
                    episodes.iter().flat_map(|ep| ep.actions.chunks(meta.action_dim)),
                    meta.action_dim,
                ),
            )
        } else {
            (
                MinMaxNormalizer::identity(meta.state_dim),
                MinMaxNormalizer::identity(meta.action_dim),
            )
        };
        let return_norm = ReturnNormalizer::fit(returns.iter().flatten().copied());
        if return_norm.is_degenerate() {
            eprintln!("warning: all returns equal; normalized return targets collapse to 0");
        }
        Ok(Self { episodes, returns, state_norm, action_norm, return_norm, meta })
    }

    /// Episode length after the pre-segmentation clip.
    pub fn clipped_len(&self, episode: usize) -> usize {
        self.episodes[episode].len().min(EPISODE_CLIP)
    }

    /// Normalized state row.
    pub fn norm_state(&self, episode: usize, step: usize) -> Vec<f64> {
        self.state_norm
            .normalize(self.episodes[episode].state(step, self.meta.state_dim))
    }

    /// Normalized action row.
    pub fn norm_action(&self, episode: usize, step: usize) -> Vec<f64> {
        self.action_norm
            .normalize(self.episodes[episode].action(step, self.meta.action_dim))
    }

    /// Normalized return target at a step.
    pub fn norm_return(&self, episode: usize, step: usize) -> f64 {
        self.return_norm.normalize(self.returns[episode][step])
    }

    /// Inverse-dynamics training pairs at stride `m`: normalized
    /// `(s_t, s_{t+m}) -> a_t`, never crossing an episode boundary.
    pub fn invdyn_pairs(&self, m: usize, centralize: bool) -> Vec<(Vec<f64>, Vec<f64>)> {
        assert!(m >= 1, "stride must be >= 1");
        let mut out = Vec::new();
        for (ei, _) in self.episodes.iter().enumerate() {
            let len = self.clipped_len(ei);
            for t in 0..len.saturating_sub(m) {
                let s = self.norm_state(ei, t);
                let s_next = self.norm_state(ei, t + m);
                let input = crate::nets::invdyn::pair_input(&s, &s_next, centralize);
                out.push((input, self.norm_action(ei, t)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
