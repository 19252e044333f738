//! Built-in continuous-control toy environments with scripted behavior
//! policies, offline dataset generation with a controllable optimality mix,
//! and the online evaluation loop.

mod eval;
mod generate;
mod pointmaze;
mod stagetask;

pub use eval::{
    evaluate_policy, joint_execute, EvalOptions, EvalStats, ExpertReplaySource, GuidedPlanner,
    PlanSource, PlannerParts, PolicyBundle, RandomPlanSource,
};
pub use generate::{generate_dataset, measure_score_reference, EnvSpec, GeneratorSpec};
pub use pointmaze::{MazeLayout, MazeName, PointMazeEnv};
pub use stagetask::StageTaskEnv;

pub use crate::dataset::ScoreReference;

use serde::{Deserialize, Serialize};

/// Integration step for both environments (semi-implicit Euler:
/// `v += a * dt` then `p += v * dt`).
pub const DT: f64 = 0.1;
/// Per-axis speed clamp.
pub const V_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// 1 at the goal, 0 elsewhere.
    Sparse,
    /// Negative scaled distance to goal each step, plus the goal bonus.
    Shaped,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// The built-in environments, value-cheap to clone per episode.
#[derive(Debug, Clone)]
pub enum ToyEnv {
    PointMaze(PointMazeEnv),
    StageTask(StageTaskEnv),
}

impl ToyEnv {
    pub fn env_id(&self) -> String {
        match self {
            ToyEnv::PointMaze(e) => format!("point-maze-{}", e.layout_name()),
            ToyEnv::StageTask(e) => format!("stage-task-{}", e.stages()),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ToyEnv::PointMaze(_) => 4,
            ToyEnv::StageTask(_) => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            ToyEnv::PointMaze(_) => 2,
            ToyEnv::StageTask(_) => 3,
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            ToyEnv::PointMaze(e) => e.max_steps,
            ToyEnv::StageTask(e) => e.max_steps,
        }
    }

    pub fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        match self {
            ToyEnv::PointMaze(e) => e.reset(rng),
            ToyEnv::StageTask(e) => e.reset(rng),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        match self {
            ToyEnv::PointMaze(e) => e.step(action),
            ToyEnv::StageTask(e) => e.step(action),
        }
    }

    pub fn state(&self) -> Vec<f64> {
        match self {
            ToyEnv::PointMaze(e) => e.state_vec(),
            ToyEnv::StageTask(e) => e.state_vec(),
        }
    }

    /// Episode success: the sparse objective was achieved.
    pub fn succeeded(&self) -> bool {
        match self {
            ToyEnv::PointMaze(e) => e.reached_goal(),
            ToyEnv::StageTask(e) => e.all_stages_done(),
        }
    }

    /// Scripted expert action for the current state.
    pub fn expert_action(&self, noise: f64, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        match self {
            ToyEnv::PointMaze(e) => e.expert_action(noise, rng),
            ToyEnv::StageTask(e) => e.expert_action(noise, rng),
        }
    }

    /// Overwrite the physical state (used by replay-style plan sources).
    /// Episode bookkeeping restarts; StageTask stage progress resets.
    pub fn force_state(&mut self, s: &[f64]) {
        match self {
            ToyEnv::PointMaze(e) => e.force_state(s),
            ToyEnv::StageTask(e) => e.force_state(s),
        }
    }
}

pub(crate) fn clamp_action(action: &[f64], dim: usize) -> Vec<f64> {
    let mut a: Vec<f64> = action.iter().take(dim).map(|v| v.clamp(-1.0, 1.0)).collect();
    a.resize(dim, 0.0);
    a
}

#[cfg(test)]
mod tests;
