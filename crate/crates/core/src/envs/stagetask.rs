use super::{clamp_action, StepOutcome, DT, V_MAX};
use rand::Rng;

const STAGE_RADIUS: f64 = 0.4;
const BOX: f64 = 4.0;

/// Multi-stage reaching task in a 3-D workspace: visit K sub-goals in
/// sequence, +1 reward per newly completed stage. State is
/// `[px, py, pz, vx, vy, vz]`, the action a 3-D acceleration in `[-1, 1]^3`.
#[derive(Debug, Clone)]
pub struct StageTaskEnv {
    pub max_steps: usize,
    subgoals: Vec<[f64; 3]>,
    pos: [f64; 3],
    vel: [f64; 3],
    completed: usize,
    steps: usize,
    done: bool,
}

impl StageTaskEnv {
    pub fn new(stages: usize, max_steps: usize) -> Self {
        // fixed tour of the workspace corners, rising in z
        let corners = [
            [3.2, 0.8, 1.0],
            [3.2, 3.2, 1.8],
            [0.8, 3.2, 2.6],
            [0.8, 0.8, 3.4],
            [2.0, 2.0, 1.4],
            [3.2, 2.0, 2.2],
        ];
        let subgoals = (0..stages).map(|i| corners[i % corners.len()]).collect();
        Self {
            max_steps,
            subgoals,
            pos: [2.0, 2.0, 0.6],
            vel: [0.0; 3],
            completed: 0,
            steps: 0,
            done: false,
        }
    }

    pub fn stages(&self) -> usize {
        self.subgoals.len()
    }

    pub fn completed_stages(&self) -> usize {
        self.completed
    }

    pub fn all_stages_done(&self) -> bool {
        self.completed == self.subgoals.len()
    }

    pub fn state_vec(&self) -> Vec<f64> {
        let mut s = self.pos.to_vec();
        s.extend_from_slice(&self.vel);
        s
    }

    pub fn force_state(&mut self, s: &[f64]) {
        for i in 0..3 {
            self.pos[i] = s[i];
            self.vel[i] = s[i + 3];
        }
        self.completed = 0;
        self.steps = 0;
        self.done = false;
    }

    pub fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let rng = rng;
        for (i, p) in self.pos.iter_mut().enumerate() {
            *p = if i < 2 { 2.0 } else { 0.6 } + rng.gen_range(-0.3..0.3);
        }
        self.vel = [0.0; 3];
        self.completed = 0;
        self.steps = 0;
        self.done = false;
        self.state_vec()
    }

    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        debug_assert!(!self.done, "step after episode end");
        let a = clamp_action(action, 3);
        for i in 0..3 {
            self.vel[i] = (self.vel[i] + a[i] * DT).clamp(-V_MAX, V_MAX);
            self.pos[i] = (self.pos[i] + self.vel[i] * DT).clamp(0.0, BOX);
        }
        self.steps += 1;
        let mut reward = 0.0;
        // stages complete strictly in order
        if self.completed < self.subgoals.len() {
            let g = &self.subgoals[self.completed];
            let d2: f64 = (0..3).map(|i| (self.pos[i] - g[i]).powi(2)).sum();
            if d2.sqrt() < STAGE_RADIUS {
                self.completed += 1;
                reward += 1.0;
            }
        }
        let terminated = self.all_stages_done();
        let truncated = !terminated && self.steps >= self.max_steps;
        self.done = terminated || truncated;
        StepOutcome { state: self.state_vec(), reward, terminated, truncated }
    }

    /// PD controller toward the current sub-goal with optional action noise.
    pub fn expert_action(&self, noise: f64, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let rng = rng;
        let g = self.subgoals[self.completed.min(self.subgoals.len() - 1)];
        let to_g: Vec<f64> = (0..3).map(|i| g[i] - self.pos[i]).collect();
        let dist = to_g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let speed = (2.0 * dist).min(V_MAX);
        let mut a = Vec::with_capacity(3);
        for i in 0..3 {
            let desired = to_g[i] / dist * speed;
            let mut v = (5.0 * (desired - self.vel[i])).clamp(-1.0, 1.0);
            if noise > 0.0 {
                v = (v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal)).clamp(-1.0, 1.0);
            }
            a.push(v);
        }
        a
    }
}
