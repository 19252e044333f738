use super::{clamp_action, RewardMode, StepOutcome, DT, V_MAX};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Grid layouts mirroring the umaze / medium / large difficulty ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MazeName {
    Umaze,
    Medium,
    Large,
}

impl MazeName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MazeName::Umaze => "umaze",
            MazeName::Medium => "medium",
            MazeName::Large => "large",
        }
    }
}

const UMAZE: &[&str] = &[
    "#####", //
    "#GOO#",
    "###O#",
    "#OOO#",
    "#####",
];

const MEDIUM: &[&str] = &[
    "########", //
    "#OO#OOO#",
    "#OO#O#O#",
    "#O#OO#O#",
    "#OOO#OG#",
    "##O#O#O#",
    "#OO#OOO#",
    "########",
];

const LARGE: &[&str] = &[
    "############", //
    "#OOOO#OOOOO#",
    "#O##O#O#O#O#",
    "#OOOOOO#OOO#",
    "#O####O###O#",
    "#OO#O#OOOOO#",
    "##O#O#O#O#O#",
    "#OOOOOO#OOG#",
    "############",
];

/// Occupancy grid over unit cells plus the BFS distance-to-goal field the
/// scripted expert follows.
#[derive(Debug, Clone)]
pub struct MazeLayout {
    pub name: MazeName,
    pub rows: usize,
    pub cols: usize,
    walls: Vec<bool>,
    pub goal: (usize, usize),
    dist_to_goal: Vec<u32>,
}

impl MazeLayout {
    pub fn named(name: MazeName) -> Self {
        let art = match name {
            MazeName::Umaze => UMAZE,
            MazeName::Medium => MEDIUM,
            MazeName::Large => LARGE,
        };
        let rows = art.len();
        let cols = art[0].len();
        let mut walls = vec![false; rows * cols];
        let mut goal = (0, 0);
        for (r, line) in art.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls[r * cols + c] = true,
                    'G' => goal = (r, c),
                    _ => {}
                }
            }
        }
        let dist_to_goal = bfs_distance(&walls, rows, cols, goal);
        Self { name, rows, cols, walls, goal, dist_to_goal }
    }

    pub fn is_wall(&self, r: isize, c: isize) -> bool {
        if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
            return true;
        }
        self.walls[r as usize * self.cols + c as usize]
    }

    /// Wall test for a continuous point (y = row axis, x = column axis).
    pub fn point_in_wall(&self, x: f64, y: f64) -> bool {
        self.is_wall(y.floor() as isize, x.floor() as isize)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.walls[r * self.cols + c] {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn cell_center(&self, cell: (usize, usize)) -> (f64, f64) {
        (cell.1 as f64 + 0.5, cell.0 as f64 + 0.5)
    }

    pub fn goal_center(&self) -> (f64, f64) {
        self.cell_center(self.goal)
    }

    pub fn distance(&self, cell: (usize, usize)) -> u32 {
        self.dist_to_goal[cell.0 * self.cols + cell.1]
    }

    /// All free cells can reach the goal (layout sanity).
    pub fn fully_connected(&self) -> bool {
        self.free_cells().iter().all(|&c| self.distance(c) != u32::MAX)
    }
}

fn bfs_distance(walls: &[bool], rows: usize, cols: usize, goal: (usize, usize)) -> Vec<u32> {
    let mut dist = vec![u32::MAX; rows * cols];
    let mut queue = std::collections::VecDeque::new();
    dist[goal.0 * cols + goal.1] = 0;
    queue.push_back(goal);
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * cols + c];
        for (dr, dc) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr as usize >= rows || nc as usize >= cols {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if walls[nr * cols + nc] || dist[nr * cols + nc] != u32::MAX {
                continue;
            }
            dist[nr * cols + nc] = d + 1;
            queue.push_back((nr, nc));
        }
    }
    dist
}

const AGENT_RADIUS: f64 = 0.15;
const GOAL_RADIUS: f64 = 0.45;

/// Double-integrator point agent in a walled maze. State is
/// `[x, y, vx, vy]`; the action is an acceleration in `[-1, 1]^2`.
#[derive(Debug, Clone)]
pub struct PointMazeEnv {
    pub layout: MazeLayout,
    pub reward: RewardMode,
    pub max_steps: usize,
    pos: (f64, f64),
    vel: (f64, f64),
    steps: usize,
    reached: bool,
    done: bool,
}

impl PointMazeEnv {
    pub fn new(name: MazeName, reward: RewardMode, max_steps: usize) -> Self {
        let layout = MazeLayout::named(name);
        let start = layout.cell_center((layout.rows - 2, 1));
        Self {
            layout,
            reward,
            max_steps,
            pos: start,
            vel: (0.0, 0.0),
            steps: 0,
            reached: false,
            done: false,
        }
    }

    pub fn default_max_steps(name: MazeName) -> usize {
        match name {
            MazeName::Umaze => 100,
            MazeName::Medium => 200,
            MazeName::Large => 300,
        }
    }

    pub fn layout_name(&self) -> &'static str {
        self.layout.name.as_str()
    }

    pub fn reached_goal(&self) -> bool {
        self.reached
    }

    pub fn state_vec(&self) -> Vec<f64> {
        vec![self.pos.0, self.pos.1, self.vel.0, self.vel.1]
    }

    pub fn force_state(&mut self, s: &[f64]) {
        self.pos = (s[0], s[1]);
        self.vel = (s[2], s[3]);
        self.steps = 0;
        self.reached = false;
        self.done = false;
    }

    pub fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let rng = rng;
        let free: Vec<_> = self
            .layout
            .free_cells()
            .into_iter()
            .filter(|&c| c != self.layout.goal)
            .collect();
        let cell = free[rng.gen_range(0..free.len())];
        let (cx, cy) = self.layout.cell_center(cell);
        self.pos = (cx + rng.gen_range(-0.25..0.25), cy + rng.gen_range(-0.25..0.25));
        self.vel = (0.0, 0.0);
        self.steps = 0;
        self.reached = false;
        self.done = false;
        self.state_vec()
    }

    /// Deterministic double-integrator update with axis-separated collision
    /// handling: a blocked axis keeps its position and zeroes its velocity.
    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        debug_assert!(!self.done, "step after episode end");
        let a = clamp_action(action, 2);
        self.vel.0 = (self.vel.0 + a[0] * DT).clamp(-V_MAX, V_MAX);
        self.vel.1 = (self.vel.1 + a[1] * DT).clamp(-V_MAX, V_MAX);

        let try_x = self.pos.0 + self.vel.0 * DT;
        if self.collides(try_x, self.pos.1) {
            self.vel.0 = 0.0;
        } else {
            self.pos.0 = try_x;
        }
        let try_y = self.pos.1 + self.vel.1 * DT;
        if self.collides(self.pos.0, try_y) {
            self.vel.1 = 0.0;
        } else {
            self.pos.1 = try_y;
        }

        self.steps += 1;
        let (gx, gy) = self.layout.goal_center();
        let dist = ((self.pos.0 - gx).powi(2) + (self.pos.1 - gy).powi(2)).sqrt();
        let at_goal = dist < GOAL_RADIUS;
        let mut reward = match self.reward {
            RewardMode::Sparse => 0.0,
            RewardMode::Shaped => -0.1 * dist,
        };
        if at_goal {
            reward += 1.0;
            self.reached = true;
        }
        let terminated = at_goal;
        let truncated = !terminated && self.steps >= self.max_steps;
        self.done = terminated || truncated;
        StepOutcome { state: self.state_vec(), reward, terminated, truncated }
    }

    fn collides(&self, x: f64, y: f64) -> bool {
        for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            if self.layout.point_in_wall(x + sx * AGENT_RADIUS, y + sy * AGENT_RADIUS) {
                return true;
            }
        }
        false
    }

    pub fn in_wall(&self) -> bool {
        self.collides(self.pos.0, self.pos.1)
    }

    /// Waypoint controller following the BFS distance field toward the goal,
    /// with optional Gaussian action noise.
    pub fn expert_action(&self, noise: f64, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let rng = rng;
        let cell = (
            (self.pos.1.floor() as usize).min(self.layout.rows - 1),
            (self.pos.0.floor() as usize).min(self.layout.cols - 1),
        );
        let target = if cell == self.layout.goal {
            self.layout.goal_center()
        } else {
            // steer toward the neighbor cell closest to the goal
            let mut best = cell;
            let mut best_d = self.layout.distance(cell);
            for (dr, dc) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                let (nr, nc) = (cell.0 as i64 + dr, cell.1 as i64 + dc);
                if self.layout.is_wall(nr as isize, nc as isize) {
                    continue;
                }
                let d = self.layout.distance((nr as usize, nc as usize));
                if d < best_d {
                    best_d = d;
                    best = (nr as usize, nc as usize);
                }
            }
            self.layout.cell_center(best)
        };
        let to_t = (target.0 - self.pos.0, target.1 - self.pos.1);
        let dist = (to_t.0 * to_t.0 + to_t.1 * to_t.1).sqrt().max(1e-9);
        let speed = (2.0 * dist).min(V_MAX);
        let desired = (to_t.0 / dist * speed, to_t.1 / dist * speed);
        let gain = 5.0;
        let mut a = vec![
            (gain * (desired.0 - self.vel.0)).clamp(-1.0, 1.0),
            (gain * (desired.1 - self.vel.1)).clamp(-1.0, 1.0),
        ];
        if noise > 0.0 {
            for v in &mut a {
                *v = (*v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .clamp(-1.0, 1.0);
            }
        }
        a
    }
}
