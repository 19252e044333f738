use super::ToyEnv;
use crate::dataset::{MinMaxNormalizer, ScoreReference};
use crate::diffusion::{sample, Inpaint, NoiseSchedule, SamplerSpec};
use crate::error::{Error, Result};
use crate::guidance::{
    mcss_select, CfgPredictor, CgPredictor, GuidanceAlgo, GuidanceSpec, PlannerPredictor,
};
use crate::nets::{Critic, Denoiser, InvDyn};
use crate::tensor::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::PathBuf;

/// Produces plans in normalized coordinates: `[H, W]` rows starting at the
/// current state, where `W = state_dim` or `state_dim + action_dim` when the
/// plan carries actions.
pub trait PlanSource: Sync {
    fn plan(&self, raw_state: &[f64], norm_state: &[f64], rng: &mut dyn RngCore)
        -> Result<Tensor>;
    /// Plans include action columns (joint action generation).
    fn carries_actions(&self) -> bool;
    fn horizon(&self) -> usize;
}

/// The trained pieces a guided diffusion planner needs at decision time.
pub struct PlannerParts<'a> {
    pub model: &'a (dyn Denoiser + Send + Sync),
    pub schedule: &'a NoiseSchedule,
    pub sampler: &'a SamplerSpec,
    pub guidance: &'a GuidanceSpec,
    pub critic: Option<&'a Critic>,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub joint: bool,
}

/// Diffusion planner with the configured guidance algorithm. Each plan call
/// inpaints the first state to the query state.
pub struct GuidedPlanner<'a>(pub PlannerParts<'a>);

impl GuidedPlanner<'_> {
    fn width(&self) -> usize {
        self.0.state_dim + if self.0.joint { self.0.action_dim } else { 0 }
    }
}

impl PlanSource for GuidedPlanner<'_> {
    fn plan(
        &self,
        _raw_state: &[f64],
        norm_state: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let p = &self.0;
        let w = self.width();
        let inpaint = Inpaint::first_row(p.horizon, w, p.state_dim, norm_state)?;
        let mut rng = rng;
        let plan_batch = match p.guidance.algo {
            GuidanceAlgo::None => {
                let pred = PlannerPredictor::unconditional(p.model, p.schedule);
                sample(&pred, p.schedule, p.sampler, &[1, p.horizon, w], Some(&inpaint), &mut rng)?
            }
            GuidanceAlgo::Cfg => {
                let pred = CfgPredictor::new(
                    p.model,
                    p.schedule,
                    p.guidance.target_return,
                    p.guidance.scale,
                )?;
                sample(&pred, p.schedule, p.sampler, &[1, p.horizon, w], Some(&inpaint), &mut rng)?
            }
            GuidanceAlgo::Cg => {
                let critic = p
                    .critic
                    .ok_or_else(|| Error::Contract("classifier guidance needs a critic".into()))?;
                let pred = CgPredictor::new(p.model, p.schedule, critic, p.guidance.scale)?;
                sample(&pred, p.schedule, p.sampler, &[1, p.horizon, w], Some(&inpaint), &mut rng)?
            }
            GuidanceAlgo::Mcss => {
                let critic = p
                    .critic
                    .ok_or_else(|| Error::Contract("sampling with selection needs a critic".into()))?;
                let pred = PlannerPredictor::unconditional(p.model, p.schedule);
                let sel = mcss_select(
                    &pred,
                    critic,
                    p.schedule,
                    p.sampler,
                    (p.horizon, w),
                    Some(&inpaint),
                    p.guidance.candidates,
                    &mut rng,
                )?;
                return Ok(sel.plan);
            }
        };
        plan_batch.reshaped(vec![p.horizon, w])
    }

    fn carries_actions(&self) -> bool {
        self.0.joint
    }

    fn horizon(&self) -> usize {
        self.0.horizon
    }
}

/// Joint-mode action extraction: the first action row of the selected plan,
/// denormalized (callers clip to env bounds afterwards).
pub fn joint_execute(
    plan: &Tensor,
    state_dim: usize,
    action_dim: usize,
    action_norm: &MinMaxNormalizer,
) -> Result<Vec<f64>> {
    let shape = plan.shape();
    if shape.len() != 2 || shape[1] < state_dim + action_dim || action_dim == 0 {
        return Err(Error::Contract(format!(
            "joint execution needs plans with action columns, got shape {:?}",
            shape
        )));
    }
    let row = plan.row(0);
    Ok(action_norm.denormalize(&row[state_dim..state_dim + action_dim]))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    /// Re-plan every this many environment steps.
    pub replan_every: usize,
    pub seed: u64,
    /// Worker threads for parallel episodes (0 = rayon default).
    pub workers: usize,
    /// When set, one CSV rollout file is written per episode.
    pub rollout_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { episodes: 100, replan_every: 1, seed: 0, workers: 0, rollout_dir: None }
    }
}

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub mean_return: f64,
    pub stderr_return: f64,
    pub success_rate: f64,
    pub normalized_score: Option<f64>,
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

/// Everything the executor needs besides the environment.
pub struct PolicyBundle<'a> {
    pub source: &'a dyn PlanSource,
    pub invdyn: Option<&'a InvDyn>,
    pub state_norm: &'a MinMaxNormalizer,
    pub action_norm: &'a MinMaxNormalizer,
    pub score_ref: Option<ScoreReference>,
}

/// Run evaluation episodes (in parallel; per-episode rng streams keep the
/// aggregate independent of scheduling) and aggregate return statistics.
pub fn evaluate_policy(
    bundle: &PolicyBundle,
    env_template: &ToyEnv,
    opts: &EvalOptions,
) -> Result<EvalStats> {
    if bundle.state_norm.dim() != env_template.state_dim()
        || bundle.action_norm.dim() != env_template.action_dim()
    {
        return Err(Error::Contract(format!(
            "bundle dims ({}, {}) do not match env ({}, {})",
            bundle.state_norm.dim(),
            bundle.action_norm.dim(),
            env_template.state_dim(),
            env_template.action_dim()
        )));
    }
    if !bundle.source.carries_actions() && bundle.invdyn.is_none() {
        return Err(Error::Contract(
            "states-only planner needs an inverse dynamics model".into(),
        ));
    }
    if opts.episodes == 0 || opts.replan_every == 0 {
        return Err(Error::InvalidConfig("episodes and replan_every must be >= 1".into()));
    }
    if let Some(dir) = &opts.rollout_dir {
        std::fs::create_dir_all(dir)?;
    }

    let run_one = |ep: usize| -> Result<(f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(ep as u64 + 1);
        let mut env = env_template.clone();
        let mut state = env.reset(&mut rng);
        let mut total = 0.0;
        let mut plan: Option<Tensor> = None;
        let mut rollout: Vec<(usize, Vec<f64>, Vec<f64>, f64)> = Vec::new();
        for step in 0..env.max_steps() {
            let norm_state = bundle.state_norm.normalize(&state);
            if step % opts.replan_every == 0 {
                plan = Some(bundle.source.plan(&state, &norm_state, &mut rng)?);
            }
            let current = plan.as_ref().expect("plan exists after first step");
            let action = if bundle.source.carries_actions() {
                joint_execute(
                    current,
                    env_template.state_dim(),
                    env_template.action_dim(),
                    bundle.action_norm,
                )?
            } else {
                let invdyn = bundle.invdyn.expect("checked above");
                let next_row = &current.row(1)[..env_template.state_dim()];
                let a_norm = invdyn.infer(&norm_state, next_row, &mut rng)?;
                bundle.action_norm.denormalize(&a_norm)
            };
            let action: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let out = env.step(&action);
            total += out.reward;
            if opts.rollout_dir.is_some() {
                rollout.push((step, state.clone(), action.clone(), out.reward));
            }
            let done = out.done();
            state = out.state;
            if done {
                break;
            }
        }
        if let Some(dir) = &opts.rollout_dir {
            let mut f = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("rollout_ep{ep:04}.csv")),
            )?);
            write!(f, "step")?;
            for d in 0..env_template.state_dim() {
                write!(f, ",s{d}")?;
            }
            for d in 0..env_template.action_dim() {
                write!(f, ",a{d}")?;
            }
            writeln!(f, ",reward")?;
            for (step, s, a, r) in &rollout {
                write!(f, "{step}")?;
                for v in s {
                    write!(f, ",{v}")?;
                }
                for v in a {
                    write!(f, ",{v}")?;
                }
                writeln!(f, ",{r}")?;
            }
        }
        Ok((total, env.succeeded()))
    };

    let results: Vec<Result<(f64, bool)>> = if opts.workers == 1 {
        (0..opts.episodes).map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
        pool.install(|| (0..opts.episodes).into_par_iter().map(run_one).collect())
    };

    let mut returns = Vec::with_capacity(opts.episodes);
    let mut successes = Vec::with_capacity(opts.episodes);
    for r in results {
        let (ret, ok) = r?;
        returns.push(ret);
        successes.push(ok);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n.max(1.0);
    let stderr = (var / n).sqrt();
    let success_rate = successes.iter().filter(|&&s| s).count() as f64 / n;
    let normalized_score = bundle.score_ref.map(|sr| sr.normalized_score(mean));
    Ok(EvalStats { mean_return: mean, stderr_return: stderr, success_rate, normalized_score, returns, successes })
}

/// Test/baseline plan source: rolls the scripted expert forward from the
/// query state and returns the visited states (and actions) at the planner's
/// stride as a joint plan.
pub struct ExpertReplaySource {
    pub env_template: ToyEnv,
    pub horizon: usize,
    pub stride: usize,
    pub state_norm: MinMaxNormalizer,
    pub action_norm: MinMaxNormalizer,
}

impl PlanSource for ExpertReplaySource {
    fn plan(
        &self,
        raw_state: &[f64],
        _norm_state: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let mut env = self.env_template.clone();
        env.force_state(raw_state);
        let ds = env.state_dim();
        let da = env.action_dim();
        let w = ds + da;
        let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut state = raw_state.to_vec();
        let mut done = false;
        let mut last_action = vec![0.0; da];
        for j in 0..=(self.horizon - 1) * self.stride {
            let a = if done { last_action.clone() } else { env.expert_action(0.0, rng) };
            if j % self.stride == 0 {
                rows.push((state.clone(), a.clone()));
                if rows.len() == self.horizon {
                    break;
                }
            }
            if !done {
                let out = env.step(&a);
                done = out.done();
                state = out.state;
                last_action = a;
            }
        }
        let mut data = Vec::with_capacity(self.horizon * w);
        for (s, a) in rows.iter().take(self.horizon) {
            data.extend(self.state_norm.normalize(s));
            data.extend(self.action_norm.normalize(a));
        }
        Tensor::from_vec(vec![self.horizon, w], data)
    }

    fn carries_actions(&self) -> bool {
        true
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Baseline plan source: uniform random actions (states zeroed).
pub struct RandomPlanSource {
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl PlanSource for RandomPlanSource {
    fn plan(&self, _raw: &[f64], _norm: &[f64], rng: &mut dyn RngCore) -> Result<Tensor> {
        let rng = rng;
        let w = self.state_dim + self.action_dim;
        let mut data = vec![0.0; self.horizon * w];
        for row in 0..self.horizon {
            for d in 0..self.action_dim {
                data[row * w + self.state_dim + d] = rng.gen_range(-1.0..1.0);
            }
        }
        Tensor::from_vec(vec![self.horizon, w], data)
    }

    fn carries_actions(&self) -> bool {
        true
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}
