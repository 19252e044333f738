use super::{ActionMode, RunConfig, TrainConfig};
use crate::dataset::{
    build_segments, MinMaxNormalizer, OfflineDataset, PolicyMix, ReturnNormalizer, ScoreReference,
    SegmentSet,
};
use crate::diffusion::{
    diffusion_training_loss, make_schedule, NoiseSchedule, SamplerSpec, ScheduleKind, Solver,
};
use crate::envs::{GeneratorSpec, GuidedPlanner, PlannerParts, PolicyBundle, ToyEnv};
use crate::error::{Error, Result};
use crate::guidance::{train_critic, CriticTrainOptions};
use crate::nets::{
    build_denoiser, Cond, Critic, CriticSpec, Denoiser, DenoiserSpec, InvDyn, InvDynBody,
    PlannerNet, PredictTarget,
};
use crate::tensor::{restore_store, save_checkpoint, Adam, AdamConfig, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Loss trajectory summary for one trained component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the first window of steps.
    pub planner_early_loss: f64,
    /// Mean loss over the last window of steps.
    pub planner_late_loss: f64,
    pub critic_final_loss: Option<f64>,
    pub invdyn_final_loss: Option<f64>,
    pub wall_secs: f64,
}

/// A fully trained run: planner plus whatever the guidance and action modes
/// require, with the normalizers and scoring anchors needed for execution.
pub struct TrainedBundle {
    pub config: RunConfig,
    pub seed: u64,
    pub planner: PlannerNet,
    pub critic: Option<Critic>,
    pub invdyn: Option<InvDyn>,
    pub schedule: NoiseSchedule,
    pub state_norm: MinMaxNormalizer,
    pub action_norm: MinMaxNormalizer,
    pub return_norm: ReturnNormalizer,
    pub score_ref: Option<ScoreReference>,
    pub env_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    version: u32,
    config: RunConfig,
    seed: u64,
    env_id: String,
    state_norm: MinMaxNormalizer,
    action_norm: MinMaxNormalizer,
    return_norm: ReturnNormalizer,
    score_ref: Option<ScoreReference>,
}

#[derive(Debug, Clone)]
pub struct BundlePaths {
    pub dir: PathBuf,
    pub planner: PathBuf,
    pub critic: Option<PathBuf>,
    pub invdyn: Option<PathBuf>,
    pub meta: PathBuf,
}

impl TrainedBundle {
    pub fn plan_width(&self) -> usize {
        let ds = self.state_norm.dim();
        match self.config.planner.action_mode {
            ActionMode::Separate => ds,
            ActionMode::Joint => ds + self.action_norm.dim(),
        }
    }

    pub fn env_template(&self) -> ToyEnv {
        self.config.env.build()
    }

    pub fn sampler_spec(&self) -> SamplerSpec {
        SamplerSpec {
            solver: self.config.sampler.solver,
            steps: self.config.sampler.steps,
            temperature: self.config.sampler.temperature,
            clip_sample: true,
        }
    }

    /// Wire up the guided plan source over this bundle.
    pub fn planner_parts<'a>(&'a self, sampler: &'a SamplerSpec) -> PlannerParts<'a> {
        PlannerParts {
            model: &self.planner,
            schedule: &self.schedule,
            sampler,
            guidance: &self.config.guidance,
            critic: self.critic.as_ref(),
            horizon: self.config.planner.horizon,
            state_dim: self.state_norm.dim(),
            action_dim: self.action_norm.dim(),
            joint: self.config.planner.action_mode == ActionMode::Joint,
        }
    }

    /// Evaluate this bundle on its own environment.
    pub fn evaluate(&self, opts: &crate::envs::EvalOptions) -> Result<crate::envs::EvalStats> {
        let sampler = self.sampler_spec();
        let planner = GuidedPlanner(self.planner_parts(&sampler));
        let bundle = PolicyBundle {
            source: &planner,
            invdyn: self.invdyn.as_ref(),
            state_norm: &self.state_norm,
            action_norm: &self.action_norm,
            score_ref: self.score_ref,
        };
        crate::envs::evaluate_policy(&bundle, &self.env_template(), opts)
    }

    pub fn save(&self, dir: &Path) -> Result<BundlePaths> {
        std::fs::create_dir_all(dir)?;
        let planner_path = dir.join("planner.ckpt");
        save_checkpoint(&planner_path, self.planner.params())?;
        let critic_path = match &self.critic {
            Some(c) => {
                let p = dir.join("critic.ckpt");
                save_checkpoint(&p, c.params())?;
                Some(p)
            }
            None => None,
        };
        let invdyn_path = match &self.invdyn {
            Some(m) => {
                let p = dir.join("invdyn.ckpt");
                save_checkpoint(&p, m.params())?;
                Some(p)
            }
            None => None,
        };
        let meta = BundleMeta {
            version: 1,
            config: self.config.clone(),
            seed: self.seed,
            env_id: self.env_id.clone(),
            state_norm: self.state_norm.clone(),
            action_norm: self.action_norm.clone(),
            return_norm: self.return_norm.clone(),
            score_ref: self.score_ref,
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        Ok(BundlePaths { dir: dir.to_path_buf(), planner: planner_path, critic: critic_path, invdyn: invdyn_path, meta: meta_path })
    }

    /// Rebuild the nets from the stored config and restore their weights.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        let config = meta.config;
        config.validate()?;
        let env = config.env.build();
        let (ds, da) = (env.state_dim(), env.action_dim());
        let width = ds + if config.planner.action_mode == ActionMode::Joint { da } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let mut planner = build_denoiser(
            &planner_spec(&config),
            config.planner.horizon,
            width,
            &mut rng,
        )?;
        restore_store(&dir.join("planner.ckpt"), planner.params_mut())?;
        let critic = if config.needs_critic() {
            let mut c = Critic::new(critic_spec(&config), config.planner.horizon, width, &mut rng)?;
            restore_store(&dir.join("critic.ckpt"), c.params_mut())?;
            Some(c)
        } else {
            None
        };
        let invdyn = if config.needs_invdyn() {
            let mut m = build_invdyn(&config, ds, da, &mut rng)?;
            restore_store(&dir.join("invdyn.ckpt"), m.params_mut())?;
            Some(m)
        } else {
            None
        };
        let schedule = make_schedule(config.sampler.schedule, config.sampler.train_timesteps)?;
        Ok(Self {
            seed: meta.seed,
            env_id: meta.env_id,
            planner,
            critic,
            invdyn,
            schedule,
            state_norm: meta.state_norm,
            action_norm: meta.action_norm,
            return_norm: meta.return_norm,
            score_ref: meta.score_ref,
            config,
        })
    }
}

fn planner_spec(config: &RunConfig) -> DenoiserSpec {
    DenoiserSpec {
        backbone: config.planner.backbone,
        hidden: config.planner.hidden,
        blocks: config.planner.blocks,
        head_dim: config.planner.head_dim,
        base_channels: config.planner.base_channels,
        channel_mult: config.planner.channel_mult.clone(),
        kernel: config.planner.kernel,
        predict: config.planner.predict,
        cond_dim: config.planner_cond_dim(),
    }
}

fn critic_spec(config: &RunConfig) -> CriticSpec {
    CriticSpec {
        body: config.critic.body,
        noised: config.critic_noised(),
        hidden: config.critic.hidden,
        blocks: config.critic.blocks,
        head_dim: config.critic.head_dim,
        base_channels: config.critic.base_channels,
        kernel: config.planner.kernel,
        train_steps: config.critic.train_steps,
    }
}

fn build_invdyn<R: Rng>(config: &RunConfig, ds: usize, da: usize, rng: &mut R) -> Result<InvDyn> {
    match config.invdyn.body {
        InvDynBody::Diffusion => {
            let schedule = make_schedule(ScheduleKind::Cosine, config.invdyn.timesteps)?;
            let sampler = SamplerSpec {
                solver: Solver::Ddpm,
                steps: config.invdyn.timesteps,
                temperature: config.invdyn.temperature,
                clip_sample: true,
            };
            InvDyn::new_diffusion(
                ds,
                da,
                config.invdyn.hidden,
                schedule,
                sampler,
                config.invdyn_centralize(),
                rng,
            )
        }
        InvDynBody::Regular => {
            InvDyn::new_regular(ds, da, config.invdyn.hidden, config.invdyn_centralize(), rng)
        }
    }
}

/// Resolve the dataset: load from `dataset.path` or generate per the config.
pub fn resolve_dataset(config: &RunConfig) -> Result<OfflineDataset> {
    if let Some(path) = &config.dataset.path {
        return crate::dataset::load_dataset(path);
    }
    let spec = GeneratorSpec {
        env: config.env.clone(),
        mix: PolicyMix::new(
            config.dataset.expert_frac,
            config.dataset.noisy_frac,
            config.dataset.random_frac,
        )?,
        episodes: config.dataset.episodes,
        seed: config.dataset.seed,
        return_mode: config.dataset.return_mode,
        gamma: config.dataset.gamma,
        normalize_states: config.dataset.normalize_states,
    };
    crate::envs::generate_dataset(&spec)
}

/// Train the full planning pipeline for one seed: the planner (inpainting
/// happens at sampling time), the critic when the guidance algorithm needs
/// one, and the inverse dynamics in separate action mode.
pub fn run_train(
    config: &RunConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(TrainedBundle, TrainReport, Option<BundlePaths>)> {
    config.validate()?;
    let start = std::time::Instant::now();
    let dataset = resolve_dataset(config)?;
    let env = config.env.build();
    if dataset.meta.state_dim != env.state_dim() || dataset.meta.action_dim != env.action_dim() {
        return Err(Error::Contract(format!(
            "dataset dims ({}, {}) do not match env ({}, {})",
            dataset.meta.state_dim,
            dataset.meta.action_dim,
            env.state_dim(),
            env.action_dim()
        )));
    }
    let joint = config.planner.action_mode == ActionMode::Joint;
    let segments =
        build_segments(&dataset, config.planner.horizon, config.planner.stride, joint)?;
    let schedule = make_schedule(config.sampler.schedule, config.sampler.train_timesteps)?;
    let width = segments.row_width(&dataset);

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner =
        build_denoiser(&planner_spec(config), config.planner.horizon, width, &mut init_rng)?;
    let (early, late) = train_planner(
        &mut planner,
        &dataset,
        &segments,
        &schedule,
        config,
        seed,
    )?;

    let critic = if config.needs_critic() {
        let opts = CriticTrainOptions {
            batch: config.train.batch,
            lr: config.train.lr,
            seed: seed ^ 0xc117,
            log_every: config.train.log_every,
        };
        Some(train_critic(&dataset, &segments, &critic_spec(config), &schedule, &opts)?)
    } else {
        None
    };
    let critic_final_loss = None;

    let (invdyn, invdyn_final_loss) = if config.needs_invdyn() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
        let mut model = build_invdyn(config, env.state_dim(), env.action_dim(), &mut rng)?;
        let final_loss = train_invdyn(&mut model, &dataset, config, seed ^ 0x1d5eed)?;
        (Some(model), Some(final_loss))
    } else {
        (None, None)
    };

    let bundle = TrainedBundle {
        config: config.clone(),
        seed,
        planner,
        critic,
        invdyn,
        schedule,
        state_norm: dataset.state_norm.clone(),
        action_norm: dataset.action_norm.clone(),
        return_norm: dataset.return_norm.clone(),
        score_ref: dataset.meta.score_ref,
        env_id: dataset.meta.env_id.clone(),
    };
    let report = TrainReport {
        planner_early_loss: early,
        planner_late_loss: late,
        critic_final_loss,
        invdyn_final_loss,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    let paths = match out_dir {
        Some(dir) => Some(bundle.save(dir)?),
        None => None,
    };
    Ok((bundle, report, paths))
}

fn train_planner(
    planner: &mut PlannerNet,
    dataset: &OfflineDataset,
    segments: &SegmentSet,
    schedule: &NoiseSchedule,
    config: &RunConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if segments.is_empty() {
        return Err(Error::Dataset("no segments to train the planner on".into()));
    }
    let train = &config.train;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x91a22e5);
    let mut adam =
        Adam::new(AdamConfig { lr: train.lr, ..AdamConfig::default() }, planner.params());
    let cond_dim = config.planner_cond_dim();
    let p_uncond = config.guidance.p_uncond;
    let mut losses = Vec::with_capacity(train.steps);
    let mut running = 0.0;
    for step in 0..train.steps {
        let picks: Vec<usize> =
            (0..train.batch).map(|_| rng.gen_range(0..segments.len())).collect();
        let (x0, returns) = segments.gather(dataset, &picks)?;
        let mut g = Graph::new();
        let loss = if cond_dim > 0 {
            let values = Tensor::from_vec(vec![train.batch, 1], returns)?;
            let keep: Vec<bool> = (0..train.batch).map(|_| rng.gen::<f64>() >= p_uncond).collect();
            diffusion_training_loss(
                &mut g,
                planner,
                &x0,
                Cond::Batch { values: &values, keep: &keep },
                schedule,
                config.planner.predict,
                &mut rng,
            )?
        } else {
            diffusion_training_loss(
                &mut g,
                planner,
                &x0,
                Cond::None,
                schedule,
                config.planner.predict,
                &mut rng,
            )?
        };
        let loss_val = g.value(loss).item();
        losses.push(loss_val);
        running += loss_val;
        let grads = g.backward(loss)?.by_param(planner.params());
        adam.step(planner.params_mut(), &grads)?;
        if train.log_every > 0 && (step + 1) % train.log_every == 0 {
            println!(
                "planner step {:>7}  loss {:.6}",
                step + 1,
                running / train.log_every as f64
            );
            running = 0.0;
        }
    }
    let window = (train.steps / 20).max(1).min(train.steps);
    let early = losses[..window].iter().sum::<f64>() / window as f64;
    let late = losses[train.steps - window..].iter().sum::<f64>() / window as f64;
    Ok((early, late))
}

fn train_invdyn(
    model: &mut InvDyn,
    dataset: &OfflineDataset,
    config: &RunConfig,
    seed: u64,
) -> Result<f64> {
    let pairs = dataset.invdyn_pairs(config.planner.stride, model.centralize);
    if pairs.is_empty() {
        return Err(Error::Dataset("no inverse-dynamics pairs (episodes too short?)".into()));
    }
    let train = TrainConfig { steps: config.invdyn.train_steps, ..config.train.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam =
        Adam::new(AdamConfig { lr: train.lr, ..AdamConfig::default() }, model.params());
    let (ds2, da) = (pairs[0].0.len(), pairs[0].1.len());
    let mut final_loss = 0.0;
    let mut running = 0.0;
    for step in 0..train.steps {
        let mut inputs = Vec::with_capacity(train.batch * ds2);
        let mut targets = Vec::with_capacity(train.batch * da);
        for _ in 0..train.batch {
            let (i, t) = &pairs[rng.gen_range(0..pairs.len())];
            inputs.extend_from_slice(i);
            targets.extend_from_slice(t);
        }
        let inputs = Tensor::from_vec(vec![train.batch, ds2], inputs)?;
        let targets = Tensor::from_vec(vec![train.batch, da], targets)?;
        let mut g = Graph::new();
        let loss = match model.diffusion_model() {
            Some((mlp, inv_schedule)) => {
                let keep = vec![true; train.batch];
                let inv_schedule = inv_schedule.clone();
                diffusion_training_loss(
                    &mut g,
                    mlp,
                    &targets,
                    Cond::Batch { values: &inputs, keep: &keep },
                    &inv_schedule,
                    PredictTarget::Noise,
                    &mut rng,
                )?
            }
            None => {
                let iv = g.constant(inputs);
                let tv = g.constant(targets);
                let pred = model.regular_forward(&mut g, iv)?;
                g.mse_loss(pred, tv)?
            }
        };
        final_loss = g.value(loss).item();
        running += final_loss;
        let grads = g.backward(loss)?.by_param(model.params());
        adam.step(model.params_mut(), &grads)?;
        if train.log_every > 0 && (step + 1) % train.log_every == 0 {
            println!(
                "invdyn step {:>7}  loss {:.6}",
                step + 1,
                running / train.log_every as f64
            );
            running = 0.0;
        }
    }
    Ok(final_loss)
}
