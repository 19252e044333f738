use crate::dataset::{OfflineDataset, SegmentSet};
use crate::diffusion::{q_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nets::{Critic, CriticSpec};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CriticTrainOptions {
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Log the running loss every this many steps (0 = silent).
    pub log_every: usize,
}

impl Default for CriticTrainOptions {
    fn default() -> Self {
        Self { batch: 128, lr: 3e-4, seed: 0, log_every: 0 }
    }
}

/// Regress normalized anchor returns from trajectory segments. Noised
/// critics see `q_sample(x0, t)` with a uniform timestep fed to the body;
/// clean critics always see the raw segment at t = 0.
pub fn train_critic(
    dataset: &OfflineDataset,
    segments: &SegmentSet,
    spec: &CriticSpec,
    schedule: &NoiseSchedule,
    opts: &CriticTrainOptions,
) -> Result<Critic> {
    if segments.is_empty() {
        return Err(Error::Dataset("no segments to train the critic on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let width = segments.row_width(dataset);
    let mut critic = Critic::new(spec.clone(), segments.horizon, width, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: opts.lr, ..AdamConfig::default() }, critic.params());
    let mut running = 0.0;
    for step in 0..spec.train_steps {
        let picks: Vec<usize> =
            (0..opts.batch).map(|_| rng.gen_range(0..segments.len())).collect();
        let (x0, returns) = segments.gather(dataset, &picks)?;
        let (input, ts) = if spec.noised {
            let ts: Vec<usize> =
                (0..opts.batch).map(|_| rng.gen_range(0..schedule.timesteps)).collect();
            let noise = Tensor::randn(x0.shape(), &mut rng);
            (q_sample_batch(&x0, &ts, &noise, schedule)?, ts)
        } else {
            (x0, vec![0; opts.batch])
        };
        let mut g = Graph::new();
        let xv = g.constant(input);
        let pred = critic.forward(&mut g, xv, &ts)?;
        let target = g.constant(Tensor::from_vec(vec![opts.batch], returns)?);
        let loss = g.mse_loss(pred, target)?;
        running += g.value(loss).item();
        let grads = g.backward(loss)?.by_param(critic.params());
        adam.step(critic.params_mut(), &grads)?;
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            println!("critic step {:>7}  loss {:.6}", step + 1, running / opts.log_every as f64);
            running = 0.0;
        }
    }
    Ok(critic)
}
