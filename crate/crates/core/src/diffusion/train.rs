use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserSpec};
use super::schedule::{forward_noise, NoiseSchedule};
use crate::numcore::{adamw_step, AdamWConfig, AdamWState, Mat, ParamTensor};
use crate::rng::{self, LabRng};
use crate::semantics::{CaptionModel, Vocabulary};
use crate::world::WorldSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing the caption by the empty condition.
    pub p_uncond: f64,
    /// Probability that a caption names the sample's identity sub-cluster.
    pub p_desc: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 8000,
            batch_size: 256,
            p_uncond: 0.1,
            p_desc: 0.5,
            lr: 1e-3,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::arg(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond)));
        }
        if !(0.0..=1.0).contains(&self.p_desc) {
            return Err(Error::arg(format!("p_desc must lie in [0, 1], got {}", self.p_desc)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let x = step as f64 / self.steps.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub z0: Vec<f64>,
    pub cond: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub denoiser: Denoiser,
    pub optimizer: AdamWState,
}

impl TrainState {
    pub fn steps_done(&self) -> usize {
        self.optimizer.step_count as usize
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LossRow>,
}

/// Mean squared noise-prediction error and its parameter gradient.
pub fn denoise_loss(den: &Denoiser, batch: &[TrainExample]) -> Result<(f64, Vec<ParamTensor>)> {
    if batch.is_empty() {
        return Err(Error::arg("denoising loss needs a non-empty batch"));
    }
    let (d, m) = (den.spec.latent_dim, den.spec.embed_dim);
    let n = batch.len();
    let mut zt = Mat::zeros(n, d);
    let mut conds = Mat::zeros(n, m);
    let mut eps = Mat::zeros(n, d);
    let mut ts = Vec::with_capacity(n);
    for (r, ex) in batch.iter().enumerate() {
        if ex.cond.len() != m || ex.eps.len() != d {
            return Err(Error::dim(format!("training example {r} has wrong condition or noise width")));
        }
        zt.row_mut(r).copy_from_slice(&forward_noise(&ex.z0, ex.t, &ex.eps, &den.schedule)?);
        conds.row_mut(r).copy_from_slice(&ex.cond);
        eps.row_mut(r).copy_from_slice(&ex.eps);
        ts.push(ex.t);
    }
    let trace = den.trace_rows(&zt, &ts, &conds)?;
    let out = trace.output();
    let scale = 1.0 / (n * d) as f64;
    let mut loss = 0.0;
    let mut dy = Mat::zeros(n, d);
    for ((g, &p), &e) in dy.data.iter_mut().zip(&out.data).zip(&eps.data) {
        let r = p - e;
        loss += r * r;
        *g = 2.0 * r * scale;
    }
    let mut grads = den.mlp.zero_grads();
    den.mlp.backward_batch(&trace, &dy, Some(&mut grads))?;
    Ok((loss * scale, grads))
}

fn draw_batch(world: &WorldSpec, captions: &CaptionModel, vocab: &Vocabulary, sched: &NoiseSchedule, cfg: &TrainConfig, rng: &mut LabRng) -> Result<Vec<TrainExample>> {
    let m = vocab.embed_dim;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let entry = &captions.entries[rng::uniform_index(rng, captions.entries.len())];
        let ctx = rng::uniform_index(rng, world.contexts.len());
        let (z0, k) = world.sample_indexed(entry.subject, ctx, None, rng)?;
        let prompt = captions.caption(entry, k, &world.contexts[ctx].token, cfg.p_desc, rng);
        let uncond = rand::Rng::gen::<f64>(rng) < cfg.p_uncond;
        let cond = if uncond { vec![0.0; m] } else { vocab.embed_prompt(&prompt)?.pooled() };
        let t = 1 + rng::uniform_index(rng, sched.t_max);
        let eps = rng::normal_vec(rng, world.latent_dim);
        batch.push(TrainExample { z0, cond, t, eps });
    }
    Ok(batch)
}

/// Fresh denoiser plus optimizer for `cfg.seed`.
pub fn init_train_state(spec: DenoiserSpec, sched: NoiseSchedule, cfg: &TrainConfig) -> Result<TrainState> {
    let mut init_rng = rng::stream(cfg.seed, u64::MAX);
    let denoiser = Denoiser::init(spec, sched, &mut init_rng)?;
    let optimizer = AdamWState::new(&denoiser.mlp.params);
    Ok(TrainState { denoiser, optimizer })
}

/// Train a denoiser from scratch for `cfg.steps` steps.
pub fn train_base(
    world: &WorldSpec,
    captions: &CaptionModel,
    vocab: &Vocabulary,
    spec: DenoiserSpec,
    sched: NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let state = init_train_state(spec, sched, cfg)?;
    train_base_from(state, world, captions, vocab, cfg, cfg.steps)
}

/// Continue training until `stop_at` steps are done. Step `s` always draws
/// from stream `s` of the seed, so a resumed run matches an uninterrupted one.
pub fn train_base_from(
    mut state: TrainState,
    world: &WorldSpec,
    captions: &CaptionModel,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    stop_at: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    world.validate()?;
    if state.denoiser.spec.latent_dim != world.latent_dim || state.denoiser.spec.embed_dim != vocab.embed_dim {
        return Err(Error::dim("denoiser shape does not match the world and vocabulary"));
    }
    let stop_at = stop_at.min(cfg.steps);
    let mut log = Vec::new();
    while state.steps_done() < stop_at {
        let step = state.steps_done();
        let mut rng = rng::stream(cfg.seed, step as u64);
        let batch = draw_batch(world, captions, vocab, &state.denoiser.schedule, cfg, &mut rng)?;
        let (loss, grads) = denoise_loss(&state.denoiser, &batch)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("training loss diverged at step {step}")));
        }
        let opt = AdamWConfig { lr: cfg.lr_at(step), weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
        adamw_step(&mut state.denoiser.mlp.params, &grads, &mut state.optimizer, &opt)
            .map_err(|e| Error::numeric(format!("training step {step}: {e}")))?;
        log.push(LossRow { step, loss });
    }
    Ok(TrainOutcome { state, log })
}
