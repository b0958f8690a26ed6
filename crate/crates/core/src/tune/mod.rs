//! One-shot tuning of the projector with the denoiser frozen.

mod baseset;
mod projector;

pub use baseset::{augment_target, choose_target, generate_base_set, BaseEntry, BaseSet, BaseSetConfig};
pub use projector::{BnMode, Projector, ProjectorCache, ProjectorCheckpoint, ProjectorSpec};

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, Denoiser};
use crate::numcore::{adamw_step, AdamWConfig, AdamWState, Mat, ParamTensor};
use crate::rng::{self, LabRng};
use crate::semantics::{offset_base, Prompt, PromptEmbedding, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    /// Auxiliary samples per batch.
    pub k: usize,
    /// Jittered target variants.
    pub m_aug: usize,
    pub sigma_aug: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_steps: usize,
    /// The plateau rule is not consulted before this many steps.
    pub min_steps: usize,
    pub plateau_window: usize,
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Independent (t, eps) draws per batch member and step.
    pub noise_draws: usize,
    pub width: usize,
    pub blocks: usize,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            k: 3,
            m_aug: 2,
            sigma_aug: 0.05,
            lambda1: 0.5,
            lambda2: 0.2,
            max_steps: 3000,
            min_steps: 3000,
            plateau_window: 50,
            plateau_patience: 200,
            plateau_tol: 1e-4,
            lr: 1e-4,
            weight_decay: 0.01,
            noise_draws: 8,
            width: 64,
            blocks: 5,
            batch_norm: true,
            seed: 0,
        }
    }
}

/// One tuning batch: the target variant first, then `K` auxiliaries.
#[derive(Clone, Debug)]
pub struct TuneBatch {
    pub z: Mat,
    pub h: Mat,
    /// Sample denoised under the average condition.
    pub aver_z: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneLoss {
    pub total: f64,
    pub tar: f64,
    pub aux: f64,
    pub aver: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneLossRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_tar: f64,
    pub loss_aux: f64,
    pub loss_aver: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub projector: Projector,
    pub optimizer: AdamWState,
    pub log: Vec<TuneLossRow>,
    pub stop: StopReason,
}

/// Pooled condition with each base word offset by its slice of `row`.
fn offset_condition(template: &PromptEmbedding, proj: &Projector, row: &[f64]) -> Result<Vec<f64>> {
    Ok(offset_base(template, &proj.split_offsets(row), 1.0)?.pooled())
}

/// `L_tar + lambda1 L_aux + lambda2 L_aver` and its gradient in the projector
/// parameters. The denoiser is only read.
#[allow(clippy::too_many_arguments)]
pub fn tune_loss(
    den: &Denoiser,
    proj: &mut Projector,
    batch: &TuneBatch,
    template: &PromptEmbedding,
    lambda1: f64,
    lambda2: f64,
    noise_draws: usize,
    coords: Option<&[usize]>,
    rng: &mut LabRng,
    mode: BnMode,
) -> Result<(TuneLoss, Vec<ParamTensor>)> {
    let b = batch.z.rows;
    if b < 2 || batch.h.rows != b {
        return Err(Error::arg("a tuning batch needs the target and at least one auxiliary sample"));
    }
    if noise_draws == 0 {
        return Err(Error::arg("noise_draws must be positive"));
    }
    if template.base_indices.len() != proj.spec.n_outputs {
        return Err(Error::dim(format!(
            "prompt has {} base words, projector produces {} offsets",
            template.base_indices.len(),
            proj.spec.n_outputs
        )));
    }
    let k = b - 1;
    let (d, m) = (den.spec.latent_dim, den.spec.embed_dim);
    let all: Vec<usize> = (0..d).collect();
    let cols = coords.unwrap_or(&all);
    if cols.is_empty() || cols.iter().any(|&j| j >= d) {
        return Err(Error::arg(format!("loss coordinates must be a non-empty subset of 0..{d}")));
    }
    let dc_len = cols.len() as f64;
    let nn = noise_draws;
    let pooled = template.pooled();
    let c = Mat::from_rows(&vec![pooled; b]);
    let cache = proj.forward(&batch.h, &c, mode)?;
    let out = &cache.output;
    let od = proj.spec.output_dim();
    let mut aver = vec![0.0; od];
    for i in 1..b {
        for (a, v) in aver.iter_mut().zip(out.row(i)) {
            *a += v;
        }
    }
    for a in aver.iter_mut() {
        *a /= k as f64;
    }
    let conds: Vec<Vec<f64>> = (0..b).map(|i| offset_condition(template, proj, out.row(i))).collect::<Result<_>>()?;
    let cond_aver = offset_condition(template, proj, &aver)?;

    // Rows: draw-major over batch members, then the average-condition draws.
    let rows = nn * b + nn;
    let mut zt = Mat::zeros(rows, d);
    let mut eps = Mat::zeros(rows, d);
    let mut cm = Mat::zeros(rows, m);
    let mut ts = Vec::with_capacity(rows);
    let t_max = den.schedule.t_max;
    for r in 0..rows {
        let (z0, cond) = if r < nn * b { (batch.z.row(r % b), &conds[r % b]) } else { (batch.aver_z.as_slice(), &cond_aver) };
        let t = 1 + rng::uniform_index(rng, t_max);
        rng::fill_normal(rng, eps.row_mut(r));
        zt.row_mut(r).copy_from_slice(&forward_noise(z0, t, eps.row(r), &den.schedule)?);
        cm.row_mut(r).copy_from_slice(cond);
        ts.push(t);
    }
    let trace = den.trace_rows(&zt, &ts, &cm)?;
    let pred = trace.output();
    let weight = |r: usize| -> f64 {
        if r >= nn * b {
            lambda2 / nn as f64
        } else if r % b == 0 {
            1.0 / nn as f64
        } else {
            lambda1 / (nn * k) as f64
        }
    };
    let (mut l_tar, mut l_aux, mut l_aver) = (0.0, 0.0, 0.0);
    let mut dy = Mat::zeros(rows, d);
    for r in 0..rows {
        let mut sq = 0.0;
        for &j in cols {
            let e = pred.row(r)[j] - eps.row(r)[j];
            sq += e * e;
            dy.row_mut(r)[j] = 2.0 * e / dc_len * weight(r);
        }
        let mse = sq / dc_len;
        if r >= nn * b {
            l_aver += mse;
        } else if r % b == 0 {
            l_tar += mse;
        } else {
            l_aux += mse;
        }
    }
    l_tar /= nn as f64;
    l_aux /= (nn * k) as f64;
    l_aver /= nn as f64;
    let total = l_tar + lambda1 * l_aux + lambda2 * l_aver;
    if !total.is_finite() {
        return Err(Error::numeric("tuning loss is not finite"));
    }

    let dx = den.mlp.backward_batch(&trace, &dy, None)?;
    let dc = den.condition_grad(&dx);
    // Pooling divides every token by the prompt length.
    let inv_len = 1.0 / template.len() as f64;
    let mut dout = Mat::zeros(b, od);
    for r in 0..rows {
        let g = dc.row(r);
        if r < nn * b {
            let row = dout.row_mut(r % b);
            for slot in row.chunks_mut(m) {
                for (a, v) in slot.iter_mut().zip(g) {
                    *a += v * inv_len;
                }
            }
        } else {
            for i in 1..b {
                let row = dout.row_mut(i);
                for slot in row.chunks_mut(m) {
                    for (a, v) in slot.iter_mut().zip(g) {
                        *a += v * inv_len / k as f64;
                    }
                }
            }
        }
    }
    let grads = proj.backward(&cache, &dout)?;
    Ok((TuneLoss { total, tar: l_tar, aux: l_aux, aver: l_aver }, grads))
}

/// Tuning prompts: the target prompt under every context of `contexts`.
pub fn templates_for(prompt_tar: &Prompt, contexts: &[&str]) -> Result<Vec<Prompt>> {
    contexts.iter().map(|c| prompt_tar.with_context(c)).collect()
}

fn plateaued(ma: &[f64], patience: usize, tol: f64) -> bool {
    if ma.len() <= patience {
        return false;
    }
    let split = ma.len() - patience;
    let before = ma[..split].iter().cloned().fold(f64::INFINITY, f64::min);
    let recent = ma[split..].iter().cloned().fold(f64::INFINITY, f64::min);
    before - recent < tol
}

/// Tune a fresh projector on `base` (target already chosen).
pub fn tune(den: &Denoiser, vocab: &Vocabulary, base: &BaseSet, templates: &[Prompt], cfg: &TuneConfig) -> Result<TuneOutcome> {
    tune_on(den, vocab, base, templates, cfg, None)
}

/// As [`tune`], with the denoising loss restricted to latent `coords`.
pub fn tune_on(den: &Denoiser, vocab: &Vocabulary, base: &BaseSet, templates: &[Prompt], cfg: &TuneConfig, coords: Option<&[usize]>) -> Result<TuneOutcome> {
    base.validate()?;
    let target = base.target()?;
    let aux = base.aux_indices()?;
    if cfg.k == 0 || cfg.k > aux.len() {
        return Err(Error::arg(format!("K must lie in 1..={}, got {}", aux.len(), cfg.k)));
    }
    if templates.is_empty() {
        return Err(Error::arg("tuning needs at least one template prompt"));
    }
    if cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0 {
        return Err(Error::arg("loss weights must be non-negative"));
    }
    let n_base = base.prompt_tar.base_indices.len();
    let embeds: Vec<PromptEmbedding> = templates
        .iter()
        .map(|p| {
            if p.base_indices.len() != n_base {
                return Err(Error::arg("every template must carry the target prompt's base words"));
            }
            vocab.embed_prompt(p)
        })
        .collect::<Result<_>>()?;
    let mut rng = rng::from_seed(cfg.seed);
    let mut spec = ProjectorSpec::new(base.entries[0].h.len(), vocab.embed_dim);
    spec.width = cfg.width;
    spec.blocks = cfg.blocks;
    spec.n_outputs = n_base;
    spec.batch_norm = cfg.batch_norm;
    let mut proj = Projector::init(spec, &mut rng)?;
    let mut opt_state = AdamWState::new(&proj.params);
    let opt = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let variants = augment_target(base, cfg.m_aug, cfg.sigma_aug, &mut rng)?;

    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut window_sum = 0.0;
    let mut ma = Vec::new();
    let mut stop = StopReason::MaxSteps;
    for step in 0..cfg.max_steps {
        let tpl = &embeds[rng::uniform_index(&mut rng, embeds.len())];
        let picks = rng::choose_distinct(&mut rng, aux.len(), cfg.k);
        let tar_z = &variants[rng::uniform_index(&mut rng, variants.len())];
        let mut idx = vec![target];
        idx.extend(picks.iter().map(|&p| aux[p]));
        let mut zrows = vec![tar_z.clone()];
        zrows.extend(idx[1..].iter().map(|&i| base.entries[i].z0.clone()));
        let j = rng::uniform_index(&mut rng, base.n());
        let aver_z = if j == target { variants[rng::uniform_index(&mut rng, variants.len())].clone() } else { base.entries[j].z0.clone() };
        let batch = TuneBatch { z: Mat::from_rows(&zrows), h: base.features(&idx), aver_z };
        let (loss, grads) = tune_loss(
            den,
            &mut proj,
            &batch,
            tpl,
            cfg.lambda1,
            cfg.lambda2,
            cfg.noise_draws,
            coords,
            &mut rng,
            BnMode::Batch { update_running: true },
        )
        .map_err(|e| Error::numeric(format!("tuning step {step}: {e}")))?;
        adamw_step(&mut proj.params, &grads, &mut opt_state, &opt).map_err(|e| Error::numeric(format!("tuning step {step}: {e}")))?;
        log.push(TuneLossRow { step, loss_total: loss.total, loss_tar: loss.tar, loss_aux: loss.aux, loss_aver: loss.aver });

        window_sum += loss.total;
        if log.len() > cfg.plateau_window {
            window_sum -= log[log.len() - 1 - cfg.plateau_window].loss_total;
        }
        if log.len() >= cfg.plateau_window {
            ma.push(window_sum / cfg.plateau_window as f64);
            if log.len() >= cfg.min_steps && log.len() < cfg.max_steps && plateaued(&ma, cfg.plateau_patience, cfg.plateau_tol) {
                stop = StopReason::Plateau;
                break;
            }
        }
    }
    Ok(TuneOutcome { projector: proj, optimizer: opt_state, log, stop })
}

/// Moving average of the total loss over `window` steps, one value per
/// completed window.
pub fn moving_average(log: &[TuneLossRow], window: usize) -> Vec<f64> {
    if window == 0 || log.len() < window {
        return Vec::new();
    }
    log.windows(window).map(|w| w.iter().map(|r| r.loss_total).sum::<f64>() / window as f64).collect()
}
