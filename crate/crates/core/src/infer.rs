//! Cluster-guided sampling from a tuned projector.

use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, sample_chains, CallCounter, Denoiser, FnPredictor, Predictor, CHAIN_BLOCK};
use crate::numcore::Mat;
use crate::par::ExecMode;
use crate::semantics::{offset_base, Prompt, PromptEmbedding, Vocabulary};
use crate::tune::{BaseSet, BnMode, Projector, TuneConfig, TuneOutcome};
use crate::world::WorldSpec;
use crate::{Error, Result};

/// Condition used by plain guidance outside the cluster-guidance window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPrompt {
    /// The prompt with the target offset applied.
    Tuned,
    /// The unmodified prompt.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub v: f64,
    /// Inclusive range of sampling steps that receive cluster guidance;
    /// step 1 is the noisiest.
    pub window: (usize, usize),
    pub fallback_scale: f64,
    pub fallback_prompt: FallbackPrompt,
    /// Use the average condition in place of the empty one.
    pub aver_as_empty: bool,
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta1: 8.5,
            eta2: 1.0,
            v: 0.8,
            window: (1, 20),
            fallback_scale: 7.5,
            fallback_prompt: FallbackPrompt::Tuned,
            aver_as_empty: false,
            steps: 30,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.window;
        // An empty window is written (0, 0).
        let empty = a == 0 && b == 0;
        if !empty && (a < 1 || b < a || b > self.steps) {
            return Err(Error::arg(format!("window {a}..={b} outside steps 1..={}", self.steps)));
        }
        if !(self.eta1 >= 0.0) || !(self.eta2 >= 0.0) {
            return Err(Error::arg("guidance scales must be non-negative"));
        }
        Ok(())
    }

    pub fn in_window(&self, step: usize) -> bool {
        step >= self.window.0 && step <= self.window.1 && self.window.0 >= 1
    }
}

/// Per-prompt target and average offsets, one per base word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetContext {
    pub delta_tar: Vec<Vec<f64>>,
    pub delta_aver: Vec<Vec<f64>>,
}

impl TargetContext {
    /// Same context with base word `slot` left unmodified.
    pub fn without_slot(&self, slot: usize) -> TargetContext {
        let mut out = self.clone();
        out.delta_tar[slot].iter_mut().for_each(|x| *x = 0.0);
        out.delta_aver[slot].iter_mut().for_each(|x| *x = 0.0);
        out
    }

    /// Same context with every base word but `slot` left unmodified.
    pub fn only_slot(&self, slot: usize) -> TargetContext {
        let mut out = self.clone();
        for j in (0..out.delta_tar.len()).filter(|&j| j != slot) {
            out = out.without_slot(j);
        }
        out
    }
}

/// Target offset from the target feature and average offset over every
/// auxiliary feature, for prompt `c_sub`.
pub fn build_representations(proj: &Projector, base: &BaseSet, c_sub: &PromptEmbedding) -> Result<TargetContext> {
    if c_sub.base_indices.len() != proj.spec.n_outputs {
        return Err(Error::arg(format!(
            "prompt has {} base words but the projector was tuned for {}; subjects cannot be added after tuning",
            c_sub.base_indices.len(),
            proj.spec.n_outputs
        )));
    }
    let target = base.target()?;
    let aux = base.aux_indices()?;
    let pooled = c_sub.pooled();
    let tar_out = proj.evaluate(&base.features(&[target]), &Mat::from_rows(&[pooled.clone()]), BnMode::Running)?;
    let aux_out = proj.evaluate(&base.features(&aux), &Mat::from_rows(&vec![pooled; aux.len()]), BnMode::Running)?;
    let mut aver = vec![0.0; proj.spec.output_dim()];
    for i in 0..aux_out.rows {
        for (a, v) in aver.iter_mut().zip(aux_out.row(i)) {
            *a += v;
        }
    }
    for a in aver.iter_mut() {
        *a /= aux_out.rows as f64;
    }
    Ok(TargetContext { delta_tar: proj.split_offsets(tar_out.row(0)), delta_aver: proj.split_offsets(&aver) })
}

/// Pooled conditions the guided predictor needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedConditions {
    pub tar: Vec<f64>,
    pub aver: Vec<f64>,
    pub raw: Vec<f64>,
    pub empty: Vec<f64>,
}

impl GuidedConditions {
    pub fn new(ctx: &TargetContext, c_sub: &PromptEmbedding, v: f64) -> Result<Self> {
        Ok(GuidedConditions {
            tar: offset_base(c_sub, &ctx.delta_tar, v)?.pooled(),
            aver: offset_base(c_sub, &ctx.delta_aver, v)?.pooled(),
            raw: c_sub.pooled(),
            empty: vec![0.0; c_sub.tokens[0].len()],
        })
    }
}

/// `eps(c0) + eta1 [eps(c'_tar) - eps(c0)] - eta2 [eps(c'_aver) - eps(c0)]`
/// inside the window, plain guidance outside it.
///
/// The in-window sum is evaluated as
/// `cfg(e0, et, eta1 - eta2) + eta2 (et - ea)`, which equals the formula
/// above and reduces exactly to plain guidance whenever `et == ea`. With
/// `eta2 = 0` the average branch is never evaluated.
pub fn cluster_guided_predict(
    den: &Denoiser,
    conds: &GuidedConditions,
    z: &Mat,
    t: usize,
    gcfg: &GuidanceConfig,
    step: usize,
    counter: Option<&CallCounter>,
) -> Result<Mat> {
    if step < 1 || step > gcfg.steps {
        return Err(Error::arg(format!("step {step} outside 1..={}", gcfg.steps)));
    }
    let eval = |c: &[f64]| {
        if let Some(cc) = counter {
            cc.record(step);
        }
        den.predict(z, t, c)
    };
    if !gcfg.in_window(step) {
        let c = match gcfg.fallback_prompt {
            FallbackPrompt::Tuned => &conds.tar,
            FallbackPrompt::Raw => &conds.raw,
        };
        let e0 = eval(&conds.empty)?;
        let ec = eval(c)?;
        return Ok(cfg_combine(&e0, &ec, gcfg.fallback_scale));
    }
    let (eta1, eta2) = (gcfg.eta1, gcfg.eta2);
    let e0 = eval(if gcfg.aver_as_empty { &conds.aver } else { &conds.empty })?;
    let et = eval(&conds.tar)?;
    if eta2 == 0.0 {
        return Ok(cfg_combine(&e0, &et, eta1));
    }
    let ea_own;
    let ea = if gcfg.aver_as_empty {
        &e0
    } else {
        ea_own = eval(&conds.aver)?;
        &ea_own
    };
    let mut out = cfg_combine(&e0, &et, eta1 - eta2);
    for ((o, &b), &c) in out.data.iter_mut().zip(&et.data).zip(&ea.data) {
        *o += eta2 * (b - c);
    }
    Ok(out)
}

pub struct ClusterGuidedPredictor<'a> {
    pub den: &'a Denoiser,
    pub conds: GuidedConditions,
    pub gcfg: GuidanceConfig,
    pub counter: CallCounter,
}

impl<'a> ClusterGuidedPredictor<'a> {
    pub fn new(den: &'a Denoiser, conds: GuidedConditions, gcfg: GuidanceConfig) -> Self {
        let counter = CallCounter::new(gcfg.steps);
        ClusterGuidedPredictor { den, conds, gcfg, counter }
    }
}

impl Predictor for ClusterGuidedPredictor<'_> {
    fn predict(&self, z: &Mat, t: usize, step: usize) -> Result<Mat> {
        cluster_guided_predict(self.den, &self.conds, z, t, &self.gcfg, step, Some(&self.counter))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub z0: Vec<Vec<f64>>,
    pub subclusters: Vec<usize>,
    /// Batched denoiser evaluations per step and per chain block; entry 0 unused.
    pub calls_per_step: Vec<f64>,
}

fn assign_all(world: &WorldSpec, prompt: &Prompt, z0: &Mat) -> Result<Vec<usize>> {
    let subject = world.subject_index(&prompt.subject_key())?;
    let context = world.context_index(prompt.context_token().ok_or_else(|| Error::arg("prompt has no context token"))?)?;
    let mix = world.mixture_at(subject, context, 1.0);
    Ok((0..z0.rows).map(|i| mix.argmax(z0.row(i))).collect())
}

/// Guided chains for `prompt_sub` given precomputed offsets.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_context(
    den: &Denoiser,
    vocab: &Vocabulary,
    world: &WorldSpec,
    ctx: &TargetContext,
    prompt_sub: &Prompt,
    gcfg: &GuidanceConfig,
    n: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<SampleOutput> {
    gcfg.validate()?;
    if n == 0 {
        return Err(Error::arg("n_samples must be positive"));
    }
    let c_sub = vocab.embed_prompt(prompt_sub)?;
    let pred = ClusterGuidedPredictor::new(den, GuidedConditions::new(ctx, &c_sub, gcfg.v)?, gcfg.clone());
    let out = sample_chains(&pred, &den.schedule, gcfg.steps, den.spec.latent_dim, n, seed, mode, false)?;
    let blocks = n.div_ceil(CHAIN_BLOCK) as f64;
    Ok(SampleOutput {
        subclusters: assign_all(world, prompt_sub, &out.z0)?,
        z0: out.z0.to_rows(),
        calls_per_step: pred.counter.per_step().iter().map(|&c| c as f64 / blocks).collect(),
    })
}

/// Guided chains where the offset of base word `j` only acts on latent
/// coordinates `regions[j]`: each region takes its prediction from the
/// conditions carrying that word's offset alone. Regions must partition the
/// latent coordinates.
#[allow(clippy::too_many_arguments)]
pub fn sample_masked(
    den: &Denoiser,
    vocab: &Vocabulary,
    world: &WorldSpec,
    ctx: &TargetContext,
    prompt_sub: &Prompt,
    regions: &[Vec<usize>],
    gcfg: &GuidanceConfig,
    n: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<SampleOutput> {
    gcfg.validate()?;
    if n == 0 {
        return Err(Error::arg("n_samples must be positive"));
    }
    let d = den.spec.latent_dim;
    if regions.len() != ctx.delta_tar.len() {
        return Err(Error::arg(format!("{} regions for {} base words", regions.len(), ctx.delta_tar.len())));
    }
    let mut seen = vec![false; d];
    for &j in regions.iter().flatten() {
        if j >= d || seen[j] {
            return Err(Error::arg("regions must partition the latent coordinates"));
        }
        seen[j] = true;
    }
    if seen.iter().any(|&x| !x) {
        return Err(Error::arg("regions must partition the latent coordinates"));
    }
    let c_sub = vocab.embed_prompt(prompt_sub)?;
    let conds: Vec<GuidedConditions> = (0..regions.len()).map(|j| GuidedConditions::new(&ctx.only_slot(j), &c_sub, gcfg.v)).collect::<Result<_>>()?;
    let counter = CallCounter::new(gcfg.steps);
    let pred = FnPredictor(|z: &Mat, t: usize, step: usize| {
        let mut out = Mat::zeros(z.rows, d);
        for (region, cond) in regions.iter().zip(&conds) {
            let e = cluster_guided_predict(den, cond, z, t, gcfg, step, Some(&counter))?;
            for r in 0..z.rows {
                for &j in region {
                    out.row_mut(r)[j] = e.row(r)[j];
                }
            }
        }
        Ok(out)
    });
    let out = sample_chains(&pred, &den.schedule, gcfg.steps, d, n, seed, mode, false)?;
    let blocks = n.div_ceil(CHAIN_BLOCK) as f64;
    Ok(SampleOutput {
        subclusters: assign_all(world, prompt_sub, &out.z0)?,
        z0: out.z0.to_rows(),
        calls_per_step: counter.per_step().iter().map(|&c| c as f64 / blocks).collect(),
    })
}

/// Build offsets for `prompt_sub` from the tuned projector, then sample.
#[allow(clippy::too_many_arguments)]
pub fn sample_consistent(
    den: &Denoiser,
    proj: &Projector,
    base: &BaseSet,
    vocab: &Vocabulary,
    world: &WorldSpec,
    prompt_sub: &Prompt,
    gcfg: &GuidanceConfig,
    n: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<SampleOutput> {
    let ctx = build_representations(proj, base, &vocab.embed_prompt(prompt_sub)?)?;
    sample_with_context(den, vocab, world, &ctx, prompt_sub, gcfg, n, seed, mode)
}

/// Plain classifier-free guidance on an unmodified prompt; scale 1 is the
/// unguided conditional baseline.
#[allow(clippy::too_many_arguments)]
pub fn sample_plain(
    den: &Denoiser,
    vocab: &Vocabulary,
    world: &WorldSpec,
    prompt: &Prompt,
    scale: f64,
    steps: usize,
    n: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<SampleOutput> {
    if n == 0 {
        return Err(Error::arg("n_samples must be positive"));
    }
    let cond = vocab.embed_prompt(prompt)?.pooled();
    let empty = vec![0.0; vocab.embed_dim];
    let counter = CallCounter::new(steps);
    let pred = FnPredictor(|z: &Mat, t: usize, step: usize| {
        counter.record(step);
        counter.record(step);
        let e0 = den.predict(z, t, &empty)?;
        let ec = den.predict(z, t, &cond)?;
        Ok(cfg_combine(&e0, &ec, scale))
    });
    let out = sample_chains(&pred, &den.schedule, steps, den.spec.latent_dim, n, seed, mode, false)?;
    let blocks = n.div_ceil(CHAIN_BLOCK) as f64;
    Ok(SampleOutput {
        subclusters: assign_all(world, prompt, &out.z0)?,
        z0: out.z0.to_rows(),
        calls_per_step: counter.per_step().iter().map(|&c| c as f64 / blocks).collect(),
    })
}

/// Joint tuning for a prompt naming several subjects: one projector whose
/// head emits an offset per base word. A single base word is the ordinary
/// single-subject pipeline.
pub fn multi_subject_variant1(den: &Denoiser, vocab: &Vocabulary, base: &BaseSet, contexts: &[&str], cfg: &TuneConfig) -> Result<TuneOutcome> {
    if base.prompt_tar.base_indices.is_empty() {
        return Err(Error::arg("prompt has no base word"));
    }
    let templates = crate::tune::templates_for(&base.prompt_tar, contexts)?;
    crate::tune::tune(den, vocab, base, &templates, cfg)
}

/// Tune a single-output projector for base word `slot` of a multi-subject
/// prompt; only that word is offset during tuning. `coords` are the latent
/// coordinates the subject occupies; the loss ignores the rest, standing in
/// for the subject mask.
pub fn tune_slot(
    den: &Denoiser,
    vocab: &Vocabulary,
    base: &BaseSet,
    slot: usize,
    coords: Option<&[usize]>,
    contexts: &[&str],
    cfg: &TuneConfig,
) -> Result<TuneOutcome> {
    let bi = *base
        .prompt_tar
        .base_indices
        .get(slot)
        .ok_or_else(|| Error::arg(format!("prompt has no base word {slot}")))?;
    let mut scoped = base.clone();
    scoped.prompt_tar.base_indices = vec![bi];
    let templates = crate::tune::templates_for(&scoped.prompt_tar, contexts)?;
    crate::tune::tune_on(den, vocab, &scoped, &templates, cfg, coords)
}

/// Offsets for a multi-subject prompt from independently tuned projectors;
/// member `j` touches only base word `j`. Members can be appended later.
pub fn multi_subject_variant2(members: &[(&Projector, &BaseSet)], c_sub: &PromptEmbedding) -> Result<TargetContext> {
    if members.len() != c_sub.base_indices.len() {
        return Err(Error::arg(format!("{} projectors for {} base words", members.len(), c_sub.base_indices.len())));
    }
    let mut delta_tar = Vec::with_capacity(members.len());
    let mut delta_aver = Vec::with_capacity(members.len());
    for (j, (proj, base)) in members.iter().enumerate() {
        if proj.spec.n_outputs != 1 {
            return Err(Error::arg(format!("projector {j} emits {} offsets, expected 1", proj.spec.n_outputs)));
        }
        let single = PromptEmbedding { tokens: c_sub.tokens.clone(), base_indices: vec![c_sub.base_indices[j]] };
        let ctx = build_representations(proj, base, &single)?;
        delta_tar.push(ctx.delta_tar[0].clone());
        delta_aver.push(ctx.delta_aver[0].clone());
    }
    Ok(TargetContext { delta_tar, delta_aver })
}
