//! Capture-rate evaluation, parameter sweeps and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::infer::{
    multi_subject_variant1, multi_subject_variant2, sample_consistent, sample_masked, sample_plain, tune_slot, GuidanceConfig, SampleOutput,
};
use crate::io::{write_csv, write_json, FORMAT_VERSION};
use crate::par::ExecMode;
use crate::rng;
use crate::semantics::{Prompt, Vocabulary};
use crate::tune::{choose_target, generate_base_set, BaseSet, BaseSetConfig, Projector, TuneConfig};
use crate::world::{ProductWorld, WorldSpec};
use crate::{Error, Result};

/// Fraction of assignments equal to `target_k`.
pub fn capture_fraction(assignments: &[usize], target_k: usize) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::arg("capture rate of an empty sample set"));
    }
    Ok(assignments.iter().filter(|&&a| a == target_k).count() as f64 / assignments.len() as f64)
}

pub fn capture_rate(samples: &[Vec<f64>], world: &WorldSpec, subject: &str, context: &str, target_k: usize) -> Result<f64> {
    let assignments = samples
        .iter()
        .map(|z| crate::world::assign_subcluster(world, subject, context, z))
        .collect::<Result<Vec<_>>>()?;
    capture_fraction(&assignments, target_k)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance of samples to the context-shifted target center.
pub fn consistency(samples: &[Vec<f64>], center: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|z| dist(z, center)).sum::<f64>() / samples.len() as f64
}

/// Mean pairwise distance among the samples that landed in the target.
pub fn diversity(samples: &[Vec<f64>], assignments: &[usize], target_k: usize) -> f64 {
    let inside: Vec<&Vec<f64>> = samples.iter().zip(assignments).filter(|(_, &a)| a == target_k).map(|(z, _)| z).collect();
    let n = inside.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += dist(inside[i], inside[j]);
        }
    }
    acc / (n * (n - 1) / 2) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub axis_value: String,
    pub seed: u64,
    pub context: String,
    pub capture: f64,
    pub consistency: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub context: String,
    pub mean_capture: f64,
    pub std_capture: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub target_subcluster: usize,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub config: Option<GuidanceConfig>,
    pub rows: Vec<EvalRow>,
    pub per_context: Vec<ContextSummary>,
    pub mean_capture: f64,
}

/// Everything needed to sample from a tuned model.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub den: &'a Denoiser,
    pub vocab: &'a Vocabulary,
    pub world: &'a WorldSpec,
    pub proj: &'a Projector,
    pub base: &'a BaseSet,
}

impl Pipeline<'_> {
    pub fn target_subcluster(&self) -> Result<usize> {
        Ok(self.base.entries[self.base.target()?].subcluster)
    }
}

/// Sampling seed for one (seed, context) cell.
pub fn cell_seed(seed: u64, context: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(context as u64)
}

fn summarize(rows: &[EvalRow], contexts: &[&str]) -> (Vec<ContextSummary>, f64) {
    let per_context: Vec<ContextSummary> = contexts
        .iter()
        .map(|c| {
            let caps: Vec<f64> = rows.iter().filter(|r| r.context == *c).map(|r| r.capture).collect();
            let n = caps.len() as f64;
            let mean = caps.iter().sum::<f64>() / n;
            let var = caps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            ContextSummary { context: c.to_string(), mean_capture: mean, std_capture: var.sqrt() }
        })
        .collect();
    let mean = rows.iter().map(|r| r.capture).sum::<f64>() / rows.len() as f64;
    (per_context, mean)
}

fn run_grid<F>(pipe: &Pipeline, contexts: &[&str], n: usize, seeds: &[u64], axis_value: &str, sampler: F) -> Result<(Vec<EvalRow>, usize)>
where
    F: Fn(&crate::semantics::Prompt, u64) -> Result<SampleOutput>,
{
    if n == 0 {
        return Err(Error::arg("n_samples must be positive"));
    }
    if seeds.is_empty() || contexts.is_empty() {
        return Err(Error::arg("evaluation needs at least one seed and one context"));
    }
    let target = pipe.target_subcluster()?;
    let subject = pipe.world.subject_index(&pipe.base.prompt_tar.subject_key())?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for (ci, ctx) in contexts.iter().enumerate() {
            let prompt = pipe.base.prompt_tar.with_context(ctx)?;
            let out = sampler(&prompt, cell_seed(seed, ci))?;
            let center = pipe.world.shifted_mean(subject, pipe.world.context_index(ctx)?, target);
            rows.push(EvalRow {
                axis_value: axis_value.to_string(),
                seed,
                context: ctx.to_string(),
                capture: capture_fraction(&out.subclusters, target)?,
                consistency: consistency(&out.z0, &center),
                diversity: diversity(&out.z0, &out.subclusters, target),
            });
        }
    }
    Ok((rows, target))
}

/// Guided sampling for every context and seed.
pub fn evaluate(pipe: &Pipeline, contexts: &[&str], gcfg: &GuidanceConfig, n: usize, seeds: &[u64], mode: ExecMode) -> Result<EvalReport> {
    evaluate_labeled(pipe, contexts, gcfg, n, seeds, mode, "none")
}

fn evaluate_labeled(pipe: &Pipeline, contexts: &[&str], gcfg: &GuidanceConfig, n: usize, seeds: &[u64], mode: ExecMode, label: &str) -> Result<EvalReport> {
    let (rows, target) = run_grid(pipe, contexts, n, seeds, label, |p, s| {
        sample_consistent(pipe.den, pipe.proj, pipe.base, pipe.vocab, pipe.world, p, gcfg, n, s, mode)
    })?;
    let (per_context, mean_capture) = summarize(&rows, contexts);
    Ok(EvalReport { version: FORMAT_VERSION, target_subcluster: target, n_samples: n, seeds: seeds.to_vec(), config: Some(gcfg.clone()), rows, per_context, mean_capture })
}

/// Plain guidance on the raw prompt; `scale = 1` is the unguided baseline.
pub fn evaluate_plain(pipe: &Pipeline, contexts: &[&str], scale: f64, steps: usize, n: usize, seeds: &[u64], mode: ExecMode) -> Result<EvalReport> {
    let (rows, target) = run_grid(pipe, contexts, n, seeds, &format!("cfg{scale}"), |p, s| {
        sample_plain(pipe.den, pipe.vocab, pipe.world, p, scale, steps, n, s, mode)
    })?;
    let (per_context, mean_capture) = summarize(&rows, contexts);
    Ok(EvalReport { version: FORMAT_VERSION, target_subcluster: target, n_samples: n, seeds: seeds.to_vec(), config: None, rows, per_context, mean_capture })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    V,
    Eta1,
    Eta2,
    Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Scalar(f64),
    Window(usize, usize),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Scalar(x) => format!("{x}"),
            SweepValue::Window(a, b) => format!("{a}-{b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
    /// Seeds per value.
    pub repeats: usize,
}

/// Gap kept between the two cluster scales on the eta2 axis.
pub const ETA_GAP: f64 = 7.5;

impl SweepSpec {
    pub fn default_for(axis: SweepAxis) -> SweepSpec {
        let values = match axis {
            SweepAxis::V => vec![0.0, 0.4, 0.8].into_iter().map(SweepValue::Scalar).collect(),
            SweepAxis::Eta1 => vec![1.0, 4.0, 7.5, 8.5, 10.0].into_iter().map(SweepValue::Scalar).collect(),
            SweepAxis::Eta2 => vec![0.0, 0.5, 1.0, 2.0].into_iter().map(SweepValue::Scalar).collect(),
            SweepAxis::Window => vec![(1, 10), (1, 20), (1, 30), (11, 30), (21, 30)]
                .into_iter()
                .map(|(a, b)| SweepValue::Window(a, b))
                .collect(),
        };
        SweepSpec { axis, values, repeats: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.repeats == 0 {
            return Err(Error::arg("a sweep needs values and at least one repeat"));
        }
        for v in &self.values {
            match (self.axis, v) {
                (SweepAxis::Window, SweepValue::Window(..)) => {}
                (SweepAxis::Window, _) => return Err(Error::arg("window sweeps take [start, end] pairs")),
                (_, SweepValue::Scalar(_)) => {}
                _ => return Err(Error::arg("scalar axes take numbers")),
            }
        }
        Ok(())
    }

    /// Guidance settings for one sweep value.
    pub fn apply(&self, base: &GuidanceConfig, value: &SweepValue) -> GuidanceConfig {
        let mut g = base.clone();
        match (self.axis, *value) {
            (SweepAxis::V, SweepValue::Scalar(x)) => g.v = x,
            (SweepAxis::Eta1, SweepValue::Scalar(x)) => g.eta1 = x,
            (SweepAxis::Eta2, SweepValue::Scalar(x)) => {
                g.eta2 = x;
                g.eta1 = x + ETA_GAP;
            }
            (SweepAxis::Window, SweepValue::Window(a, b)) => g.window = (a, b),
            _ => unreachable!("validated sweep"),
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis_value: String,
    pub config: GuidanceConfig,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub version: u32,
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    pub fn capture(&self, label: &str) -> Option<f64> {
        self.points.iter().find(|p| p.axis_value == label).map(|p| p.report.mean_capture)
    }
}

pub fn sweep(spec: &SweepSpec, pipe: &Pipeline, contexts: &[&str], base_cfg: &GuidanceConfig, n: usize, first_seed: u64, mode: ExecMode) -> Result<SweepTable> {
    spec.validate()?;
    let seeds: Vec<u64> = (0..spec.repeats as u64).map(|i| first_seed + i).collect();
    let points = spec
        .values
        .iter()
        .map(|v| {
            let cfg = spec.apply(base_cfg, v);
            let label = v.label();
            let report = evaluate_labeled(pipe, contexts, &cfg, n, &seeds, mode, &label)?;
            Ok(SweepPoint { axis_value: label, config: cfg, report })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { version: FORMAT_VERSION, axis: spec.axis, points })
}

/// JSON with full fidelity plus the flat CSV table.
pub fn write_report(report: &EvalReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    write_json(json_path, report)?;
    write_csv(csv_path, &report.rows)
}

pub fn write_sweep(table: &SweepTable, json_path: &Path, csv_path: &Path) -> Result<()> {
    write_json(json_path, table)?;
    let rows: Vec<EvalRow> = table.points.iter().flat_map(|p| p.report.rows.clone()).collect();
    write_csv(csv_path, &rows)
}

/// Per-subject capture rates of the two-subject experiment, averaged over
/// contexts. Each variant is compared with the unguided capture of its own
/// targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSubjectReport {
    pub version: u32,
    pub targets_v1: Vec<usize>,
    pub targets_v2: Vec<usize>,
    pub baseline_v1: Vec<f64>,
    pub variant1: Vec<f64>,
    pub baseline_v2: Vec<f64>,
    pub variant2: Vec<f64>,
    /// Variant 2 with the last subject's projector removed.
    pub ablation: Vec<f64>,
}

fn part_capture(pw: &ProductWorld, context: &str, z0: &[Vec<f64>], part: usize, target: usize) -> Result<f64> {
    let mut hit = 0usize;
    for z in z0 {
        if pw.assign_part(part, context, z)? == target {
            hit += 1;
        }
    }
    Ok(hit as f64 / z0.len() as f64)
}

/// Prompt `prompt` names every part of `pw`. Variant 1 tunes one projector
/// with an offset per base word on a joint base set. Variant 2 tunes one
/// projector per subject on its own base set, restricting the loss and the
/// guidance of subject `j` to its latent coordinates.
#[allow(clippy::too_many_arguments)]
pub fn multi_subject_experiment(
    den: &Denoiser,
    vocab: &Vocabulary,
    pw: &ProductWorld,
    prompt: &Prompt,
    tcfg: &TuneConfig,
    gcfg: &GuidanceConfig,
    n: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<MultiSubjectReport> {
    let parts = pw.parts.len();
    if prompt.base_indices.len() != parts {
        return Err(Error::arg(format!("prompt names {} subjects, the world has {parts}", prompt.base_indices.len())));
    }
    let contexts: Vec<&str> = pw.joint.contexts.iter().map(|c| c.token.as_str()).collect();
    let bcfg = BaseSetConfig::default();
    let mut pick = rng::stream(seed, 1);
    let base = choose_target(&generate_base_set(den, vocab, &pw.joint, prompt, &bcfg, seed, mode)?, None, &mut pick)?;
    let targets_v1 = pw.split_component(base.entries[base.target()?].subcluster);
    let v1 = multi_subject_variant1(den, vocab, &base, &contexts, tcfg)?;

    let mut members = Vec::with_capacity(parts);
    let mut targets_v2 = Vec::with_capacity(parts);
    for slot in 0..parts {
        let b = generate_base_set(den, vocab, &pw.joint, prompt, &bcfg, seed + 10 + slot as u64, mode)?;
        let b = choose_target(&b, None, &mut pick)?;
        targets_v2.push(pw.split_component(b.entries[b.target()?].subcluster)[slot]);
        let coords: Vec<usize> = pw.part_range(slot).collect();
        let p = tune_slot(den, vocab, &b, slot, Some(&coords), &contexts, tcfg)?.projector;
        members.push((p, b));
    }
    let refs: Vec<(&Projector, &BaseSet)> = members.iter().map(|(p, b)| (p, b)).collect();
    let regions: Vec<Vec<usize>> = (0..parts).map(|p| pw.part_range(p).collect()).collect();

    let mut acc = vec![vec![0.0; parts]; 5];
    for (ci, c) in contexts.iter().enumerate() {
        let pc = prompt.with_context(c)?;
        let s = cell_seed(seed, ci);
        let plain = sample_plain(den, vocab, &pw.joint, &pc, 1.0, gcfg.steps, n, s, mode)?;
        let g1 = sample_consistent(den, &v1.projector, &base, vocab, &pw.joint, &pc, gcfg, n, s, mode)?;
        let ctx2 = multi_subject_variant2(&refs, &vocab.embed_prompt(&pc)?)?;
        let g2 = sample_masked(den, vocab, &pw.joint, &ctx2, &pc, &regions, gcfg, n, s, mode)?;
        let g2a = sample_masked(den, vocab, &pw.joint, &ctx2.without_slot(parts - 1), &pc, &regions, gcfg, n, s, mode)?;
        for part in 0..parts {
            acc[0][part] += part_capture(pw, c, &plain.z0, part, targets_v1[part])?;
            acc[1][part] += part_capture(pw, c, &g1.z0, part, targets_v1[part])?;
            acc[2][part] += part_capture(pw, c, &plain.z0, part, targets_v2[part])?;
            acc[3][part] += part_capture(pw, c, &g2.z0, part, targets_v2[part])?;
            acc[4][part] += part_capture(pw, c, &g2a.z0, part, targets_v2[part])?;
        }
    }
    let k = contexts.len() as f64;
    let mut rows = acc.into_iter().map(|r| r.into_iter().map(|x| x / k).collect::<Vec<f64>>());
    Ok(MultiSubjectReport {
        version: FORMAT_VERSION,
        targets_v1,
        targets_v2,
        baseline_v1: rows.next().unwrap(),
        variant1: rows.next().unwrap(),
        baseline_v2: rows.next().unwrap(),
        variant2: rows.next().unwrap(),
        ablation: rows.next().unwrap(),
    })
}
