//! Ground-truth latent world: subjects made of Gaussian identity sub-clusters,
//! shifted by context offsets.
//!
//! Under the forward process a component `N(mu + delta, var I)` becomes
//! `N(sqrt(abar)(mu + delta), (abar var + 1 - abar) I)`, so densities, scores
//! and sub-cluster posteriors are available in closed form at every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Predictor};
use crate::numcore::Mat;
use crate::rng::{self, LabRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubClusterSpec {
    pub mean: Vec<f64>,
    pub weight: f64,
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub token: String,
    pub subclusters: Vec<SubClusterSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub token: String,
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub latent_dim: usize,
    pub subjects: Vec<SubjectSpec>,
    pub contexts: Vec<ContextSpec>,
    pub seed: u64,
}

pub const DEFAULT_RADIUS: f64 = 4.0;
pub const DEFAULT_SIGMA_SUB: f64 = 0.5;
pub const DEFAULT_SUBJECT_OFFSET: f64 = 6.0;
pub const DEFAULT_CONTEXTS: [(&str, [f64; 2]); 5] = [
    ("plain", [0.0, 0.0]),
    ("beach", [0.8, 0.3]),
    ("forest", [-0.5, 0.7]),
    ("city", [0.2, -0.9]),
    ("snow", [-0.7, -0.4]),
];

/// Two subjects, each with four equal-weight sub-clusters on a circle of
/// radius 4 around its center, and five context offsets (the first is null).
///
/// The geometry is fixed; the seed is recorded and keys the vocabulary.
pub fn make_default_world(seed: u64) -> WorldSpec {
    let centers = [("subject_a", -DEFAULT_SUBJECT_OFFSET), ("subject_b", DEFAULT_SUBJECT_OFFSET)];
    let subjects = centers
        .iter()
        .map(|&(token, cx)| SubjectSpec {
            token: token.to_string(),
            subclusters: (0..4)
                .map(|k| {
                    let a = 0.3 + k as f64 * std::f64::consts::FRAC_PI_2;
                    SubClusterSpec {
                        mean: vec![cx + DEFAULT_RADIUS * a.cos(), DEFAULT_RADIUS * a.sin()],
                        weight: 0.25,
                        var: DEFAULT_SIGMA_SUB * DEFAULT_SIGMA_SUB,
                    }
                })
                .collect(),
        })
        .collect();
    let contexts = DEFAULT_CONTEXTS
        .iter()
        .map(|(t, o)| ContextSpec { token: t.to_string(), offset: o.to_vec() })
        .collect();
    WorldSpec { latent_dim: 2, subjects, contexts, seed }
}

/// A time-`t` mixture restricted to one subject and context.
#[derive(Clone, Debug)]
pub struct TimeMixture {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<f64>,
    pub log_weights: Vec<f64>,
}

/// Per-component quantities at a point.
struct Eval {
    log_joint: Vec<f64>,
    log_density: f64,
    posterior: Vec<f64>,
    scores: Vec<Vec<f64>>,
}

impl TimeMixture {
    fn eval(&self, z: &[f64]) -> Eval {
        let d = z.len() as f64;
        let n = self.means.len();
        let mut log_joint = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for k in 0..n {
            let v = self.vars[k];
            let mut sq = 0.0;
            let mut s = Vec::with_capacity(z.len());
            for (x, m) in z.iter().zip(&self.means[k]) {
                let r = x - m;
                sq += r * r;
                s.push(-r / v);
            }
            log_joint.push(self.log_weights[k] - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * sq / v);
            scores.push(s);
        }
        let mx = log_joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = log_joint.iter().map(|l| (l - mx).exp()).sum();
        let log_density = mx + sum.ln();
        let posterior = log_joint.iter().map(|l| (l - log_density).exp()).collect();
        Eval { log_joint, log_density, posterior, scores }
    }

    fn marginal_score(e: &Eval) -> Vec<f64> {
        let d = e.scores[0].len();
        let mut s = vec![0.0; d];
        for (r, sk) in e.posterior.iter().zip(&e.scores) {
            for j in 0..d {
                s[j] += r * sk[j];
            }
        }
        s
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.eval(z).log_density
    }

    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        Self::marginal_score(&self.eval(z))
    }

    pub fn posterior(&self, z: &[f64]) -> Vec<f64> {
        self.eval(z).posterior
    }

    /// `grad log p(S_k | z) = s_k(z) - s(z)`.
    pub fn log_posterior_grad(&self, z: &[f64], k: usize) -> Vec<f64> {
        let e = self.eval(z);
        let s = Self::marginal_score(&e);
        e.scores[k].iter().zip(&s).map(|(a, b)| a - b).collect()
    }

    /// `s + eta1 (s_tar - s) - eta2 sum_{i != tar} (s_i - s)`, collected per
    /// score so that `eta1 = 1, eta2 = 0` gives `s_tar` exactly.
    pub fn guided_score(&self, z: &[f64], target: usize, eta1: f64, eta2: f64) -> Vec<f64> {
        let e = self.eval(z);
        let s = Self::marginal_score(&e);
        let n_aux = (e.scores.len() - 1) as f64;
        let c_marg = 1.0 - eta1 + eta2 * n_aux;
        let d = z.len();
        let mut aux_sum = vec![0.0; d];
        for (k, sk) in e.scores.iter().enumerate() {
            if k != target {
                for j in 0..d {
                    aux_sum[j] += sk[j];
                }
            }
        }
        (0..d).map(|j| c_marg * s[j] + eta1 * e.scores[target][j] - eta2 * aux_sum[j]).collect()
    }

    /// Index of the most probable component; near-exact ties go to the lowest index.
    pub fn argmax(&self, z: &[f64]) -> usize {
        let e = self.eval(z);
        let mx = e.log_joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        e.log_joint.iter().position(|&l| l >= mx - TIE_TOLERANCE).unwrap()
    }
}

/// Log-density gap below which two components count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim;
        if d == 0 {
            return Err(Error::arg("latent_dim must be positive"));
        }
        if self.subjects.is_empty() || self.contexts.is_empty() {
            return Err(Error::arg("a world needs at least one subject and one context"));
        }
        let mut tokens: Vec<&str> = Vec::new();
        for s in &self.subjects {
            if s.subclusters.is_empty() {
                return Err(Error::arg(format!("subject `{}` has no sub-clusters", s.token)));
            }
            let mut total = 0.0;
            for (k, c) in s.subclusters.iter().enumerate() {
                if c.mean.len() != d {
                    return Err(Error::dim(format!("subjects.{}.subclusters.{k}.mean has {} entries, latent_dim is {d}", s.token, c.mean.len())));
                }
                if !(c.weight > 0.0) || !(c.var > 0.0) {
                    return Err(Error::arg(format!("subjects.{}.subclusters.{k} needs positive weight and var", s.token)));
                }
                total += c.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::arg(format!("sub-cluster weights of `{}` sum to {total}", s.token)));
            }
            tokens.push(&s.token);
        }
        for c in &self.contexts {
            if c.offset.len() != d {
                return Err(Error::dim(format!("contexts.{}.offset has {} entries, latent_dim is {d}", c.token, c.offset.len())));
            }
            tokens.push(&c.token);
        }
        let mut sorted = tokens.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::arg(format!("duplicate token `{}`", w[0])));
        }
        Ok(())
    }

    pub fn subject_index(&self, token: &str) -> Result<usize> {
        self.subjects.iter().position(|s| s.token == token).ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn context_index(&self, token: &str) -> Result<usize> {
        self.contexts.iter().position(|c| c.token == token).ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn n_subclusters(&self, subject: usize) -> usize {
        self.subjects[subject].subclusters.len()
    }

    /// Clean-data sub-cluster center including the context offset.
    pub fn shifted_mean(&self, subject: usize, context: usize, k: usize) -> Vec<f64> {
        let off = &self.contexts[context].offset;
        self.subjects[subject].subclusters[k].mean.iter().zip(off).map(|(m, o)| m + o).collect()
    }

    pub fn mixture_at(&self, subject: usize, context: usize, alpha_bar: f64) -> TimeMixture {
        let sa = alpha_bar.sqrt();
        let s = &self.subjects[subject];
        TimeMixture {
            means: (0..s.subclusters.len())
                .map(|k| self.shifted_mean(subject, context, k).iter().map(|x| sa * x).collect())
                .collect(),
            vars: s.subclusters.iter().map(|c| alpha_bar * c.var + 1.0 - alpha_bar).collect(),
            log_weights: s.subclusters.iter().map(|c| c.weight.ln()).collect(),
        }
    }

    pub fn mixture_t(&self, subject: &str, context: &str, t: usize, sched: &NoiseSchedule) -> Result<TimeMixture> {
        sched.check_t(t)?;
        Ok(self.mixture_at(self.subject_index(subject)?, self.context_index(context)?, sched.alpha_bar(t)))
    }

    pub fn sample_indexed(&self, subject: usize, context: usize, subcluster: Option<usize>, rng: &mut LabRng) -> Result<(Vec<f64>, usize)> {
        let s = self.subjects.get(subject).ok_or_else(|| Error::arg(format!("subject index {subject} out of range")))?;
        let k = match subcluster {
            Some(k) if k < s.subclusters.len() => k,
            Some(k) => return Err(Error::arg(format!("sub-cluster {k} out of range"))),
            None => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = s.subclusters.len() - 1;
                for (k, c) in s.subclusters.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            }
        };
        let sd = s.subclusters[k].var.sqrt();
        let z = self.shifted_mean(subject, context, k).iter().map(|m| m + sd * rng::normal(rng)).collect();
        Ok((z, k))
    }

    /// Root-mean-square clean coordinate over all subjects, components and contexts.
    pub fn data_scale(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for (si, s) in self.subjects.iter().enumerate() {
            for ci in 0..self.contexts.len() {
                for (k, c) in s.subclusters.iter().enumerate() {
                    let m = self.shifted_mean(si, ci, k);
                    acc += m.iter().map(|x| x * x).sum::<f64>() / self.latent_dim as f64 + c.var;
                    n += 1.0;
                }
            }
        }
        (acc / n).sqrt()
    }
}

pub fn sample_world(world: &WorldSpec, subject: &str, context: &str, rng: &mut LabRng, subcluster: Option<usize>) -> Result<(Vec<f64>, usize)> {
    world.sample_indexed(world.subject_index(subject)?, world.context_index(context)?, subcluster, rng)
}

fn check_dim(world: &WorldSpec, z: &[f64]) -> Result<()> {
    if z.len() != world.latent_dim {
        return Err(Error::dim(format!("point has {} coordinates, world has {}", z.len(), world.latent_dim)));
    }
    Ok(())
}

pub fn log_density_t(world: &WorldSpec, subject: &str, context: &str, z: &[f64], t: usize, sched: &NoiseSchedule) -> Result<f64> {
    check_dim(world, z)?;
    Ok(world.mixture_t(subject, context, t, sched)?.log_density(z))
}

pub fn score_t(world: &WorldSpec, subject: &str, context: &str, z: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(world, z)?;
    Ok(world.mixture_t(subject, context, t, sched)?.score(z))
}

pub fn cluster_posterior_t(world: &WorldSpec, subject: &str, context: &str, z: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(world, z)?;
    Ok(world.mixture_t(subject, context, t, sched)?.posterior(z))
}

#[allow(clippy::too_many_arguments)]
pub fn cluster_log_posterior_grad(world: &WorldSpec, subject: &str, context: &str, z: &[f64], t: usize, k: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(world, z)?;
    let mix = world.mixture_t(subject, context, t, sched)?;
    if k >= mix.means.len() {
        return Err(Error::arg(format!("sub-cluster {k} out of range")));
    }
    Ok(mix.log_posterior_grad(z, k))
}

/// Exact cluster-guided noise prediction
/// `-sigma_t [grad log p + eta1 grad log p(S_tar|z) - eta2 sum_aux grad log p(S_i|z)]`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_guided_score(
    world: &WorldSpec,
    subject: &str,
    context: &str,
    z: &[f64],
    t: usize,
    target_k: usize,
    eta1: f64,
    eta2: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(world, z)?;
    let mix = world.mixture_t(subject, context, t, sched)?;
    if target_k >= mix.means.len() {
        return Err(Error::arg(format!("target sub-cluster {target_k} out of range")));
    }
    let sigma = sched.sigma(t);
    Ok(mix.guided_score(z, target_k, eta1, eta2).iter().map(|s| -sigma * s).collect())
}

pub fn assign_subcluster(world: &WorldSpec, subject: &str, context: &str, z0: &[f64]) -> Result<usize> {
    check_dim(world, z0)?;
    Ok(world.mixture_at(world.subject_index(subject)?, world.context_index(context)?, 1.0).argmax(z0))
}

/// Sampler predictor backed by the exact guided score.
#[derive(Clone, Debug)]
pub struct OraclePredictor<'a> {
    pub world: &'a WorldSpec,
    pub sched: &'a NoiseSchedule,
    pub subject: usize,
    pub context: usize,
    pub target: usize,
    pub eta1: f64,
    pub eta2: f64,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(world: &'a WorldSpec, sched: &'a NoiseSchedule, subject: &str, context: &str, target: usize, eta1: f64, eta2: f64) -> Result<Self> {
        let subject = world.subject_index(subject)?;
        let context = world.context_index(context)?;
        if target >= world.n_subclusters(subject) {
            return Err(Error::arg(format!("target sub-cluster {target} out of range")));
        }
        Ok(OraclePredictor { world, sched, subject, context, target, eta1, eta2 })
    }
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, z: &Mat, t: usize, _step: usize) -> Result<Mat> {
        let mix = self.world.mixture_at(self.subject, self.context, self.sched.alpha_bar(t));
        let sigma = self.sched.sigma(t);
        let mut out = Mat::zeros(z.rows, z.cols);
        for r in 0..z.rows {
            let g = mix.guided_score(z.row(r), self.target, self.eta1, self.eta2);
            for (o, s) in out.row_mut(r).iter_mut().zip(g) {
                *o = -sigma * s;
            }
        }
        Ok(out)
    }
}

/// Several 2D subjects side by side in one latent vector. Joint component
/// `j` enumerates the per-part components in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductWorld {
    pub joint: WorldSpec,
    /// One single-subject world per part, sharing the context tokens.
    pub parts: Vec<WorldSpec>,
}

impl ProductWorld {
    pub fn joint_token(tokens: &[&str]) -> String {
        tokens.join("+")
    }

    pub fn part_tokens(&self) -> Vec<String> {
        self.parts.iter().map(|p| p.subjects[0].token.clone()).collect()
    }

    pub fn part_range(&self, part: usize) -> std::ops::Range<usize> {
        let start: usize = self.parts[..part].iter().map(|p| p.latent_dim).sum();
        start..start + self.parts[part].latent_dim
    }

    /// Per-part component indices of joint component `j`.
    pub fn split_component(&self, mut j: usize) -> Vec<usize> {
        let mut out = vec![0; self.parts.len()];
        for p in (0..self.parts.len()).rev() {
            let n = self.parts[p].n_subclusters(0);
            out[p] = j % n;
            j /= n;
        }
        out
    }

    pub fn assign_part(&self, part: usize, context: &str, z: &[f64]) -> Result<usize> {
        let w = &self.parts[part];
        assign_subcluster(w, &w.subjects[0].token, context, &z[self.part_range(part)])
    }
}

/// Concatenate the named subjects of `world` into one joint subject. Context
/// offsets are repeated in every part.
pub fn make_product_world(world: &WorldSpec, subjects: &[&str]) -> Result<ProductWorld> {
    world.validate()?;
    if subjects.len() < 2 {
        return Err(Error::arg("a product world needs at least two subjects"));
    }
    let parts: Vec<WorldSpec> = subjects
        .iter()
        .map(|t| {
            Ok(WorldSpec {
                latent_dim: world.latent_dim,
                subjects: vec![world.subjects[world.subject_index(t)?].clone()],
                contexts: world.contexts.clone(),
                seed: world.seed,
            })
        })
        .collect::<Result<_>>()?;
    let var = parts[0].subjects[0].subclusters[0].var;
    if parts.iter().flat_map(|p| &p.subjects[0].subclusters).any(|c| c.var != var) {
        return Err(Error::arg("product worlds need one shared sub-cluster variance"));
    }
    let mut comps: Vec<SubClusterSpec> = vec![SubClusterSpec { mean: vec![], weight: 1.0, var }];
    for p in &parts {
        let mut next = Vec::new();
        for c in &comps {
            for s in &p.subjects[0].subclusters {
                let mut mean = c.mean.clone();
                mean.extend(&s.mean);
                next.push(SubClusterSpec { mean, weight: c.weight * s.weight, var });
            }
        }
        comps = next;
    }
    let contexts = world
        .contexts
        .iter()
        .map(|c| ContextSpec { token: c.token.clone(), offset: c.offset.repeat(parts.len()) })
        .collect();
    let joint = WorldSpec {
        latent_dim: world.latent_dim * parts.len(),
        subjects: vec![SubjectSpec { token: ProductWorld::joint_token(subjects), subclusters: comps }],
        contexts,
        seed: world.seed,
    };
    Ok(ProductWorld { joint, parts })
}
