use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, sample_chains, strided_timesteps, Denoiser, FnPredictor};
use crate::numcore::Mat;
use crate::par::ExecMode;
use crate::rng::{self, LabRng};
use crate::semantics::{Prompt, Vocabulary};
use crate::world::WorldSpec;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseEntry {
    pub z0: Vec<f64>,
    /// State entering the final sampling step; `h` is read from it.
    pub z1: Vec<f64>,
    pub h: Vec<f64>,
    /// World sub-cluster, recorded for evaluation only.
    pub subcluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSet {
    pub version: u32,
    pub entries: Vec<BaseEntry>,
    pub target_index: Option<usize>,
    pub prompt_tar: Prompt,
    /// Timestep and pooled condition at which features were taken.
    pub feature_t: usize,
    pub feature_cond: Vec<f64>,
    pub cfg_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseSetConfig {
    pub n: usize,
    pub cfg_scale: f64,
    pub steps: usize,
}

impl Default for BaseSetConfig {
    fn default() -> Self {
        BaseSetConfig { n: 11, cfg_scale: 1.0, steps: 30 }
    }
}

impl BaseSet {
    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn target(&self) -> Result<usize> {
        self.target_index.ok_or_else(|| Error::arg("base set has no target; choose one first"))
    }

    pub fn aux_indices(&self) -> Result<Vec<usize>> {
        let t = self.target()?;
        Ok((0..self.n()).filter(|&i| i != t).collect())
    }

    pub fn features(&self, idx: &[usize]) -> Mat {
        Mat::from_rows(&idx.iter().map(|&i| self.entries[i].h.clone()).collect::<Vec<_>>())
    }

    /// Recompute features from the stored `z1`, in one batch as at generation.
    pub fn recompute_features(&self, den: &Denoiser) -> Result<Mat> {
        let z1 = Mat::from_rows(&self.entries.iter().map(|e| e.z1.clone()).collect::<Vec<_>>());
        den.features(&z1, self.feature_t, &self.feature_cond)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() < 2 {
            return Err(Error::arg("a base set needs at least two entries"));
        }
        if let Some(t) = self.target_index {
            if t >= self.entries.len() {
                return Err(Error::arg(format!("target index {t} out of range")));
            }
        }
        let hd = self.entries[0].h.len();
        if self.entries.iter().any(|e| e.h.len() != hd || e.z0.len() != self.entries[0].z0.len()) {
            return Err(Error::dim("base set entries have inconsistent widths"));
        }
        self.prompt_tar.validate()
    }
}

/// Sample `n` proposals for `prompt_tar` with classifier-free guidance and
/// record each one's feature at the final (least noisy) step.
pub fn generate_base_set(
    den: &Denoiser,
    vocab: &Vocabulary,
    world: &WorldSpec,
    prompt_tar: &Prompt,
    cfg: &BaseSetConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<BaseSet> {
    if cfg.n < 2 {
        return Err(Error::arg(format!("base set needs N >= 2, got {}", cfg.n)));
    }
    if prompt_tar.base_indices.is_empty() {
        return Err(Error::arg("target prompt has no base word"));
    }
    let cond = vocab.embed_prompt(prompt_tar)?.pooled();
    let empty = vec![0.0; vocab.embed_dim];
    let s = cfg.cfg_scale;
    let pred = FnPredictor(|z: &Mat, t: usize, _step: usize| {
        let e0 = den.predict(z, t, &empty)?;
        let ec = den.predict(z, t, &cond)?;
        Ok(cfg_combine(&e0, &ec, s))
    });
    let batch = sample_chains(&pred, &den.schedule, cfg.steps, den.spec.latent_dim, cfg.n, seed, mode, true)?;
    let traj = batch.trajectory.unwrap();
    let z1 = &traj[cfg.steps - 1];
    let feature_t = strided_timesteps(den.schedule.t_max, cfg.steps)?[0];
    let h = den.features(z1, feature_t, &cond)?;
    let subject = prompt_tar.subject_key();
    let context = prompt_tar.context_token().ok_or_else(|| Error::arg("target prompt has no context token"))?;
    let mix = world.mixture_at(world.subject_index(&subject)?, world.context_index(context)?, 1.0);
    let entries = (0..cfg.n)
        .map(|i| BaseEntry {
            z0: batch.z0.row(i).to_vec(),
            z1: z1.row(i).to_vec(),
            h: h.row(i).to_vec(),
            subcluster: mix.argmax(batch.z0.row(i)),
        })
        .collect();
    Ok(BaseSet {
        version: crate::io::FORMAT_VERSION,
        entries,
        target_index: None,
        prompt_tar: prompt_tar.clone(),
        feature_t,
        feature_cond: cond,
        cfg_scale: s,
    })
}

/// Mark the target: the given index, or one drawn uniformly.
pub fn choose_target(base: &BaseSet, index: Option<usize>, rng: &mut LabRng) -> Result<BaseSet> {
    let t = match index {
        Some(i) if i < base.n() => i,
        Some(i) => return Err(Error::arg(format!("target index {i} outside 0..{}", base.n()))),
        None => rng::uniform_index(rng, base.n()),
    };
    let mut out = base.clone();
    out.target_index = Some(t);
    Ok(out)
}

/// `m` jittered copies of the target latent; all share the target feature.
pub fn augment_target(base: &BaseSet, m: usize, sigma: f64, rng: &mut LabRng) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::arg("need at least one target variant"));
    }
    let z = &base.entries[base.target()?].z0;
    Ok((0..m).map(|_| z.iter().map(|x| x + sigma * rng::normal(rng)).collect()).collect())
}
