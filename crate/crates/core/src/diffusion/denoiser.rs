use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::io::FORMAT_VERSION;
use crate::numcore::{Activation, AdamWState, Mat, Mlp, MlpSpec, ParamTensor, Trace};
use crate::rng::LabRng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub feature_layer_index: usize,
    /// Typical per-coordinate scale of clean data; the latent input is divided
    /// by `sqrt(abar s^2 + 1 - abar)` so it has roughly unit variance at every t.
    pub data_scale: f64,
}

impl DenoiserSpec {
    pub fn new(latent_dim: usize, embed_dim: usize, data_scale: f64) -> Self {
        DenoiserSpec {
            latent_dim,
            embed_dim,
            time_embed_dim: 8,
            hidden: vec![128, 128, 128],
            activation: Activation::SiLU,
            feature_layer_index: 1,
            data_scale,
        }
    }

    pub fn input_width(&self) -> usize {
        self.latent_dim + self.time_embed_dim + self.embed_dim
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::arg("time embedding width must be even"));
        }
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.latent_dim);
        MlpSpec::new(widths, self.activation, self.feature_layer_index)
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden[self.feature_layer_index]
    }
}

/// Sinusoidal features of `t / T` at octave frequencies.
pub fn time_embedding(t: usize, t_max: usize, dim: usize, out: &mut [f64]) {
    let x = t as f64 / t_max as f64;
    let half = dim / 2;
    for f in 0..half {
        let w = (1u64 << f) as f64 * std::f64::consts::PI * x;
        out[f] = w.sin();
        out[half + f] = w.cos();
    }
}

/// Noise-prediction network `eps(z_t, t, c)` over pooled conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub spec: DenoiserSpec,
    pub mlp: Mlp,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCheckpoint {
    pub version: u32,
    pub spec: DenoiserSpec,
    pub params: Vec<ParamTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_state: Option<AdamWState>,
    pub schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn init(spec: DenoiserSpec, schedule: NoiseSchedule, rng: &mut LabRng) -> Result<Self> {
        let mlp = Mlp::init(spec.mlp_spec()?, rng)?;
        Ok(Denoiser { spec, mlp, schedule })
    }

    pub fn checkpoint(&self, optimizer_state: Option<AdamWState>) -> DenoiserCheckpoint {
        DenoiserCheckpoint {
            version: FORMAT_VERSION,
            spec: self.spec.clone(),
            params: self.mlp.params.clone(),
            optimizer_state,
            schedule: self.schedule.clone(),
        }
    }

    pub fn from_checkpoint(ck: DenoiserCheckpoint) -> Result<(Self, Option<AdamWState>)> {
        if ck.version != FORMAT_VERSION {
            return Err(Error::arg(format!("unsupported checkpoint version {}", ck.version)));
        }
        for p in &ck.params {
            p.validate()?;
        }
        ck.schedule.validate()?;
        let mlp = Mlp::from_parts(ck.spec.mlp_spec()?, ck.params)?;
        Ok((Denoiser { spec: ck.spec, mlp, schedule: ck.schedule }, ck.optimizer_state))
    }

    fn input_scale(&self, t: usize) -> f64 {
        let a = self.schedule.alpha_bar(t);
        let s2 = self.spec.data_scale * self.spec.data_scale;
        1.0 / (a * s2 + 1.0 - a).sqrt()
    }

    fn write_row(&self, z: &[f64], t: usize, cond: &[f64], row: &mut [f64]) {
        let (d, k) = (self.spec.latent_dim, self.spec.time_embed_dim);
        let s = self.input_scale(t);
        for (o, x) in row[..d].iter_mut().zip(z) {
            *o = x * s;
        }
        time_embedding(t, self.schedule.t_max, k, &mut row[d..d + k]);
        row[d + k..].copy_from_slice(cond);
    }

    fn check(&self, z: &Mat, cond_len: usize) -> Result<()> {
        if z.cols != self.spec.latent_dim {
            return Err(Error::dim(format!("denoiser expects latent dim {}, got {}", self.spec.latent_dim, z.cols)));
        }
        if cond_len != self.spec.embed_dim {
            return Err(Error::dim(format!("denoiser expects condition dim {}, got {}", self.spec.embed_dim, cond_len)));
        }
        Ok(())
    }

    /// Network input for a batch sharing one timestep and one condition.
    pub fn input_shared(&self, z: &Mat, t: usize, cond: &[f64]) -> Result<Mat> {
        self.check(z, cond.len())?;
        self.schedule.check_t(t)?;
        let mut x = Mat::zeros(z.rows, self.spec.input_width());
        for r in 0..z.rows {
            self.write_row(z.row(r), t, cond, x.row_mut(r));
        }
        Ok(x)
    }

    /// Network input where every row has its own timestep and condition.
    pub fn input_rows(&self, z: &Mat, ts: &[usize], conds: &Mat) -> Result<Mat> {
        self.check(z, conds.cols)?;
        if ts.len() != z.rows || conds.rows != z.rows {
            return Err(Error::dim("per-row timesteps and conditions must match the batch"));
        }
        let mut x = Mat::zeros(z.rows, self.spec.input_width());
        for r in 0..z.rows {
            self.schedule.check_t(ts[r])?;
            self.write_row(z.row(r), ts[r], conds.row(r), x.row_mut(r));
        }
        Ok(x)
    }

    pub fn predict(&self, z: &Mat, t: usize, cond: &[f64]) -> Result<Mat> {
        self.mlp.predict(&self.input_shared(z, t, cond)?)
    }

    pub fn predict_rows(&self, z: &Mat, ts: &[usize], conds: &Mat) -> Result<Mat> {
        self.mlp.predict(&self.input_rows(z, ts, conds)?)
    }

    pub fn trace_rows(&self, z: &Mat, ts: &[usize], conds: &Mat) -> Result<Trace> {
        self.mlp.forward_batch(&self.input_rows(z, ts, conds)?)
    }

    /// Hidden activation at the exported feature layer.
    pub fn features(&self, z: &Mat, t: usize, cond: &[f64]) -> Result<Mat> {
        let tr = self.mlp.forward_batch(&self.input_shared(z, t, cond)?)?;
        Ok(tr.post[self.spec.feature_layer_index].clone())
    }

    /// Columns of an input gradient that belong to the condition.
    pub fn condition_grad(&self, input_grad: &Mat) -> Mat {
        let off = self.spec.latent_dim + self.spec.time_embed_dim;
        let m = self.spec.embed_dim;
        let mut g = Mat::zeros(input_grad.rows, m);
        for r in 0..input_grad.rows {
            g.row_mut(r).copy_from_slice(&input_grad.row(r)[off..off + m]);
        }
        g
    }
}

/// `e0 + s (ec - e0)`, evaluated as `(1 - s) e0 + s ec` so that s = 0 and
/// s = 1 return the two inputs bit for bit.
pub fn cfg_combine(e_uncond: &Mat, e_cond: &Mat, s: f64) -> Mat {
    assert_eq!(e_uncond.data.len(), e_cond.data.len());
    let data = e_uncond.data.iter().zip(&e_cond.data).map(|(&e0, &ec)| (1.0 - s) * e0 + s * ec).collect();
    Mat { rows: e_uncond.rows, cols: e_uncond.cols, data }
}

/// Classifier-free guided noise prediction.
pub fn cfg_predict(den: &Denoiser, z: &Mat, t: usize, c: &[f64], c_empty: &[f64], s: f64) -> Result<Mat> {
    let e0 = den.predict(z, t, c_empty)?;
    let ec = den.predict(z, t, c)?;
    Ok(cfg_combine(&e0, &ec, s))
}
