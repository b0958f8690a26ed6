use std::sync::atomic::{AtomicU64, Ordering};

use super::schedule::{strided_timesteps, NoiseSchedule};
use crate::numcore::{all_finite, Mat};
use crate::par::{map_indexed, ExecMode};
use crate::rng::{self, LabRng};
use crate::{Error, Result};

/// Noise prediction for a batch of chains at timestep `t`.
///
/// `step` counts sampling steps from 1 (noisiest) to `steps` (cleanest).
pub trait Predictor: Sync {
    fn predict(&self, z: &Mat, t: usize, step: usize) -> Result<Mat>;
}

pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&Mat, usize, usize) -> Result<Mat> + Sync,
{
    fn predict(&self, z: &Mat, t: usize, step: usize) -> Result<Mat> {
        (self.0)(z, t, step)
    }
}

/// Chains per batched predictor call. Fixed so results never depend on the
/// execution mode.
pub const CHAIN_BLOCK: usize = 64;

/// Batched denoiser evaluations per sampling step.
#[derive(Debug)]
pub struct CallCounter {
    counts: Vec<AtomicU64>,
}

impl CallCounter {
    pub fn new(steps: usize) -> Self {
        CallCounter { counts: (0..=steps).map(|_| AtomicU64::new(0)).collect() }
    }

    pub fn record(&self, step: usize) {
        if let Some(c) = self.counts.get(step) {
            c.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Counts indexed by step, entry 0 unused.
    pub fn per_step(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn total(&self) -> u64 {
        self.per_step().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainBatch {
    pub z0: Mat,
    /// States from the initial noise to `z_0`, `steps + 1` entries.
    pub trajectory: Option<Vec<Mat>>,
}

fn run_block(
    pred: &dyn Predictor,
    sched: &NoiseSchedule,
    taus: &[usize],
    rngs: &mut [LabRng],
    dim: usize,
    keep: bool,
) -> Result<(Mat, Option<Vec<Mat>>)> {
    let n = rngs.len();
    let steps = taus.len();
    let mut z = Mat::zeros(n, dim);
    for (r, g) in rngs.iter_mut().enumerate() {
        rng::fill_normal(g, z.row_mut(r));
    }
    let mut traj = keep.then(|| vec![z.clone()]);
    for i in (1..=steps).rev() {
        let step = steps - i + 1;
        let t = taus[i - 1];
        let prev = if i > 1 { taus[i - 2] } else { 0 };
        let e = pred.predict(&z, t, step)?;
        if e.rows != n || e.cols != dim {
            return Err(Error::dim(format!("predictor returned {}x{} for {}x{} at step {step}", e.rows, e.cols, n, dim)));
        }
        let a = sched.alpha_bar(t);
        let ap = sched.alpha_bar(prev);
        let beta = 1.0 - a / ap;
        let c_x0 = ap.sqrt() * beta / (1.0 - a);
        let c_z = (1.0 - beta).sqrt() * (1.0 - ap) / (1.0 - a);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let sd = if i > 1 { beta.sqrt() } else { 0.0 };
        for (r, g) in rngs.iter_mut().enumerate() {
            let zr = z.row_mut(r);
            let er = e.row(r);
            for j in 0..dim {
                let x0 = (zr[j] - sb * er[j]) / sa;
                zr[j] = c_x0 * x0 + c_z * zr[j];
            }
            if i > 1 {
                for x in zr.iter_mut() {
                    *x += sd * rng::normal(g);
                }
            }
        }
        if !all_finite(&z.data) {
            return Err(Error::numeric(format!("sampler state became non-finite at step {step}")));
        }
        if let Some(tr) = traj.as_mut() {
            tr.push(z.clone());
        }
    }
    Ok((z, traj))
}

/// Ancestral sampling of a single chain; returns the trajectory from the
/// initial noise down to `z_0`.
pub fn sample(pred: &dyn Predictor, sched: &NoiseSchedule, steps: usize, dim: usize, rng: &mut LabRng) -> Result<Vec<Vec<f64>>> {
    let taus = strided_timesteps(sched.t_max, steps)?;
    let mut rngs = [rng.clone()];
    let (_, traj) = run_block(pred, sched, &taus, &mut rngs, dim, true)?;
    *rng = rngs[0].clone();
    Ok(traj.unwrap().into_iter().map(|m| m.data).collect())
}

/// `n` independent chains; chain `i` draws from stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn sample_chains(
    pred: &dyn Predictor,
    sched: &NoiseSchedule,
    steps: usize,
    dim: usize,
    n: usize,
    seed: u64,
    mode: ExecMode,
    keep_trajectory: bool,
) -> Result<ChainBatch> {
    let taus = strided_timesteps(sched.t_max, steps)?;
    let nblocks = n.div_ceil(CHAIN_BLOCK);
    let blocks = map_indexed(mode, nblocks, |b| {
        let lo = b * CHAIN_BLOCK;
        let hi = (lo + CHAIN_BLOCK).min(n);
        let mut rngs: Vec<LabRng> = (lo..hi).map(|i| rng::stream(seed, i as u64)).collect();
        run_block(pred, sched, &taus, &mut rngs, dim, keep_trajectory)
    });
    let mut z0 = Mat::zeros(n, dim);
    let mut trajectory = keep_trajectory.then(|| vec![Mat::zeros(n, dim); steps + 1]);
    for (b, res) in blocks.into_iter().enumerate() {
        let (zb, tb) = res?;
        let lo = b * CHAIN_BLOCK * dim;
        z0.data[lo..lo + zb.data.len()].copy_from_slice(&zb.data);
        if let (Some(all), Some(tb)) = (trajectory.as_mut(), tb) {
            for (dst, src) in all.iter_mut().zip(tb) {
                dst.data[lo..lo + src.data.len()].copy_from_slice(&src.data);
            }
        }
    }
    Ok(ChainBatch { z0, trajectory })
}
