#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use clusterlab::diffusion::{make_schedule, Denoiser, DenoiserSpec, ScheduleKind};
use clusterlab::numcore::ParamTensor;
use clusterlab::rng::{self, LabRng};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` over the listed `(tensor, index)` coordinates.
pub fn fd_params(params: &mut [ParamTensor], coords: &[(usize, usize)], mut f: impl FnMut(&[ParamTensor]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&(p, i)| {
            let x = params[p].data[i];
            params[p].data[i] = x + FD_STEP;
            let up = f(params);
            params[p].data[i] = x - FD_STEP;
            let down = f(params);
            params[p].data[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn all_coords(params: &[ParamTensor]) -> Vec<(usize, usize)> {
    params.iter().enumerate().flat_map(|(p, t)| (0..t.data.len()).map(move |i| (p, i))).collect()
}

/// Up to `k` coordinates drawn without replacement.
pub fn some_coords(params: &[ParamTensor], k: usize, rng: &mut LabRng) -> Vec<(usize, usize)> {
    let all = all_coords(params);
    if all.len() <= k {
        return all;
    }
    rng::choose_distinct(rng, all.len(), k).into_iter().map(|i| all[i]).collect()
}

pub fn pick(grads: &[ParamTensor], coords: &[(usize, usize)]) -> Vec<f64> {
    coords.iter().map(|&(p, i)| grads[p].data[i]).collect()
}

pub fn jitter(params: &mut [ParamTensor], scale: f64, rng: &mut LabRng) {
    for p in params {
        for x in p.data.iter_mut() {
            *x += scale * rng.gen_range(-1.0..1.0);
        }
    }
}

/// A small denoiser with random weights.
pub fn tiny_denoiser(latent_dim: usize, embed_dim: usize, hidden: Vec<usize>, seed: u64) -> Denoiser {
    let mut spec = DenoiserSpec::new(latent_dim, embed_dim, 3.0);
    spec.hidden = hidden;
    spec.feature_layer_index = 0;
    let sched = make_schedule(ScheduleKind::LinearBeta, 100).unwrap();
    let mut r = rng::from_seed(seed);
    let mut den = Denoiser::init(spec, sched, &mut r).unwrap();
    jitter(&mut den.mlp.params, 0.1, &mut r);
    den
}
