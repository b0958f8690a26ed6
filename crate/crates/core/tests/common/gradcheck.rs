//! Finite-difference gradient cases, shared with the acceptance run.

use std::time::Instant;

use clusterlab::diffusion::{denoise_loss, TrainExample};
use clusterlab::numcore::{mlp_backward, mlp_forward, Activation, Mat, Mlp, MlpSpec};
use clusterlab::rng;
use clusterlab::semantics::PromptEmbedding;
use clusterlab::tune::{tune_loss, BnMode, Projector, ProjectorSpec, TuneBatch};
use rand::Rng;

use super::*;

pub const TOL: f64 = 1e-5;

pub fn mlp_case(seed: u64) -> f64 {
    let mut r = rng::from_seed(seed);
    let depth = 1 + r.gen_range(0..3);
    let widths: Vec<usize> = (0..=depth + 1).map(|_| 2 + r.gen_range(0..6)).collect();
    let act = if seed % 2 == 0 { Activation::SiLU } else { Activation::Tanh };
    let spec = MlpSpec::new(widths.clone(), act, 0).unwrap();
    let mut net = Mlp::init(spec.clone(), &mut r).unwrap();
    jitter(&mut net.params, 0.2, &mut r);
    let x = rng::normal_vec(&mut r, widths[0]);
    let up = rng::normal_vec(&mut r, *widths.last().unwrap());
    let (grads, dx) = mlp_backward(&spec, &net.params, &x, &up).unwrap();
    let f = |p: &[clusterlab::numcore::ParamTensor], x: &[f64]| -> f64 {
        let (y, _) = mlp_forward(&spec, p, x).unwrap();
        y.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let coords = all_coords(&net.params);
    let fd = fd_params(&mut net.params, &coords, |p| f(p, &x));
    let mut err = rel_err(&pick(&grads, &coords), &fd);
    let fdx: Vec<f64> = (0..x.len())
        .map(|i| {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += FD_STEP;
            b[i] -= FD_STEP;
            (f(&net.params, &a) - f(&net.params, &b)) / (2.0 * FD_STEP)
        })
        .collect();
    err = err.max(rel_err(&dx, &fdx));
    err
}

pub fn denoiser_case(seed: u64) -> f64 {
    let mut r = rng::from_seed(100 + seed);
    let (d, m) = (2 + (seed as usize % 3), 3);
    let mut den = tiny_denoiser(d, m, vec![12, 10], seed);
    let batch: Vec<TrainExample> = (0..5)
        .map(|_| TrainExample {
            z0: rng::normal_vec(&mut r, d).iter().map(|x| 3.0 * x).collect(),
            cond: rng::normal_vec(&mut r, m),
            t: 1 + r.gen_range(0..100),
            eps: rng::normal_vec(&mut r, d),
        })
        .collect();
    let (_, grads) = denoise_loss(&den, &batch).unwrap();
    let coords = all_coords(&den.mlp.params);
    let mut params = den.mlp.params.clone();
    let fd = fd_params(&mut params, &coords, |p| {
        den.mlp.params = p.to_vec();
        denoise_loss(&den, &batch).unwrap().0
    });
    rel_err(&pick(&grads, &coords), &fd)
}

pub fn projector_case(seed: u64) -> f64 {
    let mut r = rng::from_seed(200 + seed);
    let mut spec = ProjectorSpec::new(5, 3);
    spec.width = 6;
    spec.blocks = 2;
    spec.n_outputs = 1 + (seed as usize % 2);
    spec.batch_norm = seed % 4 != 3;
    let mode = if seed % 3 == 0 { BnMode::Running } else { BnMode::Batch { update_running: false } };
    let mut proj = Projector::init(spec.clone(), &mut r).unwrap();
    jitter(&mut proj.params, 0.3, &mut r);
    for v in proj.running_mean.iter_mut().flatten() {
        *v = r.gen_range(-0.5..0.5);
    }
    for v in proj.running_var.iter_mut().flatten() {
        *v = r.gen_range(0.5..2.0);
    }
    let rows = 4;
    let h = Mat::from_vec(rows, 5, rng::normal_vec(&mut r, rows * 5));
    let c = Mat::from_vec(rows, 3, rng::normal_vec(&mut r, rows * 3));
    let w = rng::normal_vec(&mut r, rows * spec.output_dim());
    let cache = proj.forward(&h, &c, mode).unwrap();
    let grads = proj.backward(&cache, &Mat::from_vec(rows, spec.output_dim(), w.clone())).unwrap();
    let coords = all_coords(&proj.params);
    let mut params = proj.params.clone();
    let fd = fd_params(&mut params, &coords, |p| {
        proj.params = p.to_vec();
        let out = proj.evaluate(&h, &c, mode).unwrap();
        out.data.iter().zip(&w).map(|(a, b)| a * b).sum()
    });
    rel_err(&pick(&grads, &coords), &fd)
}

pub fn tune_case(seed: u64) -> f64 {
    let mut r = rng::from_seed(300 + seed);
    let (d, m) = (2, 3);
    let den = tiny_denoiser(d, m, vec![10, 8], 50 + seed);
    let mut spec = ProjectorSpec::new(8, m);
    spec.width = 6;
    spec.blocks = 2;
    spec.n_outputs = 1 + (seed as usize % 2);
    let mut proj = Projector::init(spec.clone(), &mut r).unwrap();
    jitter(&mut proj.params, 0.3, &mut r);
    let b = 4;
    let batch = TuneBatch {
        z: Mat::from_vec(b, d, rng::normal_vec(&mut r, b * d)),
        h: Mat::from_vec(b, 8, rng::normal_vec(&mut r, b * 8)),
        aver_z: rng::normal_vec(&mut r, d),
    };
    let n_base = spec.n_outputs;
    let tokens: Vec<Vec<f64>> = (0..n_base + 1).map(|_| rng::normal_vec(&mut r, m)).collect();
    let template = PromptEmbedding { tokens, base_indices: (0..n_base).collect() };
    let coords_mask: Option<Vec<usize>> = (seed % 2 == 1).then(|| vec![1]);
    let draw_seed = 400 + seed;
    let mode = BnMode::Batch { update_running: false };
    let (_, grads) = tune_loss(&den, &mut proj, &batch, &template, 0.5, 0.2, 3, coords_mask.as_deref(), &mut rng::from_seed(draw_seed), mode).unwrap();
    let coords = some_coords(&proj.params, 150, &mut r);
    let mut params = proj.params.clone();
    let fd = fd_params(&mut params, &coords, |p| {
        proj.params = p.to_vec();
        tune_loss(&den, &mut proj, &batch, &template, 0.5, 0.2, 3, coords_mask.as_deref(), &mut rng::from_seed(draw_seed), mode).unwrap().0.total
    });
    rel_err(&pick(&grads, &coords), &fd)
}

/// Configurations checked, worst relative error, seconds.
pub fn run_suite() -> (usize, f64, f64) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut n = 0;
    for s in 0..8 {
        worst = worst.max(mlp_case(s)).max(projector_case(s));
        n += 2;
    }
    for s in 0..4 {
        worst = worst.max(denoiser_case(s)).max(tune_case(s));
        n += 2;
    }
    (n, worst, start.elapsed().as_secs_f64())
}
