//! World-oracle checks, shared with the acceptance run.

use clusterlab::diffusion::{make_schedule, ScheduleKind};
use clusterlab::rng;
use clusterlab::world::*;
use rand::Rng;

pub const CONTEXTS: [&str; 5] = ["plain", "beach", "forest", "city", "snow"];
pub const SUBJECTS: [&str; 2] = ["subject_a", "subject_b"];

/// Largest `|score - central difference of log density|` over random probes.
pub fn score_fd_worst(probes: usize, seed: u64) -> f64 {
    let world = make_default_world(0);
    let sched = make_schedule(ScheduleKind::LinearBeta, 100).unwrap();
    let mut r = rng::from_seed(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let (s, c) = (SUBJECTS[r.gen_range(0..2)], CONTEXTS[r.gen_range(0..5)]);
        let t = r.gen_range(0..=100);
        let z = vec![r.gen_range(-12.0..12.0), r.gen_range(-6.0..6.0)];
        let score = score_t(&world, s, c, &z, t, &sched).unwrap();
        for j in 0..2 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (log_density_t(&world, s, c, &a, t, &sched).unwrap() - log_density_t(&world, s, c, &b, t, &sched).unwrap()) / (2.0 * h);
            worst = worst.max((fd - score[j]).abs());
        }
    }
    worst
}

/// Largest `|sum of posteriors - 1|`, far into the tails included.
pub fn posterior_sum_worst(probes: usize, seed: u64) -> f64 {
    let world = make_default_world(0);
    let sched = make_schedule(ScheduleKind::Cosine, 100).unwrap();
    let mut r = rng::from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let t = r.gen_range(0..=100);
        let z = vec![r.gen_range(-30.0..30.0), r.gen_range(-30.0..30.0)];
        let p = cluster_posterior_t(&world, SUBJECTS[r.gen_range(0..2)], CONTEXTS[r.gen_range(0..5)], &z, t, &sched).unwrap();
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    worst
}

/// Midpoint-rule mass of the time-`t` density on `[-18, 18]^2`.
pub fn grid_mass(t: usize) -> f64 {
    let world = make_default_world(0);
    let sched = make_schedule(ScheduleKind::LinearBeta, 100).unwrap();
    let step = 0.02;
    let n = (36.0 / step) as usize;
    let mut total = 0.0;
    for i in 0..n {
        let x = -18.0 + (i as f64 + 0.5) * step;
        for j in 0..n {
            let y = -18.0 + (j as f64 + 0.5) * step;
            total += log_density_t(&world, "subject_a", "city", &[x, y], t, &sched).unwrap().exp();
        }
    }
    total * step * step
}
