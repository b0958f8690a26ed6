use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

/// Cumulative signal levels `alpha_bar[t]` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

pub fn make_schedule(kind: ScheduleKind, t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::arg(format!("schedule needs T >= 2, got {t_max}")));
    }
    let betas: Vec<f64> = match kind {
        // Endpoints scaled so that T=100 covers the same noise range as the
        // usual 1000-step schedule.
        ScheduleKind::LinearBeta => {
            let scale = 1000.0 / t_max as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..t_max)
                .map(|i| (lo + (hi - lo) * i as f64 / (t_max - 1) as f64).min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=t_max).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for b in betas {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    let s = NoiseSchedule { kind, t_max, alpha_bar };
    s.validate()?;
    Ok(s)
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let a = &self.alpha_bar;
        if a.len() != self.t_max + 1 || self.t_max < 2 {
            return Err(Error::dim(format!("schedule with T={} has {} levels", self.t_max, a.len())));
        }
        if a[0] != 1.0 {
            return Err(Error::arg("alpha_bar[0] must be 1"));
        }
        if a.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::arg("alpha_bar must be strictly decreasing"));
        }
        if !(a[self.t_max] > 0.0) {
            return Err(Error::arg("alpha_bar[T] must be positive"));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Variance of `z_prev` given `z_t` and `z_0` when jumping from `t` to `prev`.
    pub fn posterior_variance(&self, t: usize, prev: usize) -> f64 {
        let (a, ap) = (self.alpha_bar[t], self.alpha_bar[prev]);
        let beta = 1.0 - a / ap;
        (1.0 - ap) / (1.0 - a) * beta
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::arg(format!("timestep {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// `z_t = sqrt(abar) z0 + sqrt(1 - abar) eps`.
pub fn forward_noise(z0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if z0.len() != eps.len() {
        return Err(Error::dim(format!("latent has {} entries, noise has {}", z0.len(), eps.len())));
    }
    let a = sched.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect())
}

/// Evenly strided training steps `tau_1 < ... < tau_steps = T`.
pub fn strided_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::arg(format!("cannot take {steps} sampling steps from T={t_max}")));
    }
    Ok((1..=steps).map(|i| (2 * i * t_max + steps) / (2 * steps)).collect())
}
