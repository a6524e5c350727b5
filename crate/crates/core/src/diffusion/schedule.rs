use crate::error::{invalid, mismatch, Result};
use crate::grid::Grid3;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Noise levels of a discrete diffusion process, indexed by `t` in `0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 0`.
    posterior_variance: Vec<f64>,
}

/// Linear `beta` from `beta_start` (at `t = 0`) to `beta_end` (at `t = T - 1`).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let posterior_variance = (0..steps)
        .map(|t| {
            if t == 0 {
                0.0
            } else {
                betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])
            }
        })
        .collect();
    Ok(DiffusionSchedule {
        beta_start,
        beta_end,
        betas,
        alphas,
        alpha_bars,
        posterior_variance,
    })
}

impl DiffusionSchedule {
    /// The standard 1000-step schedule with its betas multiplied by
    /// `1000 / steps`, which keeps the terminal noise level comparable for
    /// short desk-scale schedules. Needs `steps > 20` so every beta stays
    /// below one.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        if steps <= 20 {
            return Err(invalid(format!(
                "scaled schedule needs more than 20 steps, got {steps}"
            )));
        }
        let k = DEFAULT_STEPS as f64 / steps as f64;
        make_schedule(steps, DEFAULT_BETA_START * k, DEFAULT_BETA_END * k)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variance(&self) -> &[f64] {
        &self.posterior_variance
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// `sqrt(alpha_bar_t) c0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise_slice(
    c0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &DiffusionSchedule,
) -> Vec<f64> {
    let (s, r) = sched.signal_noise(t);
    c0.iter().zip(eps).map(|(c, e)| s * c + r * e).collect()
}

pub fn forward_noise(
    c0: &Grid3,
    t: usize,
    eps: &Grid3,
    sched: &DiffusionSchedule,
) -> Result<Grid3> {
    if c0.dims() != eps.dims() {
        return Err(mismatch(format!(
            "{:?} vs noise {:?}",
            c0.dims(),
            eps.dims()
        )));
    }
    if t >= sched.steps() {
        return Err(invalid(format!("step {t} outside 0..{}", sched.steps())));
    }
    Grid3::from_vec(
        c0.dims(),
        forward_noise_slice(c0.data(), t, eps.data(), sched),
    )
}
