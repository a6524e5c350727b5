use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::denoiser::Denoiser;
use super::schedule::DiffusionSchedule;
use crate::error::{invalid, Error, Result};
use crate::grid::Grid3;

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// Each step uses the posterior mean
/// `(x_t - beta_t / sqrt(1 - ab_t) eps_hat) / sqrt(alpha_t)` and adds
/// posterior-variance noise for every `t > 0`. Identical seeds give identical
/// output.
pub fn sample(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    shape: [usize; 3],
    condition: Option<&[f64]>,
    seed: u64,
) -> Result<Grid3> {
    let n: usize = shape.iter().product();
    if n != model.dim() {
        return Err(invalid(format!(
            "shape {shape:?} has {n} values, model expects {}",
            model.dim()
        )));
    }
    match condition {
        Some(c) if c.len() != model.cond_dim() => {
            return Err(invalid(format!(
                "condition of length {}, model expects {}",
                c.len(),
                model.cond_dim()
            )))
        }
        None if model.cond_dim() > 0 => return Err(invalid("model requires a condition")),
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    for t in (0..sched.steps()).rev() {
        let eps = model.predict_noise(&x, t, condition);
        let beta = sched.betas()[t];
        let k = beta / (1.0 - sched.alpha_bars()[t]).sqrt();
        let inv = 1.0 / sched.alphas()[t].sqrt();
        let sigma = sched.posterior_variance()[t].sqrt();
        for (xi, e) in x.iter_mut().zip(&eps) {
            *xi = inv * (*xi - k * e);
        }
        if t > 0 {
            for xi in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi += sigma * z;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sample diverged at step {t}")));
        }
    }
    Grid3::from_vec(shape, x)
}
