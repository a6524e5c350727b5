use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::nn::{self, Adam, Layer};
use super::schedule::DiffusionSchedule;
use crate::error::{invalid, mismatch, Error, Result};

/// A noise predictor: `(x_t, t, condition) -> eps_hat` of the same length.
pub trait Denoiser: Sync {
    /// Length of the flattened volumes it consumes.
    fn dim(&self) -> usize;

    /// Condition length; 0 for unconditional models.
    fn cond_dim(&self) -> usize {
        0
    }

    fn predict_noise(&self, x: &[f64], t: usize, cond: Option<&[f64]>) -> Vec<f64>;
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDenoiser {
    pub dim: usize,
}

impl Denoiser for ZeroDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_noise(&self, x: &[f64], _t: usize, _cond: Option<&[f64]>) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// Bayes-optimal noise predictor for data drawn from `N(mu, var I)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mu: Vec<f64>,
    var: f64,
    alpha_bars: Vec<f64>,
}

pub fn gaussian_oracle_denoiser(mu: &[f64], var: f64, sched: &DiffusionSchedule) -> GaussianOracle {
    GaussianOracle {
        mu: mu.to_vec(),
        var: var.max(0.0),
        alpha_bars: sched.alpha_bars().to_vec(),
    }
}

impl Denoiser for GaussianOracle {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn predict_noise(&self, x: &[f64], t: usize, _cond: Option<&[f64]>) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
        let denom = ab * self.var + 1.0 - ab;
        x.iter()
            .zip(&self.mu)
            .map(|(x, m)| r * (x - s * m) / denom)
            .collect()
    }
}

pub const TIME_EMBED_DIM: usize = 32;
/// Scale applied to the condition before it enters the first layer. The
/// condition is a few inputs beside hundreds of voxels, and without a gain
/// the network is slow to pick it up.
pub const COND_GAIN: f64 = 8.0;
pub const DEFAULT_HIDDEN: usize = 128;

/// Sinusoidal embedding of the integer step.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut e = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        e[k] = (t as f64 * freq).sin();
        e[half + k] = (t as f64 * freq).cos();
    }
    e
}

/// Residual fully-connected denoiser over flattened volumes.
///
/// The network gives a clean-data estimate `x0_hat = c_t x_t + F`, converted
/// to a noise estimate with `eps_hat = (x_t - sqrt(ab_t) x0_hat) /
/// sqrt(1 - ab_t)`. The training objective is still the noise-prediction MSE.
///
/// The skip `c_t = sqrt(ab_t) v / (ab_t v + 1 - ab_t)` is the best linear
/// estimate of `x0` from `x_t` when each voxel varies by `v` across the
/// training set. The hidden layers are far narrower than the volume and
/// cannot pass `x_t` through at small `t`; the skip does that for varied
/// data. For a single shape `v = 0`, the skip vanishes and `F` alone
/// memorizes it.
///
/// ```text
/// z  = [x_t, embed(t), COND_GAIN * cond]
/// h1 = silu(W1 z + b1)
/// h2 = h1 + silu(W2 h1 + b2)
/// F  = W3 h2 + b3
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    dim: usize,
    cond_dim: usize,
    hidden: usize,
    layers: Vec<Layer>,
    params: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Mean per-voxel variance of the training data, for the skip.
    data_var: f64,
}

struct Cache {
    z: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
}

impl MlpDenoiser {
    pub fn new(
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        sched: &DiffusionSchedule,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(invalid("denoiser dimensions must be positive"));
        }
        let (layers, _) = Self::shapes(dim, cond_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = nn::init_params(&layers, &[1.0, 1.0, 0.1], &mut rng);
        Ok(Self {
            dim,
            cond_dim,
            hidden,
            layers,
            params,
            alpha_bars: sched.alpha_bars().to_vec(),
            data_var: 0.0,
        })
    }

    fn shapes(dim: usize, cond_dim: usize, hidden: usize) -> (Vec<Layer>, usize) {
        nn::layout(&[
            (hidden, dim + TIME_EMBED_DIM + cond_dim),
            (hidden, hidden),
            (dim, hidden),
        ])
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_params(
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        sched: &DiffusionSchedule,
        params: Vec<f64>,
    ) -> Result<Self> {
        let (layers, total) = Self::shapes(dim, cond_dim, hidden);
        if params.len() != total {
            return Err(mismatch(format!(
                "{} parameters, architecture needs {total}",
                params.len()
            )));
        }
        Ok(Self {
            dim,
            cond_dim,
            hidden,
            layers,
            params,
            alpha_bars: sched.alpha_bars().to_vec(),
            data_var: 0.0,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(rows, cols)` of each dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    fn input(&self, x: &[f64], t: usize, cond: Option<&[f64]>) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.layers[0].cols);
        z.extend_from_slice(x);
        z.extend_from_slice(&time_embedding(t));
        match cond {
            Some(c) => z.extend(c.iter().map(|v| v * COND_GAIN)),
            None => z.extend(std::iter::repeat_n(0.0, self.cond_dim)),
        }
        z
    }

    fn forward(&self, x: &[f64], t: usize, cond: Option<&[f64]>) -> (Vec<f64>, Cache) {
        let p = &self.params;
        let z = self.input(x, t, cond);
        let a1 = self.layers[0].forward(p, &z);
        let h1: Vec<f64> = a1.iter().map(|&a| nn::silu(a)).collect();
        let a2 = self.layers[1].forward(p, &h1);
        let h2: Vec<f64> = h1.iter().zip(&a2).map(|(h, &a)| h + nn::silu(a)).collect();
        let f = self.layers[2].forward(p, &h2);
        (f, Cache { z, a1, h1, a2, h2 })
    }

    pub fn data_var(&self) -> f64 {
        self.data_var
    }

    /// The same model with the skip set for data of per-voxel variance `v`.
    pub fn with_data_var(mut self, v: f64) -> Result<Self> {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(invalid(format!(
                "data variance must be finite and nonnegative, got {v}"
            )));
        }
        self.data_var = v;
        Ok(self)
    }

    fn skip(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ab.sqrt() * self.data_var / (ab * self.data_var + 1.0 - ab)
    }

    /// Clean-data estimate `c_t x_t + F`.
    pub fn predict_clean(&self, x: &[f64], t: usize, cond: Option<&[f64]>) -> Vec<f64> {
        let f = self.forward(x, t, cond).0;
        let c = self.skip(t);
        x.iter().zip(&f).map(|(x, f)| c * x + f).collect()
    }

    fn eps_from_clean(&self, x: &[f64], x0: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
        x.iter().zip(x0).map(|(x, c)| (x - s * c) / r).collect()
    }

    /// Noise-prediction loss `mean((eps_hat - eps)^2)` of one example and its
    /// gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        x0: &[f64],
        t: usize,
        eps: &[f64],
        cond: Option<&[f64]>,
    ) -> (f64, Vec<f64>) {
        let ab = self.alpha_bars[t];
        let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xt: Vec<f64> = x0.iter().zip(eps).map(|(c, e)| s * c + r * e).collect();
        let (f, cache) = self.forward(&xt, t, cond);
        let gain = self.skip(t);
        let x0_hat: Vec<f64> = xt.iter().zip(&f).map(|(x, f)| gain * x + f).collect();
        let eps_hat = self.eps_from_clean(&xt, &x0_hat, t);
        let d = self.dim as f64;
        let loss = eps_hat
            .iter()
            .zip(eps)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d;
        let gf: Vec<f64> = eps_hat
            .iter()
            .zip(eps)
            .map(|(a, b)| -s / r * 2.0 * (a - b) / d)
            .collect();

        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let gh2 = self.layers[2].backward(p, &cache.h2, &gf, &mut g, true);
        let ga2: Vec<f64> = gh2
            .iter()
            .zip(&cache.a2)
            .map(|(g, &a)| g * nn::silu_grad(a))
            .collect();
        let gh1_branch = self.layers[1].backward(p, &cache.h1, &ga2, &mut g, true);
        let ga1: Vec<f64> = gh2
            .iter()
            .zip(&gh1_branch)
            .zip(&cache.a1)
            .map(|((a, b), &x)| (a + b) * nn::silu_grad(x))
            .collect();
        self.layers[0].backward(p, &cache.z, &ga1, &mut g, false);
        (loss, g)
    }

    pub fn loss(&self, x0: &[f64], t: usize, eps: &[f64], cond: Option<&[f64]>) -> f64 {
        let ab = self.alpha_bars[t];
        let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xt: Vec<f64> = x0.iter().zip(eps).map(|(c, e)| s * c + r * e).collect();
        let eps_hat = self.predict_noise(&xt, t, cond);
        eps_hat
            .iter()
            .zip(eps)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.dim as f64
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn predict_noise(&self, x: &[f64], t: usize, cond: Option<&[f64]>) -> Vec<f64> {
        let x0 = self.predict_clean(x, t, cond);
        self.eps_from_clean(x, &x0, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Smoothing of the running loss used to pick the returned snapshot.
    pub ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            step_size: 1e-3,
            batch_size: 16,
            seed: 0,
            ema: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub loss: f64,
    /// Exponential moving average of `loss`.
    pub running: f64,
}

fn check_data(
    data: &[Vec<f64>],
    dim: usize,
    conditions: Option<&[Vec<f64>]>,
    cond_dim: usize,
) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("no training volumes"));
    }
    if let Some(v) = data.iter().find(|v| v.len() != dim) {
        return Err(invalid(format!(
            "volume of {} values, model expects {dim}",
            v.len()
        )));
    }
    if let Some(c) = conditions {
        if c.len() != data.len() {
            return Err(invalid(format!(
                "{} conditions for {} volumes",
                c.len(),
                data.len()
            )));
        }
        if c.iter().any(|e| e.len() != cond_dim) {
            return Err(invalid(format!("condition length must be {cond_dim}")));
        }
    }
    Ok(())
}

/// Per-voxel variance across the volumes, averaged over voxels.
pub fn voxel_variance(data: &[&[f64]]) -> f64 {
    let n = data.len() as f64;
    let dim = data[0].len();
    let mut total = 0.0;
    for k in 0..dim {
        let mean = data.iter().map(|d| d[k]).sum::<f64>() / n;
        total += data.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / n;
    }
    total / dim as f64
}

/// Variance left once the condition is known: pooled over groups of
/// identical conditions with at least two members, or the plain variance
/// when there is no condition or no such group.
pub fn conditional_variance(data: &[Vec<f64>], conditions: Option<&[Vec<f64>]>) -> f64 {
    let all: Vec<&[f64]> = data.iter().map(|d| d.as_slice()).collect();
    let Some(conds) = conditions else {
        return voxel_variance(&all);
    };
    let mut groups: Vec<(&[f64], Vec<&[f64]>)> = Vec::new();
    for (d, c) in data.iter().zip(conds) {
        match groups.iter_mut().find(|g| g.0 == c.as_slice()) {
            Some(g) => g.1.push(d),
            None => groups.push((c, vec![d])),
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (_, members) in groups.iter().filter(|g| g.1.len() >= 2) {
        sum += voxel_variance(members) * members.len() as f64;
        count += members.len();
    }
    if count == 0 {
        voxel_variance(&all)
    } else {
        sum / count as f64
    }
}

/// Adam on the noise-prediction loss with `t` uniform on `0..T`.
///
/// Returns the parameters at the lowest running (smoothed) loss and the
/// per-iteration trace. Sample draws come from one seeded stream; per-sample
/// gradients are reduced in batch order. The skip is set from
/// [`conditional_variance`] of the data.
pub fn train_denoiser(
    data: &[Vec<f64>],
    conditions: Option<&[Vec<f64>]>,
    model: &MlpDenoiser,
    sched: &DiffusionSchedule,
    config: &TrainConfig,
) -> Result<(MlpDenoiser, Vec<LossRow>)> {
    check_data(data, model.dim, conditions, model.cond_dim)?;
    if config.batch_size == 0 || !(config.step_size > 0.0) || !(0.0..1.0).contains(&config.ema) {
        return Err(invalid(format!("invalid training settings {config:?}")));
    }
    if sched.alpha_bars() != model.alpha_bars.as_slice() {
        return Err(invalid("model was built for a different schedule"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = model
        .clone()
        .with_data_var(conditional_variance(data, conditions))?;
    let mut best = current.clone();
    let mut best_running = f64::INFINITY;
    let mut running = None;
    let mut adam = Adam::new(current.params.len(), config.step_size);
    let mut trace = Vec::with_capacity(config.iters);
    let t_max = sched.steps();
    for iter in 0..config.iters {
        let draws: Vec<(usize, usize, Vec<f64>)> = (0..config.batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                let t = rng.random_range(0..t_max);
                let eps = (0..model.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                (i, t, eps)
            })
            .collect();
        let results: Vec<(f64, Vec<f64>)> = draws
            .par_iter()
            .map(|(i, t, eps)| {
                let c = conditions.map(|c| c[*i].as_slice());
                current.loss_and_grad(&data[*i], *t, eps, c)
            })
            .collect();
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "denoiser loss diverged at iteration {iter}"
            )));
        }
        let r = match running {
            None => loss,
            Some(prev) => config.ema * prev + (1.0 - config.ema) * loss,
        };
        running = Some(r);
        trace.push(LossRow {
            iter,
            loss,
            running: r,
        });
        if r < best_running {
            best_running = r;
            best.params.copy_from_slice(&current.params);
        }
        let grad = nn::mean_of(results.into_iter().map(|r| r.1).collect());
        adam.update(&mut current.params, &grad);
    }
    Ok((best, trace))
}

/// Mean noise-prediction loss over `t` in `range`, averaged over `draws`
/// seeded draws per training volume.
pub fn stratified_loss(
    model: &MlpDenoiser,
    data: &[Vec<f64>],
    conditions: Option<&[Vec<f64>]>,
    range: std::ops::Range<usize>,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    check_data(data, model.dim, conditions, model.cond_dim)?;
    if range.is_empty() || range.end > model.alpha_bars.len() {
        return Err(invalid(format!(
            "step range {range:?} is empty or out of bounds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, x0) in data.iter().enumerate() {
        for _ in 0..draws {
            let t = rng.random_range(range.clone());
            let eps: Vec<f64> = (0..model.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            total += model.loss(x0, t, &eps, conditions.map(|c| c[i].as_slice()));
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;

    #[test]
    fn oracle_is_zero_on_the_mean_path() {
        let s = make_schedule(50, 1e-3, 0.1).unwrap();
        let mu = vec![0.3, -1.2, 2.0];
        let o = gaussian_oracle_denoiser(&mu, 0.0, &s);
        for t in [0, 10, 49] {
            let x: Vec<f64> = mu.iter().map(|m| s.alpha_bars()[t].sqrt() * m).collect();
            assert!(o.predict_noise(&x, t, None).iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let s = make_schedule(100, 1e-3, 0.2).unwrap();
        let m = MlpDenoiser::new(6, 3, 10, &s, 4).unwrap();
        // move off the near-zero output layer so every path matters
        let mut m = m;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in m.params_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
        let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cond = [0.5, -0.25, 1.0];
        let (_, g) = m.loss_and_grad(&x0, 37, &eps, Some(&cond));
        let n = m.params().len();
        for k in (0..n).step_by(n / 40).chain([0, n - 1]) {
            let h = 1e-6;
            let mut p = m.clone();
            p.params_mut()[k] += h;
            let up = p.loss(&x0, 37, &eps, Some(&cond));
            p.params_mut()[k] -= 2.0 * h;
            let dn = p.loss(&x0, 37, &eps, Some(&cond));
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-7);
            assert!(rel < 1e-4, "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn skip_is_the_least_squares_linear_estimate() {
        let sched = make_schedule(50, 1e-3, 0.05).unwrap();
        let (dim, hidden, v) = (4, 6, 0.3);
        let mut m = MlpDenoiser::new(dim, 0, hidden, &sched, 2)
            .unwrap()
            .with_data_var(v)
            .unwrap();
        // silence the network so only the skip remains
        let n = m.params().len();
        m.params_mut()[n - dim * (hidden + 1)..]
            .iter_mut()
            .for_each(|p| *p = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [0, 20, 49] {
            let ab = sched.alpha_bars()[t];
            let (mut xy, mut xx) = (0.0, 0.0);
            for _ in 0..200_000 {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x0 = v.sqrt() * z;
                let e: f64 = StandardNormal.sample(&mut rng);
                let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
                xy += xt * x0;
                xx += xt * xt;
            }
            let fit = xy / xx;
            let c = m.predict_clean(&[1.0; 4], t, None)[0];
            assert!(
                (c - fit).abs() < 0.01,
                "t={t}: skip {c} vs regression {fit}"
            );
        }
        assert!(MlpDenoiser::new(dim, 0, hidden, &sched, 2)
            .unwrap()
            .with_data_var(-1.0)
            .is_err());
    }

    #[test]
    fn variance_is_pooled_within_conditions() {
        // group a: {0, 2} has variance 1; group b: {10, 10, 16} has variance 8
        let data: Vec<Vec<f64>> = [0.0, 10.0, 2.0, 10.0, 16.0]
            .iter()
            .map(|&v| vec![v])
            .collect();
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let conds = vec![a.clone(), b.clone(), a, b.clone(), b];
        let pooled = conditional_variance(&data, Some(&conds));
        assert!((pooled - (2.0 * 1.0 + 3.0 * 8.0) / 5.0).abs() < 1e-12);
        // mean 7.6, squared deviations sum to 171.2
        let plain = conditional_variance(&data, None);
        assert!((plain - 171.2 / 5.0).abs() < 1e-12);
        let unique: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        assert_eq!(conditional_variance(&data, Some(&unique)), plain);
    }

    #[test]
    fn zero_iterations_leave_the_model_alone() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let m = MlpDenoiser::new(4, 0, 8, &s, 1).unwrap();
        let cfg = TrainConfig {
            iters: 0,
            ..Default::default()
        };
        let (out, trace) = train_denoiser(&[vec![0.0; 4]], None, &m, &s, &cfg).unwrap();
        assert_eq!(out, m);
        assert!(trace.is_empty());
    }

    #[test]
    fn running_minimum_is_monotone() {
        let s = DiffusionSchedule::scaled_default(40).unwrap();
        let m = MlpDenoiser::new(8, 0, 16, &s, 2).unwrap();
        let data = vec![vec![0.5; 8], vec![-0.5; 8]];
        let cfg = TrainConfig {
            iters: 200,
            batch_size: 4,
            step_size: 1e-2,
            ..Default::default()
        };
        let (_, trace) = train_denoiser(&data, None, &m, &s, &cfg).unwrap();
        let mut best = f64::INFINITY;
        for row in &trace {
            let next = best.min(row.running);
            assert!(next <= best);
            best = next;
        }
        let head: f64 = trace[..20].iter().map(|r| r.loss).sum();
        let tail: f64 = trace[trace.len() - 20..].iter().map(|r| r.loss).sum();
        assert!(tail < head, "{head} vs {tail}");
    }
}
