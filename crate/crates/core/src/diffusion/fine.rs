//! Predictors of the seven detail subbands from the coarse volume.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::nn::{self, Adam, Layer};
use crate::error::{invalid, Error, Result};
use crate::grid::Grid3;
use crate::wavelet::FINE_CHANNELS;

/// Maps a coarse volume to `FINE_CHANNELS` volumes of the same shape.
pub trait FinePredictor: Sync {
    fn predict(&self, coarse: &Grid3) -> Result<Vec<Grid3>>;
}

/// Number of stencil features: the 3x3x3 neighborhood plus a constant.
pub const STENCIL_FEATURES: usize = 28;

fn neighborhood(c: &Grid3, x: usize, y: usize, z: usize, out: &mut [f64; STENCIL_FEATURES]) {
    let [nx, ny, nz] = c.dims();
    let clamp = |v: usize, d: i64, n: usize| (v as i64 + d).clamp(0, n as i64 - 1) as usize;
    let mut k = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                out[k] = c.get(clamp(x, dx, nx), clamp(y, dy, ny), clamp(z, dz, nz));
                k += 1;
            }
        }
    }
    out[27] = 1.0;
}

/// Per-channel linear regression on the replicate-padded 3x3x3 neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStencil {
    /// `FINE_CHANNELS` rows of `STENCIL_FEATURES` weights, bias last.
    pub weights: Vec<[f64; STENCIL_FEATURES]>,
}

impl LinearStencil {
    pub fn zero() -> Self {
        Self {
            weights: vec![[0.0; STENCIL_FEATURES]; FINE_CHANNELS],
        }
    }

    /// Ridge least squares over every voxel of every pair.
    pub fn fit(pairs: &[(Grid3, Vec<Grid3>)], ridge: f64) -> Result<Self> {
        check_pairs(pairs)?;
        if !(ridge >= 0.0) {
            return Err(invalid(format!("ridge {ridge} must be nonnegative")));
        }
        let p = STENCIL_FEATURES;
        let mut ata = DMatrix::<f64>::zeros(p, p);
        let mut atb = DMatrix::<f64>::zeros(p, FINE_CHANNELS);
        let mut f = [0.0; STENCIL_FEATURES];
        for (c, fine) in pairs {
            let [nx, ny, nz] = c.dims();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        neighborhood(c, x, y, z, &mut f);
                        for a in 0..p {
                            for b in a..p {
                                ata[(a, b)] += f[a] * f[b];
                            }
                            for (ch, band) in fine.iter().enumerate() {
                                atb[(a, ch)] += f[a] * band.get(x, y, z);
                            }
                        }
                    }
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                ata[(a, b)] = ata[(b, a)];
            }
        }
        let scale = ata.trace() / p as f64;
        // a floor keeps exactly collinear features (constant inputs) solvable
        let lambda = ridge * scale + 1e-12 * scale.max(1.0);
        for a in 0..p {
            ata[(a, a)] += lambda;
        }
        let chol = ata.cholesky().ok_or_else(|| {
            Error::Numeric("stencil normal equations are not positive definite".into())
        })?;
        let mut weights = Vec::with_capacity(FINE_CHANNELS);
        for ch in 0..FINE_CHANNELS {
            let sol: DVector<f64> = chol.solve(&atb.column(ch).into_owned());
            let mut w = [0.0; STENCIL_FEATURES];
            w.copy_from_slice(sol.as_slice());
            weights.push(w);
        }
        Ok(Self { weights })
    }
}

impl FinePredictor for LinearStencil {
    fn predict(&self, coarse: &Grid3) -> Result<Vec<Grid3>> {
        let dims = coarse.dims();
        let mut out = vec![Grid3::zeros(dims); FINE_CHANNELS];
        let mut f = [0.0; STENCIL_FEATURES];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    neighborhood(coarse, x, y, z, &mut f);
                    for (band, w) in out.iter_mut().zip(&self.weights) {
                        band.set(x, y, z, nn::dot(w, &f));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Linear stencil plus a small per-voxel network on the same neighborhood:
/// `F(v) = stencil(C)(v) + W2 silu(W1 n(v) + b1) + b2`, where `n(v)` is the
/// 3x3x3 neighborhood of `v` standardized by training-set scalars. Weights are
/// shared by every voxel, so the network learns the nonlinear local response
/// of the detail bands and applies to any grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    pub base: LinearStencil,
    pub hidden: usize,
    pub mean: f64,
    pub std: f64,
    pub params: Vec<f64>,
}

const NEIGHBORS: usize = STENCIL_FEATURES - 1;

impl ResidualMlp {
    fn layers(hidden: usize) -> (Vec<Layer>, usize) {
        nn::layout(&[(hidden, NEIGHBORS), (FINE_CHANNELS, hidden)])
    }

    pub fn param_count(hidden: usize) -> usize {
        Self::layers(hidden).1
    }

    fn input(&self, c: &Grid3, x: usize, y: usize, z: usize, out: &mut [f64; NEIGHBORS]) {
        let mut nb = [0.0; STENCIL_FEATURES];
        neighborhood(c, x, y, z, &mut nb);
        for (o, v) in out.iter_mut().zip(&nb) {
            *o = (v - self.mean) / self.std;
        }
    }
}

/// Network residual for one standardized neighborhood; fills the
/// pre-activations `a` and activations `h`.
fn residual(
    p: &[f64],
    l: &[Layer],
    x: &[f64],
    a: &mut [f64],
    h: &mut [f64],
    r: &mut [f64; FINE_CHANNELS],
) {
    let hidden = l[0].rows;
    let (w1, b1, w2, b2) = (l[0].w(p), l[0].b(p), l[1].w(p), l[1].b(p));
    for j in 0..hidden {
        a[j] = b1[j] + nn::dot(&w1[j * NEIGHBORS..(j + 1) * NEIGHBORS], x);
        h[j] = nn::silu(a[j]);
    }
    for (ch, rv) in r.iter_mut().enumerate() {
        *rv = b2[ch] + nn::dot(&w2[ch * hidden..(ch + 1) * hidden], h);
    }
}

impl FinePredictor for ResidualMlp {
    fn predict(&self, coarse: &Grid3) -> Result<Vec<Grid3>> {
        let mut out = self.base.predict(coarse)?;
        let (l, _) = Self::layers(self.hidden);
        let (mut a, mut h) = (vec![0.0; self.hidden], vec![0.0; self.hidden]);
        let (mut x, mut r) = ([0.0; NEIGHBORS], [0.0; FINE_CHANNELS]);
        let [nx, ny, nz] = coarse.dims();
        for z in 0..nz {
            for y in 0..ny {
                for vx in 0..nx {
                    self.input(coarse, vx, y, z, &mut x);
                    residual(&self.params, &l, &x, &mut a, &mut h, &mut r);
                    let i = coarse.index(vx, y, z);
                    for (band, d) in out.iter_mut().zip(&r) {
                        band.data_mut()[i] += d;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Per-voxel training rows: standardized neighborhoods and the stencil's
/// remaining error as targets.
struct VoxelSamples {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl VoxelSamples {
    fn len(&self) -> usize {
        self.y.len() / FINE_CHANNELS
    }
}

/// Summed squared error over `rows` and its parameter gradient.
fn rows_sse_and_grad(
    p: &[f64],
    l: &[Layer],
    s: &VoxelSamples,
    rows: &[usize],
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let hidden = l[0].rows;
    let mut g = vec![0.0; if want_grad { p.len() } else { 0 }];
    let (mut a, mut h, mut gh) = (vec![0.0; hidden], vec![0.0; hidden], vec![0.0; hidden]);
    let mut r = [0.0; FINE_CHANNELS];
    let w2 = l[1].w(p);
    let mut sse = 0.0;
    for &i in rows {
        let x = &s.x[i * NEIGHBORS..(i + 1) * NEIGHBORS];
        let t = &s.y[i * FINE_CHANNELS..(i + 1) * FINE_CHANNELS];
        residual(p, l, x, &mut a, &mut h, &mut r);
        let mut d = [0.0; FINE_CHANNELS];
        for ch in 0..FINE_CHANNELS {
            d[ch] = r[ch] - t[ch];
            sse += d[ch] * d[ch];
        }
        if !want_grad {
            continue;
        }
        let (g1, g2) = g.split_at_mut(l[1].offset);
        let (gw2, gb2) = g2.split_at_mut(FINE_CHANNELS * hidden);
        gh.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..FINE_CHANNELS {
            let gr = 2.0 * d[ch];
            gb2[ch] += gr;
            for j in 0..hidden {
                gw2[ch * hidden + j] += gr * h[j];
                gh[j] += gr * w2[ch * hidden + j];
            }
        }
        let (gw1, gb1) = g1.split_at_mut(hidden * NEIGHBORS);
        for j in 0..hidden {
            let ga = gh[j] * nn::silu_grad(a[j]);
            gb1[j] += ga;
            for (gw, xv) in gw1[j * NEIGHBORS..(j + 1) * NEIGHBORS].iter_mut().zip(x) {
                *gw += ga * xv;
            }
        }
    }
    (sse, g)
}

/// Rows per parallel work unit; fixed so reductions do not depend on the
/// thread count.
const CHUNK: usize = 256;

fn chunked_sse_and_grad(
    p: &[f64],
    l: &[Layer],
    s: &VoxelSamples,
    rows: &[usize],
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = rows
        .par_chunks(CHUNK)
        .map(|c| rows_sse_and_grad(p, l, s, c, want_grad))
        .collect();
    let mut sse = 0.0;
    let mut g = vec![0.0; if want_grad { p.len() } else { 0 }];
    for (e, pg) in parts {
        sse += e;
        for (a, b) in g.iter_mut().zip(&pg) {
            *a += b;
        }
    }
    (sse, g)
}

/// The available fine predictors.
#[derive(Debug, Clone, PartialEq)]
pub enum FineModel {
    /// Predicts all-zero detail subbands.
    Zero,
    Linear(LinearStencil),
    Mlp(ResidualMlp),
}

impl FineModel {
    pub fn kind(&self) -> FineKind {
        match self {
            FineModel::Zero => FineKind::Zero,
            FineModel::Linear(_) => FineKind::Linear,
            FineModel::Mlp(_) => FineKind::Mlp,
        }
    }
}

impl FinePredictor for FineModel {
    fn predict(&self, coarse: &Grid3) -> Result<Vec<Grid3>> {
        match self {
            FineModel::Zero => Ok(vec![Grid3::zeros(coarse.dims()); FINE_CHANNELS]),
            FineModel::Linear(m) => m.predict(coarse),
            FineModel::Mlp(m) => m.predict(coarse),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineKind {
    Zero,
    Linear,
    Mlp,
}

impl FineKind {
    pub fn name(self) -> &'static str {
        match self {
            FineKind::Zero => "zero",
            FineKind::Linear => "linear",
            FineKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(FineKind::Zero),
            "linear" => Ok(FineKind::Linear),
            "mlp" => Ok(FineKind::Mlp),
            _ => Err(invalid(format!(
                "unknown fine predictor `{s}` (zero, linear, mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineConfig {
    pub kind: FineKind,
    /// Relative ridge strength of the stencil fit.
    pub ridge: f64,
    pub hidden: usize,
    /// Mini-batch steps of the residual network.
    pub iters: usize,
    pub step_size: f64,
    /// Voxels per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self {
            kind: FineKind::Mlp,
            ridge: 1e-6,
            hidden: 64,
            iters: 2000,
            step_size: 3e-3,
            batch_size: 1024,
            seed: 0,
        }
    }
}

fn check_pairs(pairs: &[(Grid3, Vec<Grid3>)]) -> Result<()> {
    let Some((c0, _)) = pairs.first() else {
        return Err(invalid("no training pairs"));
    };
    for (c, f) in pairs {
        if c.dims() != c0.dims() {
            return Err(invalid(format!(
                "coarse volume {:?} differs from {:?}",
                c.dims(),
                c0.dims()
            )));
        }
        if f.len() != FINE_CHANNELS || f.iter().any(|b| b.dims() != c.dims()) {
            return Err(invalid(format!(
                "each pair needs {FINE_CHANNELS} fine volumes shaped like the coarse one"
            )));
        }
    }
    Ok(())
}

/// Mean squared error of `model` over all coefficients of `pairs`.
pub fn fine_mse(model: &dyn FinePredictor, pairs: &[(Grid3, Vec<Grid3>)]) -> Result<f64> {
    check_pairs(pairs)?;
    let mut sse = 0.0;
    let mut n = 0usize;
    for (c, f) in pairs {
        for (p, t) in model.predict(c)?.iter().zip(f) {
            sse += p
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            n += t.len();
        }
    }
    Ok(sse / n as f64)
}

/// How often (in steps) the full training loss is measured for selection.
const EVAL_EVERY: usize = 100;

/// Fits the requested predictor with an MSE objective.
///
/// The residual network is trained with Adam on seeded mini-batches of
/// voxels drawn from every pair. The full training loss is measured every
/// `EVAL_EVERY` steps and at the end, and the best parameters measured are
/// returned; the starting point (the stencil alone) is one of the candidates.
pub fn train_fine_predictor(
    pairs: &[(Grid3, Vec<Grid3>)],
    config: &FineConfig,
) -> Result<FineModel> {
    check_pairs(pairs)?;
    let base = match config.kind {
        FineKind::Zero => return Ok(FineModel::Zero),
        _ => LinearStencil::fit(pairs, config.ridge)?,
    };
    if config.kind == FineKind::Linear {
        return Ok(FineModel::Linear(base));
    }
    if config.hidden == 0 || config.batch_size == 0 || !(config.step_size > 0.0) {
        return Err(invalid(
            "residual network needs hidden > 0, batch_size > 0 and a positive step size",
        ));
    }
    let all: Vec<f64> = pairs
        .iter()
        .flat_map(|(c, _)| c.data().iter().copied())
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
    let std = if var > 1e-24 { var.sqrt() } else { 1.0 };

    let (layers, _) = ResidualMlp::layers(config.hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // a zero output layer starts the model exactly at the stencil fit
    let params = nn::init_params(&layers, &[1.0, 0.0], &mut rng);
    let mut model = ResidualMlp {
        base,
        hidden: config.hidden,
        mean,
        std,
        params,
    };

    let mut samples = VoxelSamples {
        x: Vec::with_capacity(all.len() * NEIGHBORS),
        y: Vec::with_capacity(all.len() * FINE_CHANNELS),
    };
    let mut x = [0.0; NEIGHBORS];
    for (c, fine) in pairs {
        let base = model.base.predict(c)?;
        let [nx, ny, nz] = c.dims();
        for z in 0..nz {
            for y in 0..ny {
                for vx in 0..nx {
                    model.input(c, vx, y, z, &mut x);
                    samples.x.extend_from_slice(&x);
                    let i = c.index(vx, y, z);
                    samples.y.extend(
                        (0..FINE_CHANNELS).map(|ch| fine[ch].data()[i] - base[ch].data()[i]),
                    );
                }
            }
        }
    }
    let n = samples.len();
    let every: Vec<usize> = (0..n).collect();
    let full_loss = |p: &[f64]| {
        chunked_sse_and_grad(p, &layers, &samples, &every, false).0 / (n * FINE_CHANNELS) as f64
    };

    let mut best = model.params.clone();
    let mut best_loss = full_loss(&model.params);
    let mut adam = Adam::new(model.params.len(), config.step_size);
    let mut rows = vec![0usize; config.batch_size];
    let scale = 1.0 / (config.batch_size * FINE_CHANNELS) as f64;
    for iter in 1..=config.iters {
        for r in rows.iter_mut() {
            *r = rng.random_range(0..n);
        }
        let (_, mut grad) = chunked_sse_and_grad(&model.params, &layers, &samples, &rows, true);
        grad.iter_mut().for_each(|g| *g *= scale);
        adam.update(&mut model.params, &grad);
        if iter % EVAL_EVERY == 0 || iter == config.iters {
            let loss = full_loss(&model.params);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "fine predictor loss diverged at step {iter}"
                )));
            }
            if loss < best_loss {
                best_loss = loss;
                best.copy_from_slice(&model.params);
            }
        }
    }
    model.params = best;
    Ok(FineModel::Mlp(model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_grid(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Grid3 {
        Grid3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_targets_give_zero_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<_> = (0..3)
            .map(|_| {
                (
                    random_grid([5, 4, 6], &mut rng),
                    vec![Grid3::zeros([5, 4, 6]); FINE_CHANNELS],
                )
            })
            .collect();
        let m = LinearStencil::fit(&pairs, 1e-6).unwrap();
        assert!(fine_mse(&m, &pairs).unwrap() < 1e-12);
    }

    #[test]
    fn recovers_a_planted_stencil() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut truth = LinearStencil::zero();
        for w in &mut truth.weights {
            for v in w.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let make = |rng: &mut ChaCha8Rng| {
            let c = random_grid([6, 6, 6], rng);
            let f = truth.predict(&c).unwrap();
            (c, f)
        };
        let train: Vec<_> = (0..4).map(|_| make(&mut rng)).collect();
        let held: Vec<_> = (0..2).map(|_| make(&mut rng)).collect();
        let m = LinearStencil::fit(&train, 0.0).unwrap();
        assert!(fine_mse(&m, &held).unwrap() < 1e-8);
    }

    #[test]
    fn residual_network_learns_a_nonlinear_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // every band is the squared centre value: out of reach of the stencil
        let pairs: Vec<_> = (0..3)
            .map(|_| {
                let c = random_grid([6, 6, 6], &mut rng);
                let sq =
                    Grid3::from_vec(c.dims(), c.data().iter().map(|v| v * v).collect()).unwrap();
                (c, vec![sq; FINE_CHANNELS])
            })
            .collect();
        let linear = train_fine_predictor(
            &pairs,
            &FineConfig {
                kind: FineKind::Linear,
                ..Default::default()
            },
        )
        .unwrap();
        let mlp = train_fine_predictor(&pairs, &FineConfig::default()).unwrap();
        assert_eq!(mlp.kind(), FineKind::Mlp);
        let (l, m) = (
            fine_mse(&linear, &pairs).unwrap(),
            fine_mse(&mlp, &pairs).unwrap(),
        );
        assert!(m < 0.2 * l, "mlp {m} vs linear {l}");
        // weights are shared across voxels, so other grid sizes work too
        assert_eq!(
            mlp.predict(&Grid3::zeros([3, 4, 5])).unwrap()[0].dims(),
            [3, 4, 5]
        );
    }

    #[test]
    fn residual_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (layers, total) = ResidualMlp::layers(5);
        let rows = 6;
        let samples = VoxelSamples {
            x: (0..rows * NEIGHBORS)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            y: (0..rows * FINE_CHANNELS)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        };
        let p = nn::init_params(&layers, &[1.0, 1.0], &mut rng);
        assert_eq!(p.len(), total);
        let idx = [0, 3, 3, 5, 1];
        let (_, g) = rows_sse_and_grad(&p, &layers, &samples, &idx, true);
        for k in 0..total {
            let h = 1e-6;
            let mut q = p.clone();
            q[k] += h;
            let up = rows_sse_and_grad(&q, &layers, &samples, &idx, false).0;
            q[k] -= 2.0 * h;
            let dn = rows_sse_and_grad(&q, &layers, &samples, &idx, false).0;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0),
                "{k}: {} vs {fd}",
                g[k]
            );
        }
    }

    #[test]
    fn rejects_inconsistent_pairs() {
        assert!(train_fine_predictor(&[], &FineConfig::default()).is_err());
        let pairs = vec![(Grid3::zeros([2, 2, 2]), vec![Grid3::zeros([2, 2, 2]); 6])];
        assert!(LinearStencil::fit(&pairs, 0.0).is_err());
    }
}
