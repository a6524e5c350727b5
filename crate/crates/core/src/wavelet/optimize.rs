use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{loss_gradient_grid, recon_loss_grid, Band, FilterBank};
use crate::error::{invalid, Error, Result};
use crate::grid::Grid3;
use crate::volume::{weight_mask, UdfVolume, DEFAULT_FAR_WEIGHT, DEFAULT_GAMMA};

/// Which half of the bank receives updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Both,
    /// Analysis taps only; synthesis frozen.
    Analysis,
    /// Synthesis taps only; analysis frozen.
    Synthesis,
}

impl Trainable {
    fn updates(self, band: Band) -> bool {
        match self {
            Trainable::Both => true,
            Trainable::Analysis => band.is_analysis(),
            Trainable::Synthesis => !band.is_analysis(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub far_weight: f64,
    pub levels: usize,
    pub seed: u64,
    /// Fraction of volumes held out for validation.
    pub holdout: f64,
    pub trainable: Trainable,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 4,
            gamma: DEFAULT_GAMMA,
            far_weight: DEFAULT_FAR_WEIGHT,
            levels: super::DEFAULT_LEVELS,
            seed: 0,
            holdout: 0.2,
            trainable: Trainable::Both,
        }
    }
}

/// One optimizer step; losses are measured before the update is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub bank: FilterBank,
    pub trace: Vec<TraceRow>,
    /// Row of the trace whose parameters were returned; `None` means the
    /// initialization was kept.
    pub best_iter: Option<usize>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Mean loss over all training volumes, before and after.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

struct Sample {
    grid: Grid3,
    weights: Vec<f64>,
}

fn mean_loss(samples: &[&Sample], bank: &FilterBank, levels: usize) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| recon_loss_grid(&s.grid, &s.weights, bank, levels))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Adam on the filter taps against the weighted reconstruction loss.
///
/// A `holdout` fraction of the volumes (at least one when there are two or
/// more) is kept for validation; with a single volume the training volume
/// doubles as the validation set. The bank with the lowest validation loss
/// seen is returned, unless its loss over the training volumes is above the
/// initialization's, in which case the initialization is returned.
pub fn optimize_filters(
    volumes: &[UdfVolume],
    init: &FilterBank,
    config: &OptimizeConfig,
) -> Result<OptimizeResult> {
    if volumes.is_empty() {
        return Err(invalid("no volumes to optimize on"));
    }
    let res = volumes[0].resolution();
    if volumes.iter().any(|v| v.resolution() != res) {
        return Err(invalid("all volumes must share one resolution"));
    }
    if !(config.step_size > 0.0)
        || !(0.0..1.0).contains(&config.beta1)
        || !(0.0..1.0).contains(&config.beta2)
        || config.batch_size == 0
        || !(0.0..1.0).contains(&config.holdout)
    {
        return Err(invalid(format!("invalid optimizer settings {config:?}")));
    }
    super::check_levels(res, config.levels)?;
    let samples: Vec<Sample> = volumes
        .iter()
        .map(|v| {
            Ok(Sample {
                grid: v.to_grid(),
                weights: weight_mask(v, config.gamma, config.far_weight)?
                    .weights()
                    .to_vec(),
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if samples.len() >= 2 {
        ((samples.len() as f64 * config.holdout).round() as usize).clamp(1, samples.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val: Vec<&Sample> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| &samples[i]).collect()
    };

    let levels = config.levels;
    let initial_val_loss = mean_loss(&val, init, levels)?;
    let initial_train_loss = mean_loss(&train, init, levels)?;
    let len = init.len();
    let mask: Vec<bool> = Band::ALL
        .iter()
        .flat_map(|&b| std::iter::repeat_n(config.trainable.updates(b), len))
        .collect();

    let mut params = init.params();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut best = (init.clone(), initial_val_loss, None);
    let mut trace = Vec::with_capacity(config.iters);
    let mut cursor = train.len();
    let mut epoch: Vec<usize> = (0..train.len()).collect();

    for iter in 0..config.iters {
        let bank = init.with_params(&params)?;
        let mut batch = Vec::with_capacity(config.batch_size.min(train.len()));
        while batch.len() < config.batch_size.min(train.len()) {
            if cursor == epoch.len() {
                epoch.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[epoch[cursor]]);
            cursor += 1;
        }
        let grads: Vec<_> = batch
            .par_iter()
            .map(|s| loss_gradient_grid(&s.grid, &s.weights, &bank, levels))
            .collect::<Result<_>>()?;
        let train_loss = grads.iter().map(|g| g.loss).sum::<f64>() / grads.len() as f64;
        let val_loss = if val_idx.is_empty() {
            // single volume: the batch is the validation set
            train_loss
        } else {
            mean_loss(&val, &bank, levels)?
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at iteration {iter}")));
        }
        trace.push(TraceRow {
            iter,
            train_loss,
            val_loss,
        });
        if val_loss < best.1 {
            best = (bank.clone(), val_loss, Some(iter));
        }

        let mut g = vec![0.0; params.len()];
        for lg in &grads {
            for (a, b) in g.iter_mut().zip(lg.flat()) {
                *a += b / grads.len() as f64;
            }
        }
        let t = (iter + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for k in 0..params.len() {
            if !mask[k] {
                continue;
            }
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            params[k] -= config.step_size * (m[k] / c1) / ((v[k] / c2).sqrt() + 1e-12);
        }
    }
    // the state after the last update has not been scored yet
    if config.iters > 0 {
        let bank = init.with_params(&params)?;
        let val_loss = mean_loss(&val, &bank, levels)?;
        if val_loss < best.1 {
            best = (bank, val_loss, Some(config.iters));
        }
    }

    let (mut bank, mut best_val_loss, mut best_iter) = best;
    let mut final_train_loss = mean_loss(&train, &bank, levels)?;
    if final_train_loss > initial_train_loss {
        bank = init.clone();
        best_val_loss = initial_val_loss;
        best_iter = None;
        final_train_loss = initial_train_loss;
    }
    Ok(OptimizeResult {
        bank,
        trace,
        best_iter,
        initial_val_loss,
        best_val_loss,
        initial_train_loss,
        final_train_loss,
    })
}
