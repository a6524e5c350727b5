//! Denoising diffusion over coarse wavelet coefficient volumes.
//!
//! A [`Generator`] bundles everything needed to turn a seed (and optionally
//! a condition vector) into a UDF: the noise schedule, a trained denoiser,
//! the scalar normalization of coarse coefficients, a fine-subband predictor
//! and the pyramid metadata used for inversion.

mod checkpoint;
pub mod denoiser;
pub mod fine;
mod nn;
pub mod sampler;
pub mod schedule;

pub use checkpoint::{
    decode_generator, encode_generator, read_generator, write_generator, MODEL_MAGIC, MODEL_VERSION,
};
pub use denoiser::{
    gaussian_oracle_denoiser, stratified_loss, time_embedding, train_denoiser, Denoiser,
    GaussianOracle, LossRow, MlpDenoiser, TrainConfig, ZeroDenoiser,
};
pub use fine::{
    fine_mse, train_fine_predictor, FineConfig, FineKind, FineModel, FinePredictor, LinearStencil,
    ResidualMlp,
};
pub use sampler::sample;
pub use schedule::{forward_noise, forward_noise_slice, make_schedule, DiffusionSchedule};

use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::Grid3;
use crate::volume::UdfVolume;
use crate::wavelet::{invert, FilterBank, SourceFrame, WaveletPyramid};

pub const DEFAULT_CONDITION_LEN: usize = 64;

/// Where a condition vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    OneHot { class: usize },
    External,
}

/// Fixed-length real vector consumed by a conditional denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    values: Vec<f64>,
    source: ConditionSource,
}

impl ConditionEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("condition embedding must be nonempty and finite"));
        }
        Ok(Self {
            values,
            source: ConditionSource::External,
        })
    }

    pub fn one_hot(class: usize, len: usize) -> Result<Self> {
        if class >= len {
            return Err(invalid(format!(
                "class {class} does not fit an embedding of length {len}"
            )));
        }
        let mut values = vec![0.0; len];
        values[class] = 1.0;
        Ok(Self {
            values,
            source: ConditionSource::OneHot { class },
        })
    }

    /// Accepts either a class index or comma/whitespace separated values.
    pub fn parse(text: &str, len: usize) -> Result<Self> {
        let t = text.trim();
        if let Ok(class) = t.parse::<usize>() {
            return Self::one_hot(class, len);
        }
        let values: Vec<f64> = t
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad condition value `{s}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != len {
            return Err(invalid(format!(
                "condition has {} values, expected {len}",
                values.len()
            )));
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn source(&self) -> ConditionSource {
        self.source
    }
}

/// Scalar standardization of coarse coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub const IDENTITY: Self = Self {
        mean: 0.0,
        std: 1.0,
    };

    /// Mean and standard deviation over every value of every volume; a zero
    /// spread falls back to unit scale.
    pub fn fit(volumes: &[Grid3]) -> Result<Self> {
        let n: usize = volumes.iter().map(|v| v.len()).sum();
        if n == 0 {
            return Err(invalid("cannot standardize an empty dataset"));
        }
        let mean = volumes.iter().flat_map(|v| v.data()).sum::<f64>() / n as f64;
        let var = volumes
            .iter()
            .flat_map(|v| v.data())
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n as f64;
        let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn forward(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn inverse(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.std + self.mean).collect()
    }
}

/// Pyramid layout the generator produces.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMeta {
    pub levels: usize,
    pub filter_len: usize,
    pub chain: Vec<[usize; 3]>,
    pub frame: SourceFrame,
}

impl GeneratorMeta {
    pub fn of(pyr: &WaveletPyramid) -> Self {
        Self {
            levels: pyr.levels,
            filter_len: pyr.filter_len,
            chain: pyr.chain.clone(),
            frame: pyr.frame,
        }
    }

    pub fn coarse_dims(&self) -> [usize; 3] {
        self.chain[self.levels]
    }
}

/// A trained generator; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub schedule: DiffusionSchedule,
    pub denoiser: MlpDenoiser,
    pub fine: FineModel,
    pub norm: Standardizer,
    pub meta: GeneratorMeta,
}

impl Generator {
    pub fn generate(
        &self,
        bank: &FilterBank,
        condition: Option<&ConditionEmbedding>,
        seed: u64,
    ) -> Result<UdfVolume> {
        generate_udf(
            &self.denoiser,
            &self.fine,
            bank,
            &self.schedule,
            &self.norm,
            &self.meta,
            condition,
            seed,
        )
    }
}

/// Sample a coarse volume, predict its details, invert and clamp.
#[allow(clippy::too_many_arguments)]
pub fn generate_udf(
    model: &dyn Denoiser,
    fine_model: &dyn FinePredictor,
    bank: &FilterBank,
    sched: &DiffusionSchedule,
    norm: &Standardizer,
    meta: &GeneratorMeta,
    condition: Option<&ConditionEmbedding>,
    seed: u64,
) -> Result<UdfVolume> {
    if bank.len() != meta.filter_len {
        return Err(mismatch(format!(
            "bank has {} taps, generator was trained with {}",
            bank.len(),
            meta.filter_len
        )));
    }
    let dims = meta.coarse_dims();
    let z = sample(model, sched, dims, condition.map(|c| c.values()), seed)?;
    let coarse = Grid3::from_vec(dims, norm.inverse(z.data()))?;
    let fine = fine_model.predict(&coarse)?;
    let pyr = WaveletPyramid {
        coarse,
        fine,
        levels: meta.levels,
        filter_len: meta.filter_len,
        chain: meta.chain.clone(),
        frame: meta.frame,
    };
    invert(&pyr, bank)
}
