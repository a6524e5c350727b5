//! The `UDFM` model container.
//!
//! Little-endian: magic `UDFM`, version `u32`, header length `u32`, a UTF-8
//! JSON header of that many bytes, then every parameter as `f32`: the
//! denoiser first, then the fine predictor (stencil weights, then any
//! residual network).

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::fine::{FineKind, FineModel, LinearStencil, ResidualMlp, STENCIL_FEATURES};
use super::{make_schedule, Generator, GeneratorMeta, MlpDenoiser, Standardizer};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::wavelet::{level_chain, SourceFrame, FINE_CHANNELS};

pub const MODEL_MAGIC: &[u8; 4] = b"UDFM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dim: usize,
    cond_dim: usize,
    hidden: usize,
    layers: Vec<(usize, usize)>,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    norm_mean: f64,
    norm_std: f64,
    data_var: f64,
    levels: usize,
    filter_len: usize,
    chain: Vec<[usize; 3]>,
    origin: [f64; 3],
    spacing: f64,
    truncation: f64,
    fine_kind: String,
    fine_hidden: usize,
    fine_mean: f64,
    fine_std: f64,
    denoiser_params: usize,
    fine_params: usize,
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode_generator(g: &Generator) -> Vec<u8> {
    let (fine_hidden, fine_mean, fine_std) = match &g.fine {
        FineModel::Mlp(m) => (m.hidden, m.mean, m.std),
        _ => (0, 0.0, 1.0),
    };
    let mut fine_values: Vec<f64> = Vec::new();
    match &g.fine {
        FineModel::Zero => {}
        FineModel::Linear(s) => fine_values.extend(s.weights.iter().flatten()),
        FineModel::Mlp(m) => {
            fine_values.extend(m.base.weights.iter().flatten());
            fine_values.extend_from_slice(&m.params);
        }
    }
    let d = &g.denoiser;
    let header = Header {
        dim: crate::diffusion::Denoiser::dim(d),
        cond_dim: crate::diffusion::Denoiser::cond_dim(d),
        hidden: d.hidden(),
        layers: d.layer_shapes(),
        steps: g.schedule.steps(),
        beta_start: g.schedule.beta_start(),
        beta_end: g.schedule.beta_end(),
        norm_mean: g.norm.mean,
        norm_std: g.norm.std,
        data_var: d.data_var(),
        levels: g.meta.levels,
        filter_len: g.meta.filter_len,
        chain: g.meta.chain.clone(),
        origin: [
            g.meta.frame.origin.x,
            g.meta.frame.origin.y,
            g.meta.frame.origin.z,
        ],
        spacing: g.meta.frame.spacing,
        truncation: g.meta.frame.truncation,
        fine_kind: g.fine.kind().name().to_string(),
        fine_hidden,
        fine_mean,
        fine_std,
        denoiser_params: d.params().len(),
        fine_params: fine_values.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * (d.params().len() + fine_values.len()));
    out.extend_from_slice(MODEL_MAGIC);
    out.write_u32::<LittleEndian>(MODEL_VERSION).unwrap();
    out.write_u32::<LittleEndian>(json.len() as u32).unwrap();
    out.extend_from_slice(&json);
    for &v in d.params().iter().chain(&fine_values) {
        out.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    out
}

pub fn decode_generator(bytes: &[u8]) -> Result<Generator> {
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(fmt("not a model file (bad magic)"));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != MODEL_VERSION {
        return Err(fmt(format!("unsupported model version {version}")));
    }
    let hlen = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let json = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| fmt("model header is truncated"))?;
    let h: Header = serde_json::from_slice(json).map_err(|e| fmt(format!("model header: {e}")))?;
    let payload = &bytes[12 + hlen..];
    if payload.len() != 4 * (h.denoiser_params + h.fine_params) {
        return Err(fmt(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            4 * (h.denoiser_params + h.fine_params)
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| LittleEndian::read_f32(c) as f64)
        .collect();
    let (dvals, fvals) = values.split_at(h.denoiser_params);

    if h.levels == 0
        || h.chain.len() != h.levels + 1
        || h.chain != level_chain(h.chain[0], h.filter_len, h.levels)
    {
        return Err(fmt("model resolution chain is inconsistent"));
    }
    let schedule =
        make_schedule(h.steps, h.beta_start, h.beta_end).map_err(|e| fmt(e.to_string()))?;
    let denoiser = MlpDenoiser::from_params(h.dim, h.cond_dim, h.hidden, &schedule, dvals.to_vec())
        .and_then(|d| d.with_data_var(h.data_var))
        .map_err(|e| fmt(e.to_string()))?;
    if denoiser.layer_shapes() != h.layers {
        return Err(fmt("layer shapes do not match the architecture"));
    }
    let meta = GeneratorMeta {
        levels: h.levels,
        filter_len: h.filter_len,
        chain: h.chain,
        frame: SourceFrame {
            origin: Vec3::new(h.origin[0], h.origin[1], h.origin[2]),
            spacing: h.spacing,
            truncation: h.truncation,
        },
    };
    let coarse_dims = meta.coarse_dims();
    if coarse_dims.iter().product::<usize>() != h.dim {
        return Err(fmt("denoiser size does not match the coarse resolution"));
    }
    let kind = FineKind::parse(&h.fine_kind).map_err(|e| fmt(e.to_string()))?;
    let stencil_len = FINE_CHANNELS * STENCIL_FEATURES;
    let stencil = |v: &[f64]| LinearStencil {
        weights: v
            .chunks_exact(STENCIL_FEATURES)
            .map(|c| {
                let mut w = [0.0; STENCIL_FEATURES];
                w.copy_from_slice(c);
                w
            })
            .collect(),
    };
    let fine = match kind {
        FineKind::Zero if fvals.is_empty() => FineModel::Zero,
        FineKind::Linear if fvals.len() == stencil_len => FineModel::Linear(stencil(fvals)),
        FineKind::Mlp if fvals.len() == stencil_len + ResidualMlp::param_count(h.fine_hidden) => {
            FineModel::Mlp(ResidualMlp {
                base: stencil(&fvals[..stencil_len]),
                hidden: h.fine_hidden,
                mean: h.fine_mean,
                std: h.fine_std,
                params: fvals[stencil_len..].to_vec(),
            })
        }
        _ => return Err(fmt("fine predictor parameters do not match its kind")),
    };
    Ok(Generator {
        schedule,
        denoiser,
        fine,
        norm: Standardizer {
            mean: h.norm_mean,
            std: h.norm_std,
        },
        meta,
    })
}

pub fn write_generator(g: &Generator, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_generator(g))?;
    Ok(())
}

pub fn read_generator(path: impl AsRef<Path>) -> Result<Generator> {
    decode_generator(&fs::read(path)?)
}
