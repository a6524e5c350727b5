//! Filter bank text files and the `UDFP` pyramid container.
//!
//! A bank file is JSON:
//!
//! ```text
//! {
//!   "format": "udfwave-filter-bank",
//!   "version": 1,
//!   "analysis_low":   { "offset": 0, "taps": [ ... ] },
//!   "analysis_high":  { "offset": 0, "taps": [ ... ] },
//!   "synthesis_low":  { "offset": 0, "taps": [ ... ] },
//!   "synthesis_high": { "offset": 0, "taps": [ ... ] }
//! }
//! ```
//!
//! Taps are written with 17 significant digits, which round-trips every
//! `f64` exactly.
//!
//! A pyramid file is little-endian binary: magic `UDFP`, version `u32`,
//! levels `u32`, filter length `u32`, the `(levels + 1) x 3` resolution
//! chain as `u32`, origin `3 x f64`, spacing `f64`, truncation `f64`, then
//! the coarse band followed by the seven fine bands as `f64`, x-fastest.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Deserialize;

use super::{level_chain, Band, Filter, FilterBank, SourceFrame, WaveletPyramid, FINE_CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::grid::Grid3;

const BANK_FORMAT: &str = "udfwave-filter-bank";
const BANK_VERSION: u32 = 1;
pub const PYRAMID_MAGIC: &[u8; 4] = b"UDFP";
pub const PYRAMID_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterRecord {
    offset: i64,
    taps: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BankRecord {
    format: String,
    version: u32,
    analysis_low: FilterRecord,
    analysis_high: FilterRecord,
    synthesis_low: FilterRecord,
    synthesis_high: FilterRecord,
}

pub fn bank_to_json(bank: &FilterBank) -> String {
    let mut s = String::new();
    writeln!(s, "{{").unwrap();
    writeln!(s, "  \"format\": \"{BANK_FORMAT}\",").unwrap();
    writeln!(s, "  \"version\": {BANK_VERSION},").unwrap();
    for (i, band) in Band::ALL.iter().enumerate() {
        let f = bank.filter(*band);
        let taps: Vec<String> = f.taps().iter().map(|t| format!("{t:.16e}")).collect();
        let comma = if i + 1 < Band::ALL.len() { "," } else { "" };
        writeln!(
            s,
            "  \"{}\": {{ \"offset\": {}, \"taps\": [{}] }}{comma}",
            band.name(),
            f.offset(),
            taps.join(", ")
        )
        .unwrap();
    }
    writeln!(s, "}}").unwrap();
    s
}

pub fn bank_from_json(text: &str) -> Result<FilterBank> {
    let rec: BankRecord =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("filter bank: {e}")))?;
    if rec.format != BANK_FORMAT {
        return Err(Error::Format(format!(
            "unexpected format tag {:?}",
            rec.format
        )));
    }
    if rec.version != BANK_VERSION {
        return Err(Error::Format(format!(
            "unsupported bank version {}",
            rec.version
        )));
    }
    let f = |r: FilterRecord| Filter::new(r.taps, r.offset);
    FilterBank::new(
        f(rec.analysis_low)?,
        f(rec.analysis_high)?,
        f(rec.synthesis_low)?,
        f(rec.synthesis_high)?,
    )
    .map_err(|e| Error::Format(format!("filter bank: {e}")))
}

pub fn save_bank(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bank_to_json(bank))?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    bank_from_json(&fs::read_to_string(path)?)
}

pub(crate) fn encode_pyramid(p: &WaveletPyramid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PYRAMID_MAGIC);
    let w = |out: &mut Vec<u8>, v: u32| out.write_u32::<LittleEndian>(v).unwrap();
    w(&mut out, PYRAMID_VERSION);
    w(&mut out, p.levels as u32);
    w(&mut out, p.filter_len as u32);
    for d in &p.chain {
        for &n in d {
            w(&mut out, n as u32);
        }
    }
    for c in p.frame.origin.iter() {
        out.write_f64::<LittleEndian>(*c).unwrap();
    }
    out.write_f64::<LittleEndian>(p.frame.spacing).unwrap();
    out.write_f64::<LittleEndian>(p.frame.truncation).unwrap();
    for g in std::iter::once(&p.coarse).chain(&p.fine) {
        for &v in g.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn decode_pyramid(bytes: &[u8]) -> Result<WaveletPyramid> {
    if bytes.len() < 16 || &bytes[..4] != PYRAMID_MAGIC {
        return Err(fmt("not a pyramid file (bad magic)"));
    }
    let mut r = Cursor::new(&bytes[4..]);
    let eof = |_| fmt("pyramid file is truncated");
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != PYRAMID_VERSION {
        return Err(fmt(format!("unsupported pyramid version {version}")));
    }
    let levels = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let filter_len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if levels == 0 || levels > 16 || filter_len < 2 {
        return Err(fmt(format!(
            "implausible header: {levels} levels, {filter_len} taps"
        )));
    }
    let mut chain = Vec::with_capacity(levels + 1);
    for _ in 0..=levels {
        let mut d = [0usize; 3];
        for n in &mut d {
            *n = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        }
        chain.push(d);
    }
    if chain != level_chain(chain[0], filter_len, levels) {
        return Err(fmt("resolution chain does not match the filter length"));
    }
    let mut origin = Vec3::zeros();
    for a in 0..3 {
        origin[a] = r.read_f64::<LittleEndian>().map_err(eof)?;
    }
    let spacing = r.read_f64::<LittleEndian>().map_err(eof)?;
    let truncation = r.read_f64::<LittleEndian>().map_err(eof)?;
    let dims = chain[levels];
    let band = dims.iter().product::<usize>();
    let remaining = bytes.len() - 4 - r.position() as usize;
    if remaining != 8 * band * (FINE_CHANNELS + 1) {
        return Err(fmt(format!(
            "payload is {remaining} bytes, header implies {}",
            8 * band * (FINE_CHANNELS + 1)
        )));
    }
    let mut read_band = || -> Result<Grid3> {
        let mut v = vec![0.0; band];
        r.read_f64_into::<LittleEndian>(&mut v).map_err(eof)?;
        Grid3::from_vec(dims, v)
    };
    let coarse = read_band()?;
    let fine = (0..FINE_CHANNELS)
        .map(|_| read_band())
        .collect::<Result<_>>()?;
    Ok(WaveletPyramid {
        coarse,
        fine,
        levels,
        filter_len,
        chain,
        frame: SourceFrame {
            origin,
            spacing,
            truncation,
        },
    })
}

pub fn write_pyramid(p: &WaveletPyramid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pyramid(p))?;
    Ok(())
}

pub fn read_pyramid(path: impl AsRef<Path>) -> Result<WaveletPyramid> {
    decode_pyramid(&fs::read(path)?)
}
