use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::UdfVolume;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const VOLUME_MAGIC: &[u8; 4] = b"UDFV";
pub const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 3 * 8 + 8 + 8;

pub(crate) fn encode(v: &UdfVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.write_u32::<LittleEndian>(VOLUME_VERSION).unwrap();
    for n in v.resolution {
        out.write_u32::<LittleEndian>(n as u32).unwrap();
    }
    for c in v.origin.iter() {
        out.write_f64::<LittleEndian>(*c).unwrap();
    }
    out.write_f64::<LittleEndian>(v.spacing).unwrap();
    out.write_f64::<LittleEndian>(v.truncation).unwrap();
    for &x in &v.values {
        out.write_f32::<LittleEndian>(x).unwrap();
    }
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<UdfVolume> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err("volume file shorter than its header"));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(format_err(format!(
            "bad volume magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let mut r = Cursor::new(&bytes[4..]);
    let version = r.read_u32::<LittleEndian>()?;
    if version != VOLUME_VERSION {
        return Err(format_err(format!("unsupported volume version {version}")));
    }
    let mut res = [0usize; 3];
    for n in &mut res {
        *n = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut origin = Vec3::zeros();
    for a in 0..3 {
        origin[a] = r.read_f64::<LittleEndian>()?;
    }
    let spacing = r.read_f64::<LittleEndian>()?;
    let truncation = r.read_f64::<LittleEndian>()?;
    let count = res
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| format_err("volume dimensions overflow"))?;
    let expected = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err("volume dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(format!(
            "header declares {} bytes, file has {}",
            expected,
            bytes.len()
        )));
    }
    let mut values = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut values)?;
    UdfVolume::new(res, origin, spacing, truncation, values)
        .map_err(|e| format_err(format!("invalid volume contents: {e}")))
}

pub fn write_volume(v: &UdfVolume, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(v))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<UdfVolume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
