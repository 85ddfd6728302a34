//! Binary feature dump: `"MELS"`, version `u32`, frames `u32`, bins `u32`,
//! then row-major little-endian `f32` values.

use std::path::Path;

use super::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"MELS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const FORMAT: &str = "mel container";

pub fn encode(m: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_mels() as u32).to_le_bytes());
    for &v in m.values().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(FORMAT, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(FORMAT, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(FORMAT, format!("unsupported version {version}")));
    }
    let (frames, bins) = (word(8) as usize, word(12) as usize);
    if frames == 0 || bins == 0 {
        return Err(Error::format(FORMAT, "empty matrix"));
    }
    let expected = frames
        .checked_mul(bins)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(FORMAT, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            FORMAT,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let values = Mat::from_vec(frames, bins, data)?;
    MelSpectrogram::new(values).map_err(|e| Error::format(FORMAT, e.to_string()))
}

pub fn read(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, m: &MelSpectrogram) -> Result<()> {
    std::fs::write(path, encode(m))?;
    Ok(())
}
