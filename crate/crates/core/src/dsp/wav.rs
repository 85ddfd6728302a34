//! 16-bit PCM mono WAV reading and writing.

use std::path::Path;

use super::{SAMPLE_RATE, Waveform};
use crate::error::{Error, Result};

const FORMAT: &str = "wav";

pub fn encode(w: &Waveform) -> Vec<u8> {
    let data_len = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + w.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Parse a RIFF/WAVE byte stream. Only 16-bit PCM mono at 16 kHz is accepted.
pub fn decode(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(FORMAT, "missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(FORMAT, "chunk extends past end of file"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::format(FORMAT, "fmt chunk too short"));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| Error::format(FORMAT, "data chunk before fmt chunk"))?;
                if tag != 1 || bits != 16 {
                    return Err(Error::format(FORMAT, "only 16-bit PCM is supported"));
                }
                if channels != 1 {
                    return Err(Error::format(FORMAT, format!("expected mono, got {channels} channels")));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::format(FORMAT, format!("expected {SAMPLE_RATE} Hz, got {rate} Hz")));
                }
                if body.len() % 2 != 0 {
                    return Err(Error::format(FORMAT, "odd number of data bytes"));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    Err(Error::format(FORMAT, "no data chunk"))
}

pub fn read(path: impl AsRef<Path>) -> Result<Waveform> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    std::fs::write(path, encode(w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_quantizes_to_16_bits() {
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.999, -1.0], SAMPLE_RATE).unwrap();
        let back = decode(&encode(&w)).unwrap();
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn rejects_wrong_rate_and_truncation() {
        let w = Waveform::new(vec![0.1; 10], 8000).unwrap();
        assert!(decode(&encode(&w)).is_err());
        let good = encode(&Waveform::silence(10));
        assert!(decode(&good[..good.len() - 3]).is_err());
        assert!(decode(b"RIFF").is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = encode(&Waveform::new(vec![0.25; 4], SAMPLE_RATE).unwrap());
        let extra = [b'L', b'I', b'S', b'T', 3, 0, 0, 0, 1, 2, 3, 0];
        bytes.splice(12..12, extra);
        let w = decode(&bytes).unwrap();
        assert_eq!(w.len(), 4);
    }
}
