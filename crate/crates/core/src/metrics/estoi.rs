//! Extended short-time objective intelligibility.
//!
//! Both signals are resampled to 10 kHz, frames more than 40 dB below the
//! loudest reference frame are removed, and one-third-octave band envelopes
//! (15 bands from 150 Hz) are compared over 30-frame (384 ms) segments after
//! normalising each segment's rows and columns to zero mean, unit norm.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::resample::resample;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const FS: usize = 10_000;
const N_FRAME: usize = 256;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per analysis segment.
pub const SEGMENT: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// `np.hanning(n + 2)[1..n+1]`: a Hann window without its zero endpoints.
fn hanning_inner(n: usize) -> Vec<f64> {
    let m = n + 2;
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (m - 1) as f64).cos()).collect()
}

struct Tables {
    window: Vec<f64>,
    obm: Mat,
    fft: Arc<dyn Fft<f64>>,
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| Tables {
        window: hanning_inner(N_FRAME),
        obm: third_octave_matrix(FS as f64, NFFT, NUM_BANDS, MIN_FREQ),
        fft: FftPlanner::new().plan_fft_forward(NFFT),
    })
}

/// Band-summing matrix `[bands × (nfft/2 + 1)]`; band edges snap to the
/// nearest FFT bin and each band covers `[low, high)`.
pub fn third_octave_matrix(fs: f64, nfft: usize, bands: usize, min_freq: f64) -> Mat {
    let n_bins = nfft / 2 + 1;
    let f: Vec<f64> = (0..n_bins).map(|i| i as f64 * fs / nfft as f64).collect();
    let nearest = |target: f64| {
        (0..n_bins)
            .min_by(|&a, &b| (f[a] - target).powi(2).total_cmp(&(f[b] - target).powi(2)))
            .unwrap_or(0)
    };
    let mut obm = Mat::zeros(bands, n_bins);
    for k in 0..bands {
        let lo = nearest(min_freq * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0));
        let hi = nearest(min_freq * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0));
        for b in lo..hi {
            obm.set(k, b, 1.0);
        }
    }
    obm
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(N_FRAME)).step_by(N_FRAME / 2)
}

/// Drop frames of both signals where the reference is more than
/// `DYN_RANGE_DB` below its loudest frame, then overlap-add the rest.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = &tables().window;
    let hop = N_FRAME / 2;
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..N_FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|&(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let n = (kept.len() - 1) * hop + N_FRAME;
    let (mut xs, mut ys) = (vec![0.0; n], vec![0.0; n]);
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..N_FRAME {
            xs[j * hop + i] += w[i] * x[s + i];
            ys[j * hop + i] += w[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// One-third-octave band magnitudes, `[frames × bands]`.
fn band_envelopes(x: &[f64]) -> Mat {
    let t = tables();
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let n_bins = NFFT / 2 + 1;
    let mut out = Mat::zeros(starts.len(), NUM_BANDS);
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    let mut power = vec![0.0; n_bins];
    for (r, &s) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for i in 0..N_FRAME {
            buf[i].re = t.window[i] * x[s + i];
        }
        t.fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for k in 0..NUM_BANDS {
            let e: f64 = t.obm.row(k).iter().zip(&power).map(|(a, b)| a * b).sum();
            out.set(r, k, e.sqrt());
        }
    }
    out
}

/// Centre and unit-normalise `v`; a constant vector becomes all zeros.
fn normalise(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > EPS {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// `segment` is `[bands][frames]`; rows over time first, then columns over
/// bands.
fn row_col_normalise(segment: &mut [Vec<f64>]) {
    for row in segment.iter_mut() {
        normalise(row);
    }
    let frames = segment[0].len();
    let mut col = vec![0.0; segment.len()];
    for j in 0..frames {
        for (c, row) in col.iter_mut().zip(segment.iter()) {
            *c = row[j];
        }
        normalise(&mut col);
        for (c, row) in col.iter().zip(segment.iter_mut()) {
            row[j] = *c;
        }
    }
}

/// ESTOI of `est` against the clean reference `reference`.
pub fn estoi(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!("{} samples", reference.len()), est.len()));
    }
    if est.sample_rate() != reference.sample_rate() {
        return Err(Error::invalid("sample rates differ"));
    }
    let sr = est.sample_rate() as usize;
    let x = resample(reference.samples(), sr, FS)?;
    let y = resample(est.samples(), sr, FS)?;
    let (x, y) = remove_silent_frames(&x, &y);
    let xe = band_envelopes(&x);
    let ye = band_envelopes(&y);
    let frames = xe.rows();
    if frames < SEGMENT {
        return Err(Error::invalid(format!(
            "ESTOI needs at least {SEGMENT} non-silent frames, got {frames}"
        )));
    }
    let n_seg = frames - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..n_seg {
        let take = |e: &Mat| -> Vec<Vec<f64>> {
            (0..NUM_BANDS).map(|k| (m..m + SEGMENT).map(|r| e.get(r, k)).collect()).collect()
        };
        let mut xs = take(&xe);
        let mut ys = take(&ye);
        row_col_normalise(&mut xs);
        row_col_normalise(&mut ys);
        let dot: f64 = xs.iter().zip(&ys).flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q)).sum();
        total += dot / SEGMENT as f64;
    }
    Ok(total / n_seg as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn third_octave_bands_are_disjoint_and_ordered() {
        let obm = third_octave_matrix(10_000.0, 512, 15, 150.0);
        assert_eq!(obm.shape(), (15, 257));
        let mut last_hi = 0;
        for k in 0..15 {
            let bins: Vec<usize> = (0..257).filter(|&b| obm.get(k, b) == 1.0).collect();
            assert!(!bins.is_empty());
            assert!(bins[0] >= last_hi);
            // contiguous
            assert_eq!(bins.last().unwrap() - bins[0] + 1, bins.len());
            last_hi = bins.last().unwrap() + 1;
        }
        // first band lower edge 150·2^(−1/6) ≈ 133.6 Hz → bin 7 (136.7 Hz)
        assert_eq!((0..257).position(|b| obm.get(0, b) == 1.0), Some(7));
    }

    #[test]
    fn hanning_matches_numpy_definition() {
        let w = hanning_inner(4);
        // np.hanning(6)[1:5]
        let expect = [0.3454915028125263, 0.9045084971874737, 0.9045084971874737, 0.3454915028125263];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalisation_guards_constant_rows() {
        let mut seg = vec![vec![1.0; 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]];
        row_col_normalise(&mut seg);
        assert!(seg.iter().flatten().all(|v| v.is_finite()));
        let mut flat = vec![vec![2.0; 4], vec![2.0; 4]];
        row_col_normalise(&mut flat);
        assert!(flat.iter().flatten().all(|&v| v == 0.0));
    }
}
