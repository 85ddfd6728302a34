//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc filter
//! (60 dB stopband, transition width a tenth of the cutoff).

use crate::error::{Error, Result};

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Modified Bessel function of the first kind, order zero.
pub fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Kaiser window of length `m`.
pub fn kaiser(m: usize, beta: f64) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    (0..m)
        .map(|n| {
            let r = 2.0 * n as f64 / (m - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Anti-aliasing filter for up/down factors `p`/`q` (already reduced),
/// normalised to unit sum and centred at index `(len − 1) / 2`.
pub fn design_filter(p: usize, q: usize) -> Vec<f64> {
    let rejection_db = 60.0;
    let cutoff = 1.0 / (2 * p.max(q)) as f64;
    let roll_off = cutoff / 10.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let window = kaiser((2 * half + 1) as usize, beta);
    let h: Vec<f64> = (-half..=half)
        .zip(&window)
        .map(|(t, w)| w * 2.0 * p as f64 * cutoff * sinc(2.0 * cutoff * t as f64))
        .collect();
    let sum: f64 = h.iter().sum();
    h.into_iter().map(|v| v / sum).collect()
}

/// Resample `x` from `from_rate` to `to_rate`. Output length is
/// `ceil(len · p / q)` with `p/q` the reduced ratio; output sample `m`
/// sits at input time `m · q / p` (zero delay).
pub fn resample(x: &[f64], from_rate: usize, to_rate: usize) -> Result<Vec<f64>> {
    if from_rate == 0 || to_rate == 0 {
        return Err(Error::invalid("sample rates must be positive"));
    }
    let g = gcd(from_rate, to_rate);
    let (p, q) = (to_rate / g, from_rate / g);
    if p == 1 && q == 1 {
        return Ok(x.to_vec());
    }
    let h = design_filter(p, q);
    let half = (h.len() as i64 - 1) / 2;
    let n_out = (x.len() * p).div_ceil(q);
    let (p, q) = (p as i64, q as i64);
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out as i64 {
        // taps k = m·q − i·p with |k| ≤ half
        let centre = m * q;
        let i_lo = ((centre - half) as f64 / p as f64).ceil().max(0.0) as i64;
        let i_hi = ((centre + half).div_euclid(p)).min(x.len() as i64 - 1);
        let mut acc = 0.0;
        let mut i = i_lo;
        while i <= i_hi {
            let k = centre - i * p;
            acc += h[(half + k) as usize] * x[i as usize];
            i += 1;
        }
        out.push(acc * p as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn i0_matches_known_values() {
        // I0(0) = 1, I0(1) = 1.2660658777520082, I0(5) = 27.239871823604442
        assert_eq!(bessel_i0(0.0), 1.0);
        assert!((bessel_i0(1.0) - 1.2660658777520082).abs() < 1e-14);
        assert!((bessel_i0(5.0) - 27.239871823604442).abs() < 1e-11);
    }

    #[test]
    fn filter_shape() {
        let h = design_filter(5, 8);
        assert_eq!(h.len(), 2 * 290 + 1);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..h.len() {
            assert!((h[i] - h[h.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn passband_tone_survives_and_alias_is_removed() {
        let n = 16000;
        let tone = |hz: f64| (0..n).map(|i| (2.0 * PI * hz * i as f64 / 16000.0).sin()).collect::<Vec<_>>();
        let y = resample(&tone(1000.0), 16000, 10000).unwrap();
        assert_eq!(y.len(), 10000);
        // compare the interior to the ideal 10 kHz tone
        let err = (1000..9000)
            .map(|m| (y[m] - (2.0 * PI * 1000.0 * m as f64 / 10000.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-3, "{err}");

        // 7 kHz is above the new Nyquist and must be suppressed
        let y = resample(&tone(7000.0), 16000, 10000).unwrap();
        let rms = (y[1000..9000].iter().map(|v| v * v).sum::<f64>() / 8000.0).sqrt();
        assert!(rms < 2e-3, "{rms}");
    }

    #[test]
    fn identity_ratio() {
        let x = vec![1.0, 2.0, 3.0];
        assert_eq!(resample(&x, 8000, 8000).unwrap(), x);
        assert!(resample(&x, 0, 8000).is_err());
    }
}
