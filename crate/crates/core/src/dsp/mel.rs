use crate::error::{Error, Result};
use crate::tensor::Mat;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, centres equally spaced on the mel
/// scale between 0 Hz and Nyquist. Shape `[n_mels × (fft_size/2 + 1)]`.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Result<Mat> {
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be at least 1"));
    }
    if !fft_size.is_power_of_two() {
        return Err(Error::invalid(format!("fft_size {fft_size} is not a power of two")));
    }
    let bins = fft_size / 2 + 1;
    if n_mels > bins {
        return Err(Error::invalid(format!(
            "{n_mels} mel bands exceed {bins} frequency bins"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;

    let mut fb = Mat::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * bin_hz;
            let w = if f > lo && f <= centre {
                (f - lo) / (centre - lo)
            } else if f > centre && f < hi {
                (hi - f) / (hi - centre)
            } else {
                0.0
            };
            fb.set(m, b, w);
        }
        // Narrow low-frequency filters can fall between bins; give them the
        // nearest bin so every row keeps non-empty support.
        if fb.row(m).iter().all(|&w| w == 0.0) {
            let nearest = ((centre / bin_hz).round() as usize).min(bins - 1);
            fb.set(m, nearest, 1.0);
        }
    }
    Ok(fb)
}
