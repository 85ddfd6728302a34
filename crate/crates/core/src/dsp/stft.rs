use rustfft::Fft;
use rustfft::num_complex::Complex64;

use super::{FeatureConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Complex STFT coefficients, `[frames × (fft_size/2 + 1)]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    values: Vec<Complex64>,
    frames: usize,
    bins: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub window_length: usize,
}

impl ComplexSpectrogram {
    pub(crate) fn from_parts(
        values: Vec<Complex64>,
        frames: usize,
        cfg: &FeatureConfig,
    ) -> Result<Self> {
        let bins = cfg.n_bins();
        if values.len() != frames * bins {
            return Err(Error::shape(frames * bins, values.len()));
        }
        Ok(ComplexSpectrogram {
            values,
            frames,
            bins,
            fft_size: cfg.fft_size,
            hop: cfg.hop,
            window_length: cfg.window_length,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames
    }

    pub fn n_bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.values[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn magnitude(&self) -> Mat {
        Mat::from_vec(
            self.frames,
            self.bins,
            self.values.iter().map(|z| z.norm()).collect(),
        )
        .expect("shape is consistent by construction")
    }

    /// Every coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: Complex64) -> ComplexSpectrogram {
        ComplexSpectrogram {
            values: self.values.iter().map(|z| z * factor).collect(),
            ..self.clone()
        }
    }
}

pub(super) fn stft(
    cfg: &FeatureConfig,
    window: &[f64],
    fft: &dyn Fft<f64>,
    w: &Waveform,
) -> Result<ComplexSpectrogram> {
    if w.is_empty() {
        return Err(Error::invalid("cannot analyse an empty waveform"));
    }
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "expected {} Hz audio, got {} Hz",
            cfg.sample_rate,
            w.sample_rate()
        )));
    }
    let win = cfg.window_length;
    let pad = win / 2;
    let mut padded = vec![0.0; w.len() + 2 * pad];
    padded[pad..pad + w.len()].copy_from_slice(w.samples());

    let frames = cfg.n_frames(w.len());
    let bins = cfg.n_bins();
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * cfg.hop;
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for (j, z) in buf.iter_mut().take(win).enumerate() {
            z.re = padded[start + j] * window[j];
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram::from_parts(values, frames, cfg)
}

pub(super) fn istft(
    cfg: &FeatureConfig,
    window: &[f64],
    ifft: &dyn Fft<f64>,
    spec: &ComplexSpectrogram,
    n_samples: usize,
) -> Result<Waveform> {
    if spec.bins != cfg.n_bins() || spec.hop != cfg.hop || spec.window_length != cfg.window_length
    {
        return Err(Error::invalid("spectrogram geometry does not match analyzer"));
    }
    let n = cfg.fft_size;
    let win = cfg.window_length;
    let pad = win / 2;
    let total = (spec.frames - 1) * cfg.hop + win;
    let mut out = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    for f in 0..spec.frames {
        let row = spec.frame(f);
        buf[..spec.bins].copy_from_slice(row);
        for k in 1..n - spec.bins + 1 {
            buf[n - k] = row[k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = f * cfg.hop;
        for j in 0..win {
            out[start + j] += buf[j].re / n as f64 * window[j];
            wsum[start + j] += window[j] * window[j];
        }
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let k = i + pad;
        let v = if k < total && wsum[k] > 1e-10 {
            out[k] / wsum[k]
        } else {
            0.0
        };
        samples.push(v);
    }
    Waveform::new(samples, cfg.sample_rate)
}
