//! Waveform ⇄ log-Mel conversion.
//!
//! Analysis is a centred STFT (Hann window of 640 samples, hop 160, FFT
//! size 1024) followed by a triangular Mel filterbank on the magnitude
//! spectrum. Synthesis goes back through the filterbank pseudo-inverse,
//! borrows phase from a reference spectrogram and overlap-adds.

pub mod container;
mod mel;
mod stft;
pub mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz};
pub use stft::ComplexSpectrogram;

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_RATE: f64 = 100.0;
pub const N_MELS: usize = 80;

/// Extra phase-source frames tolerated by [`MelAnalyzer::logmel_to_wave`].
pub const FRAME_TOLERANCE: usize = 2;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(n: usize) -> Self {
        Waveform {
            samples: vec![0.0; n],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Log-Mel features, `[frames × mel bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Mat,
}

impl MelSpectrogram {
    pub fn new(values: Mat) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::invalid("mel spectrogram needs at least one frame and bin"));
        }
        if !values.all_finite() {
            return Err(Error::invalid("mel spectrogram contains non-finite values"));
        }
        Ok(MelSpectrogram { values })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn into_values(self) -> Mat {
        self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    pub fn frame_rate(&self) -> f64 {
        FRAME_RATE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub window_length: usize,
    pub n_mels: usize,
    pub floor_eps: f64,
    /// Bound on [`MelAnalyzer::round_trip_error`] for speech-like audio.
    pub round_trip_tolerance: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: SAMPLE_RATE,
            fft_size: 1024,
            hop: 160,
            window_length: 640,
            n_mels: N_MELS,
            floor_eps: 1e-5,
            round_trip_tolerance: 0.5,
        }
    }
}

impl FeatureConfig {
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::config("fft_size must be a power of two"));
        }
        if self.window_length == 0 || self.window_length > self.fft_size {
            return Err(Error::config("window_length must be in 1..=fft_size"));
        }
        if self.hop == 0 || self.hop > self.window_length {
            return Err(Error::config("hop must be in 1..=window_length"));
        }
        if self.floor_eps <= 0.0 {
            return Err(Error::config("floor_eps must be positive"));
        }
        if !(self.round_trip_tolerance > 0.0) {
            return Err(Error::config("round_trip_tolerance must be positive"));
        }
        Ok(())
    }

    /// Frame count produced by the centred STFT for `n_samples` samples.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop + 1
    }
}

/// Analysis/synthesis front end with cached window, FFT plans, filterbank
/// and filterbank pseudo-inverse. Read-only after construction.
pub struct MelAnalyzer {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    filterbank: Mat,
    pinv: Mat,
}

impl std::fmt::Debug for MelAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelAnalyzer").field("cfg", &self.cfg).finish()
    }
}

impl MelAnalyzer {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let filterbank = mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate)?;
        let pinv = pseudo_inverse(&filterbank);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(cfg.fft_size);
        let ifft = planner.plan_fft_inverse(cfg.fft_size);
        Ok(MelAnalyzer {
            window: hann_periodic(cfg.window_length),
            cfg,
            fft,
            ifft,
            filterbank,
            pinv,
        })
    }

    /// Process-wide analyzer for the default configuration.
    pub fn shared() -> &'static MelAnalyzer {
        static SHARED: OnceLock<MelAnalyzer> = OnceLock::new();
        SHARED.get_or_init(|| {
            MelAnalyzer::new(FeatureConfig::default()).expect("default feature config is valid")
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// `[n_mels × F]`
    pub fn filterbank(&self) -> &Mat {
        &self.filterbank
    }

    /// `[F × n_mels]`
    pub fn filterbank_pinv(&self) -> &Mat {
        &self.pinv
    }

    pub fn stft(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        stft::stft(&self.cfg, &self.window, self.fft.as_ref(), w)
    }

    /// Inverse STFT, trimmed or zero-extended to `n_samples`.
    pub fn istft(&self, spec: &ComplexSpectrogram, n_samples: usize) -> Result<Waveform> {
        stft::istft(&self.cfg, &self.window, self.ifft.as_ref(), spec, n_samples)
    }

    pub fn wave_to_logmel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let spec = self.stft(w)?;
        self.spectrogram_to_logmel(&spec)
    }

    pub fn spectrogram_to_logmel(&self, spec: &ComplexSpectrogram) -> Result<MelSpectrogram> {
        let mag = spec.magnitude();
        let floor = self.cfg.floor_eps;
        let mel = mag.matmul_nt(&self.filterbank).map(|e| e.max(floor).ln());
        MelSpectrogram::new(mel)
    }

    /// Linear magnitude estimate `max(pinv · exp(m), 0)`, `[L × F]`.
    pub fn logmel_to_magnitude(&self, m: &MelSpectrogram) -> Result<Mat> {
        if m.n_mels() != self.cfg.n_mels {
            return Err(Error::shape(
                format!("{} mel bins", self.cfg.n_mels),
                m.n_mels(),
            ));
        }
        let energy = m.values().map(f64::exp);
        Ok(energy.matmul_nt(&self.pinv).map(|x| x.max(0.0)))
    }

    /// Invert log-Mel features to audio of `(L − 1) · hop` samples, taking
    /// the phase of `phase_source` frame by frame.
    pub fn logmel_to_wave(
        &self,
        m: &MelSpectrogram,
        phase_source: &ComplexSpectrogram,
    ) -> Result<Waveform> {
        let n = (m.n_frames() - 1) * self.cfg.hop;
        self.logmel_to_wave_len(m, phase_source, n)
    }

    /// Mean absolute log-Mel difference after inverting the features of `w`
    /// with its own phase and analysing the result again.
    pub fn round_trip_error(&self, w: &Waveform) -> Result<f64> {
        let spec = self.stft(w)?;
        let m = self.spectrogram_to_logmel(&spec)?;
        let back = self.logmel_to_wave_len(&m, &spec, w.len())?;
        let again = self.wave_to_logmel(&back)?;
        Ok(m.values().zip_map(again.values(), |a, b| (a - b).abs()).mean())
    }

    pub fn logmel_to_wave_len(
        &self,
        m: &MelSpectrogram,
        phase_source: &ComplexSpectrogram,
        n_samples: usize,
    ) -> Result<Waveform> {
        let frames = m.n_frames();
        let have = phase_source.n_frames();
        if have < frames || have > frames + FRAME_TOLERANCE {
            return Err(Error::shape(
                format!("phase source with {frames}..={} frames", frames + FRAME_TOLERANCE),
                have,
            ));
        }
        if phase_source.n_bins() != self.cfg.n_bins() {
            return Err(Error::shape(
                format!("{} frequency bins", self.cfg.n_bins()),
                phase_source.n_bins(),
            ));
        }
        let mag = self.logmel_to_magnitude(m)?;
        let bins = self.cfg.n_bins();
        let mut values = Vec::with_capacity(frames * bins);
        for f in 0..frames {
            for (b, &a) in mag.row(f).iter().enumerate() {
                let z = phase_source.get(f, b);
                let r = z.norm();
                let unit = if r > 0.0 { z / r } else { Complex64::new(1.0, 0.0) };
                values.push(unit * a);
            }
        }
        let spec = ComplexSpectrogram::from_parts(values, frames, &self.cfg)?;
        self.istft(&spec, n_samples)
    }
}

/// Periodic Hann window, which satisfies constant overlap-add at hop = N/4.
fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn pseudo_inverse(m: &Mat) -> Mat {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let pinv = dm
        .pseudo_inverse(1e-10)
        .expect("pseudo-inverse with positive epsilon cannot fail");
    Mat::from_fn(pinv.nrows(), pinv.ncols(), |r, c| pinv[(r, c)])
}
