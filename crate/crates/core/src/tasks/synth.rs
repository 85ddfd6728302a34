//! Speech-like test signals: a glottal-style harmonic source shaped by
//! per-symbol formant targets, with per-speaker pitch, vocal-tract scale
//! and spectral tilt.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::alignment::{Alignment, Segment};
use crate::dsp::{SAMPLE_RATE, Waveform};
use crate::error::{Error, Result};

const HOP: usize = 160;
/// Segment length bounds in frames (50–300 ms).
pub const MIN_SEGMENT_FRAMES: usize = 5;
pub const MAX_SEGMENT_FRAMES: usize = 30;
/// Symbol 0 is silence.
pub const SILENCE: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCorpusConfig {
    pub n_utterances: usize,
    pub duration_range_s: (f64, f64),
    pub n_speakers: usize,
    pub snr_range_db: (f64, f64),
    pub symbol_vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            n_utterances: 200,
            duration_range_s: (1.0, 2.0),
            n_speakers: 8,
            snr_range_db: (-5.0, 5.0),
            symbol_vocab_size: 24,
            seed: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range_s;
        if self.n_utterances == 0 || self.n_speakers == 0 {
            return Err(Error::config("corpus needs at least one utterance and one speaker"));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("bad duration range ({lo}, {hi})")));
        }
        let (a, b) = self.snr_range_db;
        if !(a <= b && a.is_finite() && b.is_finite()) {
            return Err(Error::config(format!("bad SNR range ({a}, {b})")));
        }
        if self.symbol_vocab_size < 2 {
            return Err(Error::config("symbol vocabulary needs silence plus at least one phone"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    /// Multiplies every formant frequency (shorter tract → larger).
    pub formant_scale: f64,
    /// High-frequency roll-off of the harmonic source.
    pub tilt_db_per_khz: f64,
    pub breathiness: f64,
}

/// Deterministic, evenly spread speaker profiles.
pub fn speaker_profiles(n: usize, seed: u64) -> Vec<SpeakerProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5bea_4e55);
    (0..n)
        .map(|i| {
            let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            // pitch and tract length co-vary loosely, as in real voices
            let f0 = 95.0 * (240.0f64 / 95.0).powf(u) * rng.random_range(0.95..1.05);
            let scale = 0.85 + 0.35 * ((u + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0));
            SpeakerProfile {
                f0_hz: f0,
                formant_scale: scale,
                tilt_db_per_khz: rng.random_range(2.5..5.0),
                breathiness: rng.random_range(0.01..0.05),
            }
        })
        .collect()
}

/// Acoustic target for one symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct Phone {
    pub voiced: bool,
    pub formants: [f64; 3],
    pub gain: f64,
    /// Centre of the frication band for unvoiced phones.
    pub noise_hz: f64,
}

/// Symbol inventory, identical for every corpus with the same size.
pub fn phone_table(vocab: usize) -> Vec<Phone> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9_4015);
    (0..vocab)
        .map(|s| {
            if s == SILENCE {
                return Phone {
                    voiced: false,
                    formants: [500.0, 1500.0, 2500.0],
                    gain: 0.0,
                    noise_hz: 3000.0,
                };
            }
            Phone {
                voiced: s % 5 != 0,
                formants: [
                    rng.random_range(250.0..900.0),
                    rng.random_range(850.0..2400.0),
                    rng.random_range(2300.0..3300.0),
                ],
                gain: rng.random_range(0.5..1.0),
                noise_hz: rng.random_range(2500.0..6000.0),
            }
        })
        .collect()
}

/// One generated recording with its oracle frame alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub wave: Waveform,
    pub alignment: Option<Alignment>,
    pub speaker: String,
}

/// Generate the corpus described by `cfg`; the same config always yields
/// the same samples.
pub fn make_synth_speech(cfg: &SynthCorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let speakers = speaker_profiles(cfg.n_speakers, cfg.seed);
    let phones = phone_table(cfg.symbol_vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_utterances);
    for i in 0..cfg.n_utterances {
        let speaker = i % cfg.n_speakers;
        let (lo, hi) = cfg.duration_range_s;
        let dur = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let alignment = random_alignment(dur, cfg.symbol_vocab_size, &mut rng);
        let wave = render(&alignment, &speakers[speaker], &phones, &mut rng)?;
        out.push(Utterance {
            wave,
            alignment: Some(alignment),
            speaker: format!("spk{speaker:02}"),
        });
    }
    Ok(out)
}

fn random_alignment<R: Rng + ?Sized>(duration_s: f64, vocab: usize, rng: &mut R) -> Alignment {
    let target = ((duration_s * 100.0).round() as usize).max(MIN_SEGMENT_FRAMES);
    let mut segments = Vec::new();
    let mut start = 0;
    if rng.random::<f64>() < 0.5 {
        let len = rng.random_range(MIN_SEGMENT_FRAMES..=MAX_SEGMENT_FRAMES);
        segments.push(Segment { symbol: SILENCE, start, end: len });
        start = len;
    }
    while start < target {
        let symbol = if rng.random::<f64>() < 0.1 {
            SILENCE
        } else {
            rng.random_range(1..vocab)
        };
        let len = rng.random_range(MIN_SEGMENT_FRAMES..=MAX_SEGMENT_FRAMES);
        segments.push(Segment { symbol, start, end: start + len });
        start += len;
    }
    Alignment::new(segments).expect("contiguous by construction")
}

/// Frame `f` is centred on sample `f·hop`, so `L` frames need `(L−1)·hop`
/// samples.
fn render<R: Rng + ?Sized>(
    alignment: &Alignment,
    speaker: &SpeakerProfile,
    phones: &[Phone],
    rng: &mut R,
) -> Result<Waveform> {
    let frames = alignment.frame_symbols();
    let n = (frames.len() - 1) * HOP;
    let sr = SAMPLE_RATE as f64;
    let total_s = n as f64 / sr;
    let vibrato_phase = rng.random_range(0.0..2.0 * PI);
    let vibrato_hz = rng.random_range(3.0..6.0);
    let pitch_offset = rng.random_range(0.92..1.08);

    // one-pole smoothing of articulatory targets (~12 ms and ~4 ms)
    let a_formant = (-1.0 / (0.012 * sr)).exp();
    let a_gain = (-1.0 / (0.004 * sr)).exp();
    let first = &phones[frames[0]];
    let mut formants = first.formants.map(|f| f * speaker.formant_scale);
    let mut voiced_gain = 0.0;
    let mut noise_gain = 0.0;
    let mut noise_hz = first.noise_hz;
    let mut phase = 0.0;
    let mut res = Resonator::default();
    let mut out = Vec::with_capacity(n);
    let tilt = speaker.tilt_db_per_khz;

    for i in 0..n {
        let t = i as f64 / sr;
        let p = &phones[frames[(i + HOP / 2) / HOP]];
        let target_f = p.formants.map(|f| f * speaker.formant_scale);
        for k in 0..3 {
            formants[k] = a_formant * formants[k] + (1.0 - a_formant) * target_f[k];
        }
        let (tv, tn) = if p.voiced { (p.gain, speaker.breathiness * p.gain) } else { (0.0, 0.4 * p.gain) };
        voiced_gain = a_gain * voiced_gain + (1.0 - a_gain) * tv;
        noise_gain = a_gain * noise_gain + (1.0 - a_gain) * tn;
        noise_hz = a_formant * noise_hz + (1.0 - a_formant) * p.noise_hz;

        let f0 = speaker.f0_hz
            * pitch_offset
            * (1.0 + 0.03 * (2.0 * PI * vibrato_hz * t + vibrato_phase).sin())
            * (1.0 - 0.12 * t / total_s.max(1e-9));
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);

        let mut v = 0.0;
        if voiced_gain > 1e-4 {
            let mut k = 1;
            while k as f64 * f0 < 7600.0 {
                let fk = k as f64 * f0;
                let env: f64 = formants
                    .iter()
                    .enumerate()
                    .map(|(j, &fj)| {
                        let bw = 60.0 + 40.0 * j as f64 + 0.05 * fj;
                        1.0 / (1.0 + ((fk - fj) / bw).powi(2))
                    })
                    .sum();
                let roll = 10f64.powf(-tilt * fk / 1000.0 / 20.0);
                v += (env + 0.02) * roll * (k as f64 * phase).sin();
                k += 1;
            }
        }
        let white: f64 = StandardNormal.sample(rng);
        let fric = res.step(white, noise_hz, 0.6 * noise_hz, sr);
        out.push(0.05 * voiced_gain * v + noise_gain * 0.1 * fric);
    }

    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
    let gain = if rms > 0.0 { 0.08 * 10f64.powf(rng.random_range(-3.0..3.0) / 20.0) / rms } else { 0.0 };
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs())) * gain;
    let gain = if peak > 0.95 { gain * 0.95 / peak } else { gain };
    Waveform::new(out.into_iter().map(|x| x * gain).collect(), SAMPLE_RATE)
}

/// Two-pole band-pass resonator.
#[derive(Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, centre: f64, bandwidth: f64, sr: f64) -> f64 {
        let r = (-PI * bandwidth / sr).exp();
        let c = 2.0 * r * (2.0 * PI * centre / sr).cos();
        let y = (1.0 - r) * x + c * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    /// Low-frequency rumble.
    Brown,
    /// Amplitude-modulated band noise.
    Babble,
    /// Mains-style harmonic hum over a faint noise floor.
    Hum,
}

pub const NOISE_KINDS: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Brown, NoiseKind::Babble, NoiseKind::Hum];

/// Unit-RMS noise of the given kind.
pub fn make_noise<R: Rng + ?Sized>(n: usize, kind: NoiseKind, rng: &mut R) -> Result<Waveform> {
    let sr = SAMPLE_RATE as f64;
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    match kind {
        NoiseKind::White => {}
        NoiseKind::Brown => {
            let mut y = 0.0;
            for v in x.iter_mut() {
                y = 0.98 * y + *v;
                *v = y;
            }
        }
        NoiseKind::Babble => {
            let mut res = Resonator::default();
            let centre = rng.random_range(400.0..1500.0);
            let rate = rng.random_range(2.0..6.0);
            let ph = rng.random_range(0.0..2.0 * PI);
            for (i, v) in x.iter_mut().enumerate() {
                let m = 0.6 + 0.4 * (2.0 * PI * rate * i as f64 / sr + ph).sin();
                *v = m * res.step(*v, centre, 1200.0, sr);
            }
        }
        NoiseKind::Hum => {
            let base = if rng.random::<bool>() { 50.0 } else { 60.0 };
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let hum: f64 = (1..=8).map(|k| (2.0 * PI * base * k as f64 * t).sin() / k as f64).sum();
                *v = hum + 0.05 * *v;
            }
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    Waveform::new(x, SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MelAnalyzer;

    fn small(seed: u64) -> SynthCorpusConfig {
        SynthCorpusConfig {
            n_utterances: 6,
            duration_range_s: (0.5, 1.0),
            n_speakers: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let a = make_synth_speech(&small(3)).unwrap();
        let b = make_synth_speech(&small(3)).unwrap();
        let c = make_synth_speech(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn alignments_cover_every_frame() {
        let analyzer = MelAnalyzer::shared();
        for u in make_synth_speech(&small(5)).unwrap() {
            let frames = analyzer.config().n_frames(u.wave.len());
            let alignment = u.alignment.unwrap();
            assert_eq!(alignment.n_frames(), frames);
            assert_eq!(alignment.frame_symbols().len(), frames);
            let mut expect = 0;
            for s in alignment.segments() {
                assert_eq!(s.start, expect);
                let len = s.end - s.start;
                assert!((MIN_SEGMENT_FRAMES..=MAX_SEGMENT_FRAMES).contains(&len));
                expect = s.end;
            }
            assert!(u.wave.samples().iter().all(|x| x.abs() <= 1.0));
            assert!(u.wave.rms() > 0.01);
        }
    }

    #[test]
    fn speakers_are_spectrally_distinct() {
        let cfg = SynthCorpusConfig {
            n_utterances: 100,
            duration_range_s: (0.5, 0.8),
            n_speakers: 2,
            ..Default::default()
        };
        let analyzer = MelAnalyzer::shared();
        let corpus = make_synth_speech(&cfg).unwrap();
        // long-term average log-Mel spectrum per utterance
        let profiles: Vec<(String, Vec<f64>)> = corpus
            .iter()
            .map(|u| {
                let m = analyzer.wave_to_logmel(&u.wave).unwrap();
                let v = m.values();
                let mean = (0..v.cols())
                    .map(|c| (0..v.rows()).map(|r| v.get(r, c)).sum::<f64>() / v.rows() as f64)
                    .collect();
                (u.speaker.clone(), mean)
            })
            .collect();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..profiles.len() {
            for j in i + 1..profiles.len() {
                let d = profiles[i].1.iter().zip(&profiles[j].1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if profiles[i].0 == profiles[j].0 {
                    within += d;
                    nw += 1;
                } else {
                    between += d;
                    nb += 1;
                }
            }
        }
        let (within, between) = (within / nw as f64, between / nb as f64);
        assert!(between > within, "between {between} within {within}");
    }

    #[test]
    fn noise_is_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in NOISE_KINDS {
            let w = make_noise(8000, kind, &mut rng).unwrap();
            assert!((w.rms() - 1.0).abs() < 1e-9, "{kind:?}");
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthCorpusConfig { n_utterances: 0, ..Default::default() }.validate().is_err());
        assert!(SynthCorpusConfig { duration_range_s: (2.0, 1.0), ..Default::default() }.validate().is_err());
        assert!(SynthCorpusConfig { symbol_vocab_size: 1, ..Default::default() }.validate().is_err());
        assert!(SynthCorpusConfig { snr_range_db: (f64::NAN, 1.0), ..Default::default() }.validate().is_err());
    }
}
