//! Condition/target pairs for downstream tasks and the synthetic corpus
//! they are drawn from.
//!
//! Every example is stored in model space (features normalised with the
//! model's [`FeatureNorm`]), so masked or dropped conditions are zeros in
//! the same space the network sees.

pub mod alignment;
pub mod synth;

pub use alignment::{Alignment, Manifest, ManifestEntry, Segment};
pub use synth::{
    NOISE_KINDS, NoiseKind, SynthCorpusConfig, Utterance, make_noise, make_synth_speech,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{MelAnalyzer, MelSpectrogram, Waveform, wav};
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, MaskPolicy, apply_mask, sample_mask_plan};
use crate::model::{ConditionBundle, FeatureNorm};
use crate::tensor::Mat;

/// Probability of dropping the enhancement condition per training draw.
pub const ENHANCE_DROP_PROB: f64 = 0.3;
/// Default multitask upsampling for (enhance, separate, synth).
pub const MULTITASK_FACTORS: [usize; 3] = [10, 4, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Enhance,
    Separate,
    Synth,
}

impl std::str::FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhance" => Ok(TaskTag::Enhance),
            "separate" => Ok(TaskTag::Separate),
            "synth" => Ok(TaskTag::Synth),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

/// Waveforms needed to score an example.
#[derive(Clone, Debug, PartialEq)]
pub struct References {
    /// Clean sources, in target order.
    pub sources: Vec<Waveform>,
    /// The signal the condition was computed from; also the phase source.
    pub mixture: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    /// `x1` in model space.
    pub target: Mat,
    pub cond: ConditionBundle,
    /// Frames that contribute to the training loss.
    pub loss_region: Vec<bool>,
    pub task_tag: TaskTag,
    pub aux: Option<References>,
}

impl PairedExample {
    pub fn len(&self) -> usize {
        self.target.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.target.rows() == 0
    }

    /// The condition to train on for one draw: dropped entirely with
    /// probability `drop_prob`, otherwise unchanged. Never partially masked.
    pub fn training_condition<R: Rng + ?Sized>(&self, drop_prob: f64, rng: &mut R) -> ConditionBundle {
        if drop_prob > 0.0 && rng.random::<f64>() < drop_prob {
            ConditionBundle::dropped(self.cond.len(), self.cond.cond_frames.cols())
        } else {
            self.cond.clone()
        }
    }

    /// Number of sources stacked along time in the target.
    pub fn n_sources(&self) -> usize {
        self.aux.as_ref().map_or(1, |a| a.sources.len().max(1))
    }
}

fn fit_length<R: Rng + ?Sized>(noise: &Waveform, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let s = noise.samples();
    if s.is_empty() {
        return Err(Error::invalid("empty noise signal"));
    }
    if s.len() >= n {
        let off = if s.len() > n { rng.random_range(0..=s.len() - n) } else { 0 };
        Ok(s[off..off + n].to_vec())
    } else {
        Ok((0..n).map(|i| s[i % s.len()]).collect())
    }
}

/// Add `noise` to `clean` at the requested SNR. Returns the mixture and
/// the scaled noise actually added. `snr_db = +∞` adds nothing.
pub fn mix_at_snr<R: Rng + ?Sized>(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<(Waveform, Waveform)> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::invalid("clean and noise sample rates differ"));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("SNR {snr_db} dB is not usable")));
    }
    let n = clean.len();
    if snr_db == f64::INFINITY {
        return Ok((clean.clone(), Waveform::new(vec![0.0; n], clean.sample_rate())?));
    }
    let raw = fit_length(noise, n, rng)?;
    let e_noise: f64 = raw.iter().map(|x| x * x).sum();
    if e_noise == 0.0 {
        return Err(Error::invalid("noise has zero energy; cannot reach a finite SNR"));
    }
    let g = (clean.energy() / (e_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = raw.iter().map(|x| g * x).collect();
    let mix: Vec<f64> = clean.samples().iter().zip(&scaled).map(|(c, v)| c + v).collect();
    Ok((Waveform::new(mix, clean.sample_rate())?, Waveform::new(scaled, clean.sample_rate())?))
}

fn features(w: &Waveform, norm: &FeatureNorm) -> Result<Mat> {
    Ok(norm.normalize(&MelAnalyzer::shared().wave_to_logmel(w)?))
}

/// Noisy-to-clean pair. The condition is dropped with probability
/// `drop_prob` at construction; training code re-draws the drop per batch
/// with [`PairedExample::training_condition`].
pub fn build_enhance_example<R: Rng + ?Sized>(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    norm: &FeatureNorm,
    drop_prob: f64,
    rng: &mut R,
) -> Result<PairedExample> {
    let (mixture, _) = mix_at_snr(clean, noise, snr_db, rng)?;
    let target = features(clean, norm)?;
    let mut ex = PairedExample {
        cond: ConditionBundle::new(features(&mixture, norm)?),
        loss_region: vec![true; target.rows()],
        target,
        task_tag: TaskTag::Enhance,
        aux: Some(References {
            sources: vec![clean.clone()],
            mixture,
        }),
    };
    ex.cond = ex.training_condition(drop_prob, rng);
    Ok(ex)
}

/// Index of the first 10 ms frame within 30 dB of the loudest frame;
/// silent signals sort last.
pub fn onset_frame(w: &Waveform) -> usize {
    let energies: Vec<f64> = w.samples().chunks(160).map(|c| c.iter().map(|x| x * x).sum()).collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return usize::MAX;
    }
    energies.iter().position(|&e| e >= peak * 1e-3).unwrap_or(usize::MAX)
}

/// Mixture-to-sources pair. Sources are zero-padded to a common length,
/// ordered by onset; the target stacks their features along time and the
/// condition repeats the mixture features once per source.
pub fn build_separation_example(
    sources: &[Waveform],
    noise: Option<&Waveform>,
    norm: &FeatureNorm,
) -> Result<PairedExample> {
    let k = sources.len();
    if !(2..=3).contains(&k) {
        return Err(Error::invalid(format!("separation needs 2 or 3 sources, got {k}")));
    }
    let sr = sources[0].sample_rate();
    if sources.iter().any(|s| s.sample_rate() != sr) {
        return Err(Error::invalid("sources have different sample rates"));
    }
    let n = sources.iter().map(Waveform::len).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("all sources are empty"));
    }
    let padded: Vec<Waveform> = sources
        .iter()
        .map(|s| {
            let mut v = s.samples().to_vec();
            v.resize(n, 0.0);
            Waveform::new(v, sr)
        })
        .collect::<Result<_>>()?;
    let mut mix = vec![0.0; n];
    for s in &padded {
        for (m, x) in mix.iter_mut().zip(s.samples()) {
            *m += x;
        }
    }
    if let Some(noise) = noise {
        if noise.sample_rate() != sr {
            return Err(Error::invalid("noise sample rate differs from sources"));
        }
        if noise.len() < n {
            return Err(Error::invalid("noise is shorter than the mixture"));
        }
        for (m, x) in mix.iter_mut().zip(noise.samples()) {
            *m += x;
        }
    }
    let mixture = Waveform::new(mix, sr)?;

    let mut ordered: Vec<(usize, Waveform)> = padded.into_iter().map(|w| (onset_frame(&w), w)).collect();
    ordered.sort_by_key(|(onset, _)| *onset);
    let ordered: Vec<Waveform> = ordered.into_iter().map(|(_, w)| w).collect();

    let parts: Vec<Mat> = ordered.iter().map(|w| features(w, norm)).collect::<Result<_>>()?;
    let target = Mat::vstack(&parts.iter().collect::<Vec<_>>())?;
    let mix_feat = features(&mixture, norm)?;
    let cond = Mat::vstack(&vec![&mix_feat; k])?;
    Ok(PairedExample {
        loss_region: vec![true; target.rows()],
        target,
        cond: ConditionBundle::new(cond),
        task_tag: TaskTag::Separate,
        aux: Some(References {
            sources: ordered,
            mixture,
        }),
    })
}

/// Symbol-conditioned infilling with an explicit mask.
pub fn build_synth_example_with_plan(
    mel: &MelSpectrogram,
    alignment: &Alignment,
    plan: &MaskPlan,
    norm: &FeatureNorm,
) -> Result<PairedExample> {
    let len = mel.n_frames();
    if alignment.n_frames() != len {
        return Err(Error::shape(format!("alignment of {len} frames"), alignment.n_frames()));
    }
    let target = norm.normalize(mel);
    let masked = apply_mask(&target, plan)?;
    Ok(PairedExample {
        cond: ConditionBundle::with_symbols(masked, alignment.frame_symbols())?,
        loss_region: plan.frame_mask().to_vec(),
        target,
        task_tag: TaskTag::Synth,
        aux: None,
    })
}

/// Symbol-conditioned infilling with a mask drawn from `policy`.
pub fn build_synth_example<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    alignment: &Alignment,
    policy: &MaskPolicy,
    norm: &FeatureNorm,
    rng: &mut R,
) -> Result<PairedExample> {
    policy.validate()?;
    let plan = sample_mask_plan(mel.n_frames(), policy, rng);
    build_synth_example_with_plan(mel, alignment, &plan, norm)
}

/// Continuation geometry: the first `prompt_frames` stay visible.
pub fn build_continuation_example(
    mel: &MelSpectrogram,
    alignment: &Alignment,
    prompt_frames: usize,
    norm: &FeatureNorm,
) -> Result<PairedExample> {
    let plan = MaskPlan::keep_prefix(mel.n_frames(), prompt_frames);
    build_synth_example_with_plan(mel, alignment, &plan, norm)
}

/// Endless shuffled stream of `(dataset, item)` indices where dataset `i`
/// appears in proportion to `factors[i] · sizes[i]`. Each pass visits
/// every item of dataset `i` exactly `factors[i]` times.
#[derive(Clone, Debug)]
pub struct MultitaskMixer {
    pool: Vec<(usize, usize)>,
    pos: usize,
    rng: ChaCha8Rng,
}

pub fn multitask_mixer(sizes: &[usize], factors: &[usize], seed: u64) -> Result<MultitaskMixer> {
    if sizes.len() != factors.len() || sizes.is_empty() {
        return Err(Error::invalid("need one upsampling factor per dataset"));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("dataset {i} is empty")));
    }
    if factors.contains(&0) {
        return Err(Error::invalid("upsampling factors must be positive"));
    }
    let mut pool = Vec::new();
    for (d, (&size, &factor)) in sizes.iter().zip(factors).enumerate() {
        for _ in 0..factor {
            pool.extend((0..size).map(|j| (d, j)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    Ok(MultitaskMixer { pool, pos: 0, rng })
}

impl Iterator for MultitaskMixer {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.pos == self.pool.len() {
            self.pool.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.pool[self.pos - 1])
    }
}

/// Load every utterance listed in a manifest. Relative paths resolve
/// against the manifest's directory.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = Manifest::read(manifest_path)?;
    let analyzer = MelAnalyzer::shared();
    manifest
        .entries
        .iter()
        .map(|e| {
            let wave = wav::read(base.join(&e.wav))?;
            let alignment = match &e.alignment {
                Some(p) => {
                    let a = Alignment::read(base.join(p))?;
                    let frames = analyzer.config().n_frames(wave.len());
                    if a.n_frames() != frames {
                        return Err(Error::invalid(format!(
                            "{}: alignment covers {} frames, audio has {frames}",
                            p.display(),
                            a.n_frames()
                        )));
                    }
                    Some(a)
                }
                None => None,
            };
            Ok(Utterance {
                wave,
                alignment,
                speaker: e.speaker.clone(),
            })
        })
        .collect()
}

/// Write a corpus as WAV + alignment files with a manifest (`manifest.tsv`).
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &[Utterance]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (i, u) in corpus.iter().enumerate() {
        let wav_name = format!("utt{i:05}.wav");
        wav::write(dir.join(&wav_name), &u.wave)?;
        let alignment = match &u.alignment {
            Some(a) => {
                let name = format!("utt{i:05}.align");
                a.write(dir.join(&name))?;
                Some(name.into())
            }
            None => None,
        };
        manifest.entries.push(ManifestEntry {
            wav: wav_name.into(),
            alignment,
            speaker: u.speaker.clone(),
        });
    }
    manifest.write(dir.join("manifest.tsv"))
}
