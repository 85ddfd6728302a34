//! Scoring a model on held-out task examples.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{MelAnalyzer, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::metrics::{
    MetricReport, estoi, log_spectral_distance, permutation_invariant, si_sdr,
};
use crate::model::VectorFieldModel;
use crate::sampler::{SamplerConfig, sample_task};
use crate::tasks::{PairedExample, References, TaskTag};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Enhance,
    Separate,
    SynthInfill,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Enhance => "enhance",
            Scenario::Separate => "separate",
            Scenario::SynthInfill => "synth-infill",
        }
    }

    pub fn task(self) -> TaskTag {
        match self {
            Scenario::Enhance => TaskTag::Enhance,
            Scenario::Separate => TaskTag::Separate,
            Scenario::SynthInfill => TaskTag::Synth,
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhance" => Ok(Scenario::Enhance),
            "separate" => Ok(Scenario::Separate),
            "synth-infill" | "synth" => Ok(Scenario::SynthInfill),
            other => Err(Error::config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// What produces the estimate that gets scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Sample from the model.
    Model,
    /// The clean target features, through the same waveform reconstruction
    /// as model output.
    Topline,
    /// The clean references themselves (no reconstruction).
    Identity,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(EvalMode::Model),
            "topline" => Ok(EvalMode::Topline),
            "identity" => Ok(EvalMode::Identity),
            other => Err(Error::config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// Seed for example `index` of an evaluation run.
fn example_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index as u64)
}

fn refs(ex: &PairedExample) -> Result<&References> {
    ex.aux.as_ref().ok_or_else(|| Error::invalid("example has no reference audio"))
}

/// Invert features with the mixture phase, matching the mixture length.
fn reconstruct(mel: &MelSpectrogram, mixture: &Waveform) -> Result<Waveform> {
    let a = MelAnalyzer::shared();
    let phase = a.stft(mixture)?;
    a.logmel_to_wave_len(mel, &phase, mixture.len())
}

fn padded(w: &Waveform, n: usize) -> Result<Waveform> {
    let mut v = w.samples().to_vec();
    v.resize(n, 0.0);
    Waveform::new(v, w.sample_rate())
}

/// Estimated features for one example in `[L × n_mels]` log-Mel space.
fn estimate(
    model: &VectorFieldModel,
    ex: &PairedExample,
    sampler: &SamplerConfig,
    mode: EvalMode,
    seed: u64,
) -> Result<MelSpectrogram> {
    match mode {
        EvalMode::Model => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_task(model, &ex.cond, ex.len(), &mut rng, sampler)
        }
        EvalMode::Topline | EvalMode::Identity => model.norm().denormalize(&ex.target),
    }
}

fn score_enhance(model: &VectorFieldModel, ex: &PairedExample, est: &MelSpectrogram, mode: EvalMode) -> Result<BTreeMap<String, f64>> {
    let r = refs(ex)?;
    let clean = r.sources.first().ok_or_else(|| Error::invalid("no clean reference"))?;
    let wave = match mode {
        EvalMode::Identity => clean.clone(),
        _ => reconstruct(est, &r.mixture)?,
    };
    let clean_mel = model.norm().denormalize(&ex.target)?;
    let sdr = si_sdr(&wave, clean)?;
    let sdr_mix = si_sdr(&r.mixture, clean)?;
    let st = estoi(&wave, clean)?;
    let st_mix = estoi(&r.mixture, clean)?;
    Ok(BTreeMap::from([
        ("si_sdr".to_string(), sdr),
        ("si_sdr_i".to_string(), sdr - sdr_mix),
        ("estoi".to_string(), st),
        ("estoi_i".to_string(), st - st_mix),
        ("lsd".to_string(), log_spectral_distance(est, &clean_mel)?),
    ]))
}

fn split_rows(m: &Mat, k: usize) -> Result<Vec<Mat>> {
    if k == 0 || m.rows() % k != 0 {
        return Err(Error::shape(format!("a multiple of {k} frames"), m.rows()));
    }
    let l = m.rows() / k;
    Ok((0..k).map(|i| m.slice_rows(i * l, l)).collect())
}

fn score_separate(model: &VectorFieldModel, ex: &PairedExample, est: &MelSpectrogram, mode: EvalMode) -> Result<BTreeMap<String, f64>> {
    let r = refs(ex)?;
    let k = r.sources.len();
    let n = r.mixture.len();
    let sources: Vec<Waveform> = r.sources.iter().map(|s| padded(s, n)).collect::<Result<_>>()?;
    let est_parts: Vec<MelSpectrogram> = split_rows(est.values(), k)?
        .into_iter()
        .map(MelSpectrogram::new)
        .collect::<Result<_>>()?;
    let ref_parts: Vec<MelSpectrogram> = split_rows(model.norm().denormalize(&ex.target)?.values(), k)?
        .into_iter()
        .map(MelSpectrogram::new)
        .collect::<Result<_>>()?;
    let waves: Vec<Waveform> = match mode {
        EvalMode::Identity => sources.clone(),
        _ => est_parts.iter().map(|m| reconstruct(m, &r.mixture)).collect::<Result<_>>()?,
    };
    let (sdr, perm) = permutation_invariant(si_sdr, &waves, &sources)?;
    let mut sdr_mix = 0.0;
    let (mut st, mut st_mix, mut lsd) = (0.0, 0.0, 0.0);
    for (i, s) in sources.iter().enumerate() {
        let j = perm[i];
        sdr_mix += si_sdr(&r.mixture, s)?;
        st += estoi(&waves[j], s)?;
        st_mix += estoi(&r.mixture, s)?;
        lsd += log_spectral_distance(&est_parts[j], &ref_parts[i])?;
    }
    let kf = k as f64;
    Ok(BTreeMap::from([
        ("si_sdr".to_string(), sdr),
        ("si_sdr_i".to_string(), sdr - sdr_mix / kf),
        ("estoi".to_string(), st / kf),
        ("estoi_i".to_string(), (st - st_mix) / kf),
        ("lsd".to_string(), lsd / kf),
    ]))
}

fn score_synth(model: &VectorFieldModel, ex: &PairedExample, est: &MelSpectrogram) -> Result<BTreeMap<String, f64>> {
    let reference = model.norm().denormalize(&ex.target)?;
    let rows: Vec<usize> = (0..ex.len()).filter(|&r| ex.loss_region[r]).collect();
    let pick = |m: &MelSpectrogram| -> Result<MelSpectrogram> {
        let parts: Vec<Mat> = rows.iter().map(|&r| m.values().slice_rows(r, 1)).collect();
        MelSpectrogram::new(Mat::vstack(&parts.iter().collect::<Vec<_>>())?)
    };
    let mut values = BTreeMap::from([("lsd".to_string(), log_spectral_distance(est, &reference)?)]);
    if !rows.is_empty() {
        values.insert("lsd_masked".to_string(), log_spectral_distance(&pick(est)?, &pick(&reference)?)?);
    }
    Ok(values)
}

fn score_one(
    model: &VectorFieldModel,
    ex: &PairedExample,
    scenario: Scenario,
    sampler: &SamplerConfig,
    mode: EvalMode,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    if ex.task_tag != scenario.task() {
        return Err(Error::invalid(format!("{:?} example in a {} evaluation", ex.task_tag, scenario.name())));
    }
    let est = estimate(model, ex, sampler, mode, seed)?;
    match scenario {
        Scenario::Enhance => score_enhance(model, ex, &est, mode),
        Scenario::Separate => score_separate(model, ex, &est, mode),
        Scenario::SynthInfill => score_synth(model, ex, &est),
    }
}

/// Score every example. Failures are recorded in the report and the run
/// continues. Identical inputs and `seed` give an identical report.
pub fn evaluate(
    model: &VectorFieldModel,
    examples: &[PairedExample],
    scenario: Scenario,
    sampler: &SamplerConfig,
    mode: EvalMode,
    seed: u64,
) -> Result<MetricReport> {
    sampler.validate()?;
    let label = match mode {
        EvalMode::Model => scenario.name().to_string(),
        EvalMode::Topline => format!("{}/topline", scenario.name()),
        EvalMode::Identity => format!("{}/identity", scenario.name()),
    };
    let mut report = MetricReport::new(label);
    for (i, ex) in examples.iter().enumerate() {
        let id = format!("utt{i:05}");
        let scored = score_one(model, ex, scenario, sampler, mode, example_seed(seed, i))
            .and_then(|values| report.push(id.clone(), values));
        if let Err(e) = scored {
            report.push_failure(id, e);
        }
    }
    Ok(report)
}
