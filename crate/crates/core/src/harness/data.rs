//! Task datasets cut from the synthetic corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DataConfig, RunConfig};
use crate::dsp::{MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, MaskPolicy, sample_mask_plan};
use crate::model::FeatureNorm;
use crate::tasks::{
    NOISE_KINDS, PairedExample, SynthCorpusConfig, TaskTag, Utterance, build_enhance_example,
    build_separation_example, build_synth_example_with_plan, make_noise, make_synth_speech,
};

/// Training and held-out utterances. The held-out set uses its own seed,
/// so its speakers are unseen in training.
pub fn make_corpora(corpus: &SynthCorpusConfig, data: &DataConfig) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    corpus.validate()?;
    data.validate()?;
    let train = make_synth_speech(corpus)?;
    let eval_cfg = SynthCorpusConfig {
        n_utterances: data.eval_utterances,
        seed: data.eval_seed,
        ..corpus.clone()
    };
    Ok((train, make_synth_speech(&eval_cfg)?))
}

pub fn corpus_mels(corpus: &[Utterance]) -> Result<Vec<MelSpectrogram>> {
    let a = MelAnalyzer::shared();
    corpus.iter().map(|u| a.wave_to_logmel(&u.wave)).collect()
}

/// Each utterance mixed with a random noise type at an SNR drawn from
/// `snr_range_db`.
pub fn enhance_set(
    corpus: &[Utterance],
    norm: &FeatureNorm,
    snr_range_db: (f64, f64),
    seed: u64,
) -> Result<Vec<PairedExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|u| {
            let kind = NOISE_KINDS[rng.random_range(0..NOISE_KINDS.len())];
            let noise = make_noise(u.wave.len(), kind, &mut rng)?;
            let (lo, hi) = snr_range_db;
            let snr = if hi > lo { rng.random_range(lo..hi) } else { lo };
            build_enhance_example(&u.wave, &noise, snr, norm, 0.0, &mut rng)
        })
        .collect()
}

/// One mixture per utterance: the utterance plus `n_sources − 1` partners
/// from other speakers (when available), each scaled by a random gain in
/// `±gain_db`.
pub fn separation_set(
    corpus: &[Utterance],
    norm: &FeatureNorm,
    n_sources: usize,
    gain_db: f64,
    seed: u64,
) -> Result<Vec<PairedExample>> {
    if corpus.len() < n_sources {
        return Err(Error::invalid(format!(
            "{} utterances cannot form {n_sources}-source mixtures",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..corpus.len())
        .map(|i| {
            let mut chosen = vec![i];
            let mut tries = 0;
            while chosen.len() < n_sources {
                let j = rng.random_range(0..corpus.len());
                tries += 1;
                let other_speaker = chosen.iter().all(|&c| corpus[c].speaker != corpus[j].speaker);
                if !chosen.contains(&j) && (other_speaker || tries > 50) {
                    chosen.push(j);
                }
            }
            let sources: Vec<_> = chosen
                .iter()
                .map(|&c| {
                    let g = if gain_db > 0.0 { rng.random_range(-gain_db..gain_db) } else { 0.0 };
                    corpus[c].wave.scaled(10f64.powf(g / 20.0))
                })
                .collect();
            build_separation_example(&sources, None, norm)
        })
        .collect()
}

/// Symbol-conditioned infilling with masks drawn from `policy`.
/// Utterances without an alignment are skipped.
pub fn synth_set(
    corpus: &[Utterance],
    norm: &FeatureNorm,
    policy: &MaskPolicy,
    seed: u64,
) -> Result<Vec<PairedExample>> {
    policy.validate()?;
    let a = MelAnalyzer::shared();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for u in corpus {
        let Some(alignment) = &u.alignment else { continue };
        let mel = a.wave_to_logmel(&u.wave)?;
        let mut plan = sample_mask_plan(mel.n_frames(), policy, &mut rng);
        if plan.masked_count() == 0 {
            plan = MaskPlan::full(mel.n_frames());
        }
        out.push(build_synth_example_with_plan(&mel, alignment, &plan, norm)?);
    }
    Ok(out)
}

/// Build the task set for `tag` as configured in `run`.
pub fn task_set(
    tag: TaskTag,
    corpus: &[Utterance],
    norm: &FeatureNorm,
    run: &RunConfig,
    seed: u64,
) -> Result<Vec<PairedExample>> {
    match tag {
        TaskTag::Enhance => enhance_set(corpus, norm, run.corpus.snr_range_db, seed),
        TaskTag::Separate => separation_set(corpus, norm, run.data.n_sources, run.data.source_gain_db, seed),
        TaskTag::Synth => synth_set(corpus, norm, &MaskPolicy::with_p_cond(1.0), seed),
    }
}
