//! File-level experiment steps operating on a data directory and run
//! directories.
//!
//! A data directory holds `train/` and `eval/` corpora (WAV, alignment and
//! `manifest.tsv`) plus the `config.toml` that generated them. A run
//! directory holds `config.toml`, `loss.tsv`, `record.json`, checkpoints
//! under `checkpoints/`, and metric reports under `eval/<scenario>/`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, TrainConfig, TrainMode};
use super::data::{corpus_mels, make_corpora, task_set};
use super::evaluate::{EvalMode, Scenario, evaluate};
use super::record::{ExperimentRecord, ReportRef, SweepPoint};
use super::report::write_report;
use super::train::{LossEntry, StepHook, TrainOutcome, Trainer, finetune, fresh_model, loss_log_tsv, pretrain_from};
use crate::dsp::{MelAnalyzer, MelSpectrogram, Waveform, container, wav};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::checkpoint::Checkpoint;
use crate::model::{ConditionBundle, FeatureNorm, VectorFieldModel};
use crate::sampler::{SamplerConfig, sample_task};
use crate::tasks::{Alignment, TaskTag, Utterance, load_corpus, save_corpus};
use crate::tensor::Mat;

/// Environment variable naming the directory runs are created under.
pub const RUN_ROOT_ENV: &str = "MELFLOW_RUN_ROOT";

/// `$MELFLOW_RUN_ROOT`, or `./runs` when unset.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Generate the training and held-out corpora into `dir`.
pub fn make_data(cfg: &RunConfig, dir: &Path) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (train, eval) = make_corpora(&cfg.corpus, &cfg.data)?;
    save_corpus(dir.join("train"), &train)?;
    save_corpus(dir.join("eval"), &eval)?;
    cfg.write(dir.join("config.toml"))?;
    Ok((train.len(), eval.len()))
}

pub fn load_split(data_dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    load_corpus(data_dir.join(split).join("manifest.tsv"))
}

/// Where a training run starts from.
#[derive(Clone, Debug)]
pub enum Init {
    /// Fresh weights; feature statistics fitted on the training corpus.
    Scratch,
    /// Weights and statistics from a checkpoint; the step counter restarts.
    Checkpoint(PathBuf),
    /// Continue a run from a checkpoint at its saved step.
    Resume(PathBuf),
}

fn load_model(path: &Path) -> Result<(VectorFieldModel, usize)> {
    let ckpt = Checkpoint::read(path)?;
    let step = ckpt.meta.step as usize;
    Ok((ckpt.into_model()?, step))
}

fn save_checkpoint(model: &VectorFieldModel, step: usize, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let extra = serde_json::json!({ "train": cfg });
    Checkpoint::from_model(model, step as u64, extra).write(path)
}

/// Shared loop wrapper: periodic checkpoints, loss log, record, and a
/// diagnostic file when training aborts.
fn tracked_run(
    name: &str,
    run_cfg: &RunConfig,
    train_cfg: &TrainConfig,
    run_dir: &Path,
    train: impl FnOnce(&mut StepHook<'_>) -> Result<TrainOutcome>,
) -> Result<ExperimentRecord> {
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    run_cfg.write(run_dir.join("config.toml"))?;
    let started = Instant::now();
    let mut record = ExperimentRecord::new(name, run_cfg.clone());
    let mut seen: Vec<LossEntry> = Vec::new();
    let mut saved: Vec<String> = Vec::new();
    let every = train_cfg.checkpoint_every;
    let mut hook = |trainer: &Trainer, entry: &LossEntry| -> Result<()> {
        seen.push(*entry);
        if every > 0 && entry.step % every == 0 && !trainer.done() {
            let rel = format!("checkpoints/step_{:07}.mfck", entry.step);
            save_checkpoint(trainer.model(), entry.step, train_cfg, &run_dir.join(&rel))?;
            saved.push(rel);
        }
        Ok(())
    };
    let outcome = train(&mut hook);
    std::fs::write(run_dir.join("loss.tsv"), loss_log_tsv(&seen))?;
    record.loss_curve = seen;
    record.checkpoints = saved;
    record.wall_clock_s = started.elapsed().as_secs_f64();
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            std::fs::write(run_dir.join("failure.txt"), format!("{e}\n"))?;
            return Err(e);
        }
    };
    save_checkpoint(&outcome.model, outcome.step, train_cfg, &run_dir.join("final.mfck"))?;
    record.checkpoints.push("final.mfck".into());
    record.write(run_dir.join("record.json"))?;
    Ok(record)
}

/// Masked-condition pre-training on the training corpus of `data_dir`.
pub fn run_pretrain(cfg: &RunConfig, data_dir: &Path, run_dir: &Path, init: &Init) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let corpus = load_split(data_dir, "train")?;
    let mels = corpus_mels(&corpus)?;
    let (model, start) = match init {
        Init::Scratch => (fresh_model(&cfg.model, FeatureNorm::fit(&mels), cfg.train.seed)?, 0),
        Init::Checkpoint(p) => (load_model(p)?.0, 0),
        Init::Resume(p) => load_model(p)?,
    };
    let norm = model.norm();
    let data: Vec<Mat> = mels.iter().map(|m| norm.normalize(m)).collect();
    let name = run_dir.file_name().map_or("pretrain".into(), |n| n.to_string_lossy().into_owned());
    tracked_run(&name, cfg, &cfg.train, run_dir, |hook| pretrain_from(model, &data, &cfg.train, start, hook))
}

/// Task fine-tuning; several tasks imply multitask mixing.
pub fn run_finetune(
    cfg: &RunConfig,
    data_dir: &Path,
    run_dir: &Path,
    tasks: &[TaskTag],
    init: &Init,
) -> Result<ExperimentRecord> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::config("no fine-tuning task given"));
    }
    let mut train_cfg = cfg.finetune.clone();
    if tasks.len() > 1 {
        train_cfg.mode = TrainMode::Multitask;
        // Factors are listed for (enhance, separate, synth); keep those of the chosen tasks.
        if train_cfg.multitask_factors.len() == 3 {
            let all = train_cfg.multitask_factors.clone();
            train_cfg.multitask_factors = tasks.iter().map(|&t| all[task_index(t)]).collect();
        }
    } else if train_cfg.mode == TrainMode::Pretrain || train_cfg.mode == TrainMode::Multitask {
        train_cfg.mode = TrainMode::Finetune;
    }
    let corpus = load_split(data_dir, "train")?;
    let (model, start) = match init {
        Init::Scratch => {
            let norm = FeatureNorm::fit(&corpus_mels(&corpus)?);
            (fresh_model(&cfg.model, norm, train_cfg.seed)?, 0)
        }
        Init::Checkpoint(p) => (load_model(p)?.0, 0),
        Init::Resume(p) => load_model(p)?,
    };
    let norm = model.norm();
    let sets = tasks
        .iter()
        .enumerate()
        .map(|(i, &t)| task_set(t, &corpus, &norm, cfg, cfg.data.task_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let name = run_dir.file_name().map_or("finetune".into(), |n| n.to_string_lossy().into_owned());
    let mut snapshot = cfg.clone();
    snapshot.finetune = train_cfg.clone();
    tracked_run(&name, &snapshot, &train_cfg, run_dir, |hook| finetune(model, &sets, &train_cfg, start, hook))
}

fn task_index(t: TaskTag) -> usize {
    match t {
        TaskTag::Enhance => 0,
        TaskTag::Separate => 1,
        TaskTag::Synth => 2,
    }
}

/// Seed offset separating evaluation draws from training draws.
const EVAL_SET_SEED: u64 = 100;

/// Score a checkpoint on the held-out corpus.
pub fn run_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    scenario: Scenario,
    mode: EvalMode,
    seed: u64,
) -> Result<MetricReport> {
    cfg.validate()?;
    let (model, _) = load_model(checkpoint)?;
    let corpus = load_split(data_dir, "eval")?;
    let examples = task_set(scenario.task(), &corpus, &model.norm(), cfg, cfg.data.task_seed.wrapping_add(EVAL_SET_SEED))?;
    evaluate(&model, &examples, scenario, &cfg.sampler, mode, seed)
}

/// Write `report` to `out_dir` and, when `record_path` exists, attach it to
/// that record.
pub fn store_report(report: &MetricReport, out_dir: &Path, record_path: Option<&Path>) -> Result<()> {
    report.write(out_dir)?;
    if let Some(p) = record_path.filter(|p| p.exists()) {
        let mut record = ExperimentRecord::read(p)?;
        let rel = out_dir.display().to_string();
        record.reports.retain(|r| r.scenario != report.scenario);
        record.reports.push(ReportRef::new(report, rel));
        record.write(p)?;
    }
    Ok(())
}

/// What `sample` conditions on.
#[derive(Clone, Debug)]
pub enum SampleInput {
    /// Noisy speech to enhance.
    Enhance(Waveform),
    /// Mixture of `k` sources.
    Separate(Waveform, usize),
    /// Phone alignment to synthesise from.
    Synth(Alignment),
}

/// Generate features (and waveforms when a phase source exists) into
/// `out_dir`. Returns the files written.
pub fn run_sample(
    checkpoint: &Path,
    input: &SampleInput,
    sampler: &SamplerConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    sampler.validate()?;
    let (model, _) = load_model(checkpoint)?;
    let norm = model.norm();
    let a = MelAnalyzer::shared();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, mel: &MelSpectrogram, phase_from: Option<&Waveform>| -> Result<()> {
        let p = out_dir.join(format!("{name}.mels"));
        container::write(&p, mel)?;
        written.push(p);
        if let Some(mix) = phase_from {
            let phase = a.stft(mix)?;
            let w = a.logmel_to_wave_len(mel, &phase, mix.len())?;
            let p = out_dir.join(format!("{name}.wav"));
            wav::write(&p, &w.scaled(peak_gain(&w)))?;
            written.push(p);
        }
        Ok(())
    };
    match input {
        SampleInput::Enhance(w) => {
            let cond = ConditionBundle::new(norm.normalize(&a.wave_to_logmel(w)?));
            let mel = sample_task(&model, &cond, cond.len(), &mut rng, sampler)?;
            emit("enhanced".into(), &mel, Some(w))?;
        }
        SampleInput::Separate(w, k) => {
            if !(2..=3).contains(k) {
                return Err(Error::config(format!("separation supports 2 or 3 sources, got {k}")));
            }
            let feat = norm.normalize(&a.wave_to_logmel(w)?);
            let l = feat.rows();
            let cond = ConditionBundle::new(Mat::vstack(&vec![&feat; *k])?);
            let mel = sample_task(&model, &cond, l * k, &mut rng, sampler)?;
            for i in 0..*k {
                let part = MelSpectrogram::new(mel.values().slice_rows(i * l, l))?;
                emit(format!("source{i}"), &part, Some(w))?;
            }
        }
        SampleInput::Synth(al) => {
            let len = al.n_frames();
            let cond = ConditionBundle::with_symbols(Mat::zeros(len, model.config().d_cond), al.frame_symbols())?;
            let mel = sample_task(&model, &cond, len, &mut rng, sampler)?;
            emit("synth".into(), &mel, None)?;
        }
    }
    Ok(written)
}

/// Gain keeping the peak at or below 0.95 (16-bit output clips otherwise).
fn peak_gain(w: &Waveform) -> f64 {
    let peak = w.samples().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.95 { 0.95 / peak } else { 1.0 }
}

/// For each value of `p_cond`: pre-train, fine-tune on `scenario`, and
/// evaluate, then write a report over all points into `sweep_dir/report`.
pub fn run_sweep(
    cfg: &RunConfig,
    data_dir: &Path,
    sweep_dir: &Path,
    values: &[f64],
    scenario: Scenario,
    seed: u64,
) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let mut records = Vec::new();
    for &v in values {
        let mut point_cfg = cfg.clone();
        point_cfg.train.mask_policy.p_cond = v;
        point_cfg.validate()?;
        let point_dir = sweep_dir.join(format!("p_cond_{v}"));
        run_pretrain(&point_cfg, data_dir, &point_dir.join("pretrain"), &Init::Scratch)?;
        let ft_dir = point_dir.join("finetune");
        let init = Init::Checkpoint(point_dir.join("pretrain").join("final.mfck"));
        let mut record = run_finetune(&point_cfg, data_dir, &ft_dir, &[scenario.task()], &init)?;
        let report = run_evaluate(&point_cfg, &ft_dir.join("final.mfck"), data_dir, scenario, EvalMode::Model, seed)?;
        let eval_dir = ft_dir.join("eval").join(scenario.name());
        report.write(&eval_dir)?;
        record.name = format!("p_cond={v}");
        record.sweep = Some(SweepPoint {
            param: "p_cond".into(),
            value: v,
        });
        record.reports.push(ReportRef::new(&report, eval_dir.display().to_string()));
        record.write(ft_dir.join("record.json"))?;
        records.push(record);
    }
    write_report(sweep_dir.join("report"), &records)?;
    Ok(records)
}
