use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::*;
use super::data::{enhance_set, separation_set, synth_set};
use super::evaluate::*;
use super::optim::*;
use super::record::*;
use super::report::*;
use super::train::*;
use crate::autodiff::{Grads, ParamStore};
use crate::masking::MaskPolicy;
use crate::metrics::{MetricReport, SI_SDR_CAP};
use crate::model::{ConditionBundle, FeatureNorm, VectorFieldModelConfig};
use crate::sampler::SamplerConfig;
use crate::tasks::{SynthCorpusConfig, make_synth_speech};
use crate::tensor::Mat;

fn sched(warmup: usize, total: usize, peak: f64, fin: f64) -> TrainConfig {
    TrainConfig {
        total_steps: total,
        warmup_steps: warmup,
        peak_lr: peak,
        final_lr: fin,
        ..Default::default()
    }
}

fn micro() -> VectorFieldModelConfig {
    VectorFieldModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ffn: 16,
        d_feat: 4,
        d_cond: 4,
        conv_pos_kernel: 3,
        conv_pos_groups: 2,
        ..VectorFieldModelConfig::tiny()
    }
}

fn item(len: usize, seed: u64) -> TrainItem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = crate::flow::sample_prior(len, 4, &mut rng);
    TrainItem {
        cond: ConditionBundle::new(Mat::zeros(len, 4)),
        loss_region: vec![true; len],
        target,
    }
}

#[test]
fn schedule_landmarks() {
    let cfg = sched(1_000, 21_000, 5e-4, 1e-5);
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert_eq!(lr_schedule(1_000, &cfg), 5e-4);
    assert_eq!(lr_schedule(500, &cfg), 2.5e-4);
    let mid = lr_schedule(11_000, &cfg);
    assert!((mid - (5e-4 + 1e-5) / 2.0).abs() < 1e-18, "{mid}");
    assert_eq!(lr_schedule(21_000, &cfg), 1e-5);
    assert_eq!(lr_schedule(50_000, &cfg), 1e-5);

    // paper-scale schedule stays expressible
    let paper = sched(5_000, 600_000, 5e-5, 1e-5);
    paper.validate().unwrap();
    assert_eq!(lr_schedule(5_000, &paper), 5e-5);
}

proptest! {
    #[test]
    fn schedule_is_monotone_per_phase(warmup in 0usize..50, extra in 1usize..200, step in 0usize..400) {
        let cfg = sched(warmup, warmup + extra, 1e-3, 1e-4);
        let a = lr_schedule(step, &cfg);
        let b = lr_schedule(step + 1, &cfg);
        prop_assert!(a >= 0.0 && a <= cfg.peak_lr);
        if step + 1 <= warmup {
            prop_assert!(b >= a);
        } else if step >= warmup {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn batches_stay_within_one_utterance(durs in prop::collection::vec(0.1f64..5.0, 1..60), target in 0.5f64..12.0) {
        let mut b = Batcher::new(durs.clone().into_iter(), target);
        let mut consumed = 0;
        loop {
            let batch = b.next_batch(|d| *d);
            if batch.is_empty() {
                break;
            }
            consumed += batch.len();
            let total: f64 = batch.iter().sum();
            if batch.len() > 1 {
                prop_assert!(total <= target + 1e-12);
            }
            if let Some(next) = durs.get(consumed) {
                // the next utterance would have overflowed the batch
                prop_assert!(total + next > target);
            }
        }
        prop_assert_eq!(consumed, durs.len());
    }
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    TrainConfig::finetune_default().validate().unwrap();
    for bad in [
        sched(10, 10, 1e-3, 1e-4),
        sched(0, 0, 1e-3, 1e-4),
        sched(1, 10, 1e-4, 1e-4),
        sched(1, 10, 1e-3, -1e-4),
        TrainConfig { batch_seconds: 0.0, ..Default::default() },
        TrainConfig { drop_prob: 1.5, ..Default::default() },
        TrainConfig { mask_policy: MaskPolicy::with_p_cond(2.0), ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(crate::Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn run_config_toml() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);

    let minimal = RunConfig::from_toml_str("schema_version = 1\n").unwrap();
    assert_eq!(minimal, cfg);
    let partial = RunConfig::from_toml_str("schema_version = 1\n[train]\ntotal_steps = 50\nwarmup_steps = 5\n").unwrap();
    assert_eq!(partial.train.total_steps, 50);
    assert_eq!(partial.train.peak_lr, 5e-4);

    for bad in [
        "schema_version = 2\n",
        "",
        "schema_version = 1\nbogus = 3\n",
        "schema_version = 1\n[train]\nwarmup_steps = 30000\n",
        "schema_version = \n",
    ] {
        assert!(matches!(RunConfig::from_toml_str(bad), Err(crate::Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn adam_first_step_closed_form() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap(), true).unwrap();
    let f = store.insert("f", Mat::scalar(3.0), false).unwrap();
    let mut g = Grads::zeros_like(&store);
    g.accumulate(w, &Mat::from_vec(1, 3, vec![0.2, -4.0, 1e-3]).unwrap());
    g.accumulate(f, &Mat::scalar(1.0));
    let mut adam = Adam::default();
    adam.update(&mut store, &g, 0.1);
    // after one step m̂ = g and v̂ = g², so Δ = −lr · g / (|g| + eps)
    let expect = [1.0 - 0.1 * 0.2 / (0.2 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8)];
    for (a, b) in store.get(w).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15, "{a} {b}");
    }
    assert_eq!(store.get(f).item(), 3.0);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn clipping_scales_to_the_ceiling() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Mat::zeros(1, 2), true).unwrap();
    let frozen = store.insert("b", Mat::zeros(1, 1), false).unwrap();
    let mut g = Grads::zeros_like(&store);
    g.accumulate(a, &Mat::from_vec(1, 2, vec![3.0, 4.0]).unwrap());
    g.accumulate(frozen, &Mat::scalar(100.0));
    let before = clip_grad_norm(&store, &mut g, 1.0);
    assert_eq!(before, 5.0);
    let after = g.get(a).unwrap();
    assert!((after.get(0, 0) - 0.6).abs() < 1e-15 && (after.get(0, 1) - 0.8).abs() < 1e-15);

    let mut small = Grads::zeros_like(&store);
    small.accumulate(a, &Mat::from_vec(1, 2, vec![0.3, 0.4]).unwrap());
    clip_grad_norm(&store, &mut small, 1.0);
    assert_eq!(small.get(a).unwrap().data(), &[0.3, 0.4]);
}

fn trainer(seed: u64, steps: usize) -> Trainer {
    let model = fresh_model(&micro(), FeatureNorm::default(), 3).unwrap();
    let cfg = TrainConfig {
        total_steps: steps,
        warmup_steps: 2,
        peak_lr: 1e-2,
        final_lr: 1e-4,
        seed,
        ..Default::default()
    };
    Trainer::new(model, cfg, 0).unwrap()
}

#[test]
fn seeded_losses_repeat() {
    let batch = vec![item(12, 0), item(9, 1)];
    let run = |seed| {
        let mut t = trainer(seed, 20);
        (0..10).map(|_| t.train_step(&batch).unwrap().loss).collect::<Vec<f64>>()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
    assert!(a.iter().all(|l| l.is_finite()));
}

#[test]
fn resumed_schedule_matches_fresh_computation() {
    let batch = vec![item(8, 2)];
    let mut fresh = trainer(1, 30);
    for _ in 0..12 {
        fresh.train_step(&batch).unwrap();
    }
    let model = fresh.model().clone();
    let mut resumed = Trainer::new(model, fresh.config().clone(), 12).unwrap();
    let e = resumed.train_step(&batch).unwrap();
    assert_eq!(e.step, 13);
    assert_eq!(e.lr, lr_schedule(13, fresh.config()));
    let e = fresh.train_step(&batch).unwrap();
    assert_eq!(e.lr, lr_schedule(13, fresh.config()));
}

#[test]
fn non_finite_loss_aborts() {
    let mut bad = item(6, 3);
    bad.target.set(2, 1, f64::NAN);
    let mut t = trainer(0, 10);
    t.train_step(&[item(6, 4)]).unwrap();
    match t.train_step(&[bad]) {
        Err(crate::Error::NonFinite { step, .. }) => assert_eq!(step, 2),
        other => panic!("{other:?}"),
    }
    assert!(t.train_step(&[]).is_err());
}

#[test]
fn pretrain_items_mask_the_loss_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x1 = Mat::from_fn(200, 4, |r, c| (r + c) as f64 + 1.0);
    let cfg = TrainConfig {
        max_frames: Some(64),
        ..Default::default()
    };
    for _ in 0..50 {
        let it = pretrain_item(&x1, &cfg, &mut rng).unwrap();
        assert_eq!(it.target.rows(), 64);
        for r in 0..64 {
            let zero = it.cond.cond_frames.row(r).iter().all(|&v| v == 0.0);
            assert_eq!(zero, it.loss_region[r]);
            if !zero {
                assert_eq!(it.cond.cond_frames.row(r), it.target.row(r));
            }
        }
    }
}

fn small_corpus(n: usize, seed: u64) -> Vec<crate::tasks::Utterance> {
    make_synth_speech(&SynthCorpusConfig {
        n_utterances: n,
        duration_range_s: (0.8, 1.0),
        n_speakers: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_model() -> crate::model::VectorFieldModel {
    fresh_model(&VectorFieldModelConfig::tiny(), FeatureNorm { mean: -6.0, std: 3.0 }, 0).unwrap()
}

#[test]
fn identity_and_topline_evaluation() {
    let corpus = small_corpus(3, 11);
    let model = tiny_model();
    let norm = model.norm();
    let sampler = SamplerConfig::default();
    let enh = enhance_set(&corpus, &norm, (0.0, 5.0), 1).unwrap();
    let sep = separation_set(&corpus, &norm, 2, 2.5, 2).unwrap();
    let syn = synth_set(&corpus, &norm, &MaskPolicy::with_p_cond(1.0), 3).unwrap();

    for (scenario, set) in [(Scenario::Enhance, &enh), (Scenario::Separate, &sep)] {
        let rep = evaluate(&model, set, scenario, &sampler, EvalMode::Identity, 0).unwrap();
        assert_eq!(rep.failures(), 0, "{rep:?}");
        for v in rep.values("si_sdr") {
            assert_eq!(v, SI_SDR_CAP);
        }
        for v in rep.values("estoi") {
            assert!(v >= 0.99, "{v}");
        }
        for v in rep.values("lsd") {
            assert_eq!(v, 0.0);
        }
        let top = evaluate(&model, set, scenario, &sampler, EvalMode::Topline, 0).unwrap();
        assert_eq!(top.failures(), 0);
        assert_eq!(top.scenario, format!("{}/topline", scenario.name()));
        assert!(top.mean("si_sdr").unwrap() > 5.0, "{}", top.summary_table());
    }
    let rep = evaluate(&model, &syn, Scenario::SynthInfill, &sampler, EvalMode::Identity, 0).unwrap();
    assert_eq!(rep.values("lsd"), vec![0.0; 3]);
    assert_eq!(rep.values("lsd_masked"), vec![0.0; 3]);
}

#[test]
fn model_evaluation_is_seeded_and_records_failures() {
    let corpus = small_corpus(2, 12);
    let model = tiny_model();
    let sampler = SamplerConfig {
        step_size: 0.25,
        ..Default::default()
    };
    let mut set = enhance_set(&corpus, &model.norm(), (0.0, 5.0), 4).unwrap();
    let a = evaluate(&model, &set, Scenario::Enhance, &sampler, EvalMode::Model, 3).unwrap();
    let b = evaluate(&model, &set, Scenario::Enhance, &sampler, EvalMode::Model, 3).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    assert_eq!(a.failures(), 0);
    let c = evaluate(&model, &set, Scenario::Enhance, &sampler, EvalMode::Model, 4).unwrap();
    assert_ne!(a, c);

    // a corrupted example fails alone
    set[0].aux = None;
    let d = evaluate(&model, &set, Scenario::Enhance, &sampler, EvalMode::Model, 3).unwrap();
    assert_eq!(d.failures(), 1);
    assert_eq!(d.utterances[1], a.utterances[1]);
    // wrong scenario is a per-utterance failure too
    let e = evaluate(&model, &set, Scenario::Separate, &sampler, EvalMode::Model, 3).unwrap();
    assert_eq!(e.failures(), 2);
}

fn record(name: &str, p: Option<f64>, sdr: f64) -> ExperimentRecord {
    let mut r = ExperimentRecord::new(name, RunConfig::default());
    r.loss_curve = (1..=5)
        .map(|s| LossEntry {
            step: s,
            loss: 1.0 / s as f64,
            lr: 1e-3,
            grad_norm: 0.5,
        })
        .collect();
    r.sweep = p.map(|value| SweepPoint {
        param: "p_cond".into(),
        value,
    });
    let mut rep = MetricReport::new("enhance");
    rep.push("u0", BTreeMap::from([("si_sdr_i".to_string(), sdr)])).unwrap();
    rep.push("u1", BTreeMap::from([("si_sdr_i".to_string(), sdr + 1.0)])).unwrap();
    r.reports.push(ReportRef::new(&rep, "eval/enhance"));
    r.wall_clock_s = 1.25;
    r
}

#[test]
fn record_round_trip_is_byte_identical() {
    let r = record("run", Some(0.9), 3.0);
    let text = r.to_json().unwrap();
    let back = ExperimentRecord::from_json(&text).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.to_json().unwrap(), text);

    let mut bad = r.clone();
    bad.loss_curve[2].loss = f64::INFINITY;
    assert!(bad.to_json().is_err());
    let mut unordered = r;
    unordered.loss_curve.swap(0, 1);
    assert!(unordered.validate().is_err());
}

#[test]
fn report_files() {
    let base = std::env::temp_dir().join(format!("melflow-report-{}", std::process::id()));
    let one = [record("solo", None, 1.0)];
    let table = summary_table(&one);
    assert_eq!(table.lines().count(), 2);
    assert!(table.contains("solo"));

    let sweep: Vec<ExperimentRecord> = [0.0, 0.5, 0.8, 0.9, 1.0]
        .iter()
        .map(|&p| record(&format!("p{p}"), Some(p), 10.0 * p))
        .collect();
    let files_a = write_report(base.join("a"), &sweep).unwrap();
    let files_b = write_report(base.join("b"), &sweep).unwrap();
    let csv = std::fs::read_to_string(base.join("a/sweep_p_cond_enhance_si_sdr_i.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().nth(1), Some("0,0.5"));
    assert!(base.join("a/sweep_p_cond_si_sdr_i.svg").exists());
    assert_eq!(files_a.len(), files_b.len());
    for (a, b) in files_a.iter().zip(&files_b) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{}", a.display());
    }
    assert!(write_report(base.join("c"), &[]).is_err());
    std::fs::remove_dir_all(&base).unwrap();
}

#[test]
fn scenario_names_parse() {
    for s in [Scenario::Enhance, Scenario::Separate, Scenario::SynthInfill] {
        assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
    }
    assert!("denoise".parse::<Scenario>().is_err());
    assert_eq!("lora".parse::<TrainMode>().unwrap(), TrainMode::Lora);
}
