use super::*;
use crate::tasks::{SynthCorpusConfig, make_synth_speech};
use crate::tensor::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, 16000).unwrap()
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn speech(n: usize, seed: u64) -> Vec<Waveform> {
    let cfg = SynthCorpusConfig {
        n_utterances: n,
        duration_range_s: (1.0, 1.5),
        n_speakers: 4,
        seed,
        ..Default::default()
    };
    make_synth_speech(&cfg).unwrap().into_iter().map(|u| u.wave).collect()
}

#[test]
fn si_sdr_perfect_and_scaled() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = wave(gaussian(1000, &mut rng));
    assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP);
    assert_eq!(si_sdr(&r.scaled(2.0), &r).unwrap(), SI_SDR_CAP);
}

#[test]
fn si_sdr_orthogonal_noise_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = gaussian(4000, &mut rng);
    let mut n = gaussian(4000, &mut rng);
    // remove the component along r, then set ‖r‖²/‖n‖² = 10
    let k = dot(&n, &r) / dot(&r, &r);
    n.iter_mut().zip(&r).for_each(|(a, b)| *a -= k * b);
    let s = (dot(&r, &r) / (10.0 * dot(&n, &n))).sqrt();
    let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + s * b).collect();
    let v = si_sdr(&wave(est), &wave(r)).unwrap();
    assert!((v - 10.0).abs() < 1e-6, "{v}");
}

#[test]
fn si_sdr_errors_and_floor() {
    let r = wave(vec![1.0, -1.0, 0.5]);
    assert!(si_sdr(&r, &wave(vec![0.0; 3])).is_err());
    assert!(si_sdr(&wave(vec![1.0; 2]), &r).is_err());
    assert_eq!(si_sdr(&wave(vec![0.0; 3]), &r).unwrap(), SI_SDR_FLOOR);
}

#[test]
fn improvement_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = gaussian(2000, &mut rng);
    let noise = gaussian(2000, &mut rng);
    let mix: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + 0.7 * b).collect();
    let (r, mix) = (wave(r), wave(mix));
    assert_eq!(si_sdr_improvement(&mix, &mix, &r).unwrap(), 0.0);
    let expect = SI_SDR_CAP - si_sdr(&mix, &r).unwrap();
    assert_eq!(si_sdr_improvement(&r, &mix, &r).unwrap(), expect);

    // direct evaluation on a four-sample toy case
    let reference = [1.0, 2.0, -1.0, 0.5];
    let mixture = [1.5, 1.0, -0.5, 1.0];
    let est = [1.1, 1.9, -0.8, 0.6];
    let direct = |e: &[f64]| {
        let a = dot(e, &reference) / dot(&reference, &reference);
        let t: Vec<f64> = reference.iter().map(|x| a * x).collect();
        let d: Vec<f64> = e.iter().zip(&t).map(|(x, y)| x - y).collect();
        10.0 * (dot(&t, &t) / dot(&d, &d)).log10()
    };
    let got = si_sdr_improvement(&wave(est.to_vec()), &wave(mixture.to_vec()), &wave(reference.to_vec())).unwrap();
    assert!((got - (direct(&est) - direct(&mixture))).abs() < 1e-12);
}

proptest! {
    #[test]
    fn si_sdr_scale_invariance(seed in 0u64..500, c in prop_oneof![-100.0f64..-1e-3, 1e-3f64..100.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = wave(gaussian(256, &mut rng));
        let e = wave(gaussian(256, &mut rng).iter().zip(r.samples()).map(|(a, b)| a + b).collect());
        let base = si_sdr(&e, &r).unwrap();
        prop_assert!((si_sdr(&e.scaled(c), &r).unwrap() - base).abs() < 1e-9);
        // powers of two scale without rounding
        prop_assert_eq!(si_sdr(&e.scaled(4.0), &r).unwrap(), base);
        prop_assert_eq!(si_sdr(&e.scaled(-0.5), &r).unwrap(), base);
    }

    #[test]
    fn pit_never_below_identity(seed in 0u64..200, k in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs: Vec<Waveform> = (0..k).map(|_| wave(gaussian(64, &mut rng))).collect();
        let ests: Vec<Waveform> = (0..k).map(|_| wave(gaussian(64, &mut rng))).collect();
        let (best, _) = permutation_invariant(si_sdr, &ests, &refs).unwrap();
        let identity = (0..k).map(|i| si_sdr(&ests[i], &refs[i]).unwrap()).sum::<f64>() / k as f64;
        prop_assert!(best >= identity);
    }
}

#[test]
fn pit_single_and_swapped() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = wave(gaussian(500, &mut rng));
    let b = wave(gaussian(500, &mut rng));
    let (s, p) = permutation_invariant(si_sdr, &[a.clone()], &[b.clone()]).unwrap();
    assert_eq!(s, si_sdr(&a, &b).unwrap());
    assert_eq!(p, vec![0]);

    let (s, p) = permutation_invariant(si_sdr, &[b.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap();
    assert_eq!(s, SI_SDR_CAP);
    assert_eq!(p, vec![1, 0]);
    assert!(permutation_invariant(si_sdr, &[a.clone()], &[a, b]).is_err());
}

#[test]
fn pit_three_sources_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let refs: Vec<Waveform> = (0..3).map(|_| wave(gaussian(300, &mut rng))).collect();
    let ests: Vec<Waveform> = (0..3)
        .map(|i| {
            let noise = gaussian(300, &mut rng);
            wave(refs[(i + 1) % 3].samples().iter().zip(&noise).map(|(a, b)| a + rng.random_range(0.2..2.0) * b).collect())
        })
        .collect();
    let all = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut best = f64::NEG_INFINITY;
    let mut arg = [0; 3];
    for p in all {
        let s = (0..3).map(|i| si_sdr(&ests[p[i]], &refs[i]).unwrap()).sum::<f64>() / 3.0;
        if s > best {
            best = s;
            arg = p;
        }
    }
    let (s, p) = permutation_invariant(si_sdr, &ests, &refs).unwrap();
    assert!((s - best).abs() < 1e-12);
    assert_eq!(p, arg.to_vec());
    assert_eq!(p, vec![2, 0, 1]);
}

#[test]
fn log_spectral_distance_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Mat::from_fn(20, 80, |_, _| rng.random_range(-10.0..2.0));
    let b = Mat::from_fn(20, 80, |_, _| rng.random_range(-10.0..2.0));
    let ma = MelSpectrogram::new(a.clone()).unwrap();
    let mb = MelSpectrogram::new(b.clone()).unwrap();
    assert_eq!(log_spectral_distance(&ma, &ma).unwrap(), 0.0);
    let shifted = MelSpectrogram::new(a.map(|v| v - 1.25)).unwrap();
    assert!((log_spectral_distance(&shifted, &ma).unwrap() - 1.25).abs() < 1e-12);
    let mut sq = 0.0;
    for r in 0..20 {
        for c in 0..80 {
            sq += (a.get(r, c) - b.get(r, c)).powi(2);
        }
    }
    let expect = (sq / 1600.0).sqrt();
    assert!((log_spectral_distance(&ma, &mb).unwrap() - expect).abs() < 1e-12);
    let short = MelSpectrogram::new(a.slice_rows(0, 19)).unwrap();
    assert!(log_spectral_distance(&short, &ma).is_err());
}

#[test]
fn estoi_self_and_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for w in speech(4, 1) {
        let s = estoi(&w, &w).unwrap();
        assert!(s >= 0.99, "{s}");
        let noise = wave(gaussian(w.len(), &mut rng)).scaled(w.rms());
        let n = estoi(&noise, &w).unwrap();
        assert!(n < 0.2, "{n}");
    }
}

#[test]
fn estoi_rejects_short_input() {
    let w = speech(1, 2).remove(0);
    let short = wave(w.samples()[..4000].to_vec());
    assert!(estoi(&short, &short).is_err());
    assert!(estoi(&w, &short).is_err());
}

#[test]
fn estoi_increases_with_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let corpus = speech(50, 3);
    let mut last = f64::NEG_INFINITY;
    for snr in [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0] {
        let scores: Vec<f64> = corpus
            .iter()
            .map(|w| {
                let n = gaussian(w.len(), &mut rng);
                let g = (w.energy() / (dot(&n, &n) * 10f64.powf(snr / 10.0))).sqrt();
                let noisy = wave(w.samples().iter().zip(&n).map(|(a, b)| a + g * b).collect());
                estoi(&noisy, w).unwrap()
            })
            .collect();
        let m = median(&scores);
        assert!(m >= last, "snr {snr}: {m} < {last}");
        last = m;
    }
}

#[test]
fn report_round_trip_and_summary() {
    let mut rep = MetricReport::new("enhance");
    for (i, v) in [1.0, 3.0, 60.0].iter().enumerate() {
        let vals = BTreeMap::from([("si_sdr".to_string(), *v), ("lsd".to_string(), 0.1 * i as f64)]);
        rep.push(format!("u{i}"), vals).unwrap();
    }
    rep.push_failure("u3", "too short");
    assert!(rep.push("bad", BTreeMap::from([("si_sdr".to_string(), f64::NAN), ("lsd".to_string(), 0.0)])).is_err());
    assert!(rep.push("bad", BTreeMap::from([("estoi".to_string(), 0.5)])).is_err());

    let s = rep.summary();
    assert_eq!(s["si_sdr"].count, 3);
    assert_eq!(s["si_sdr"].median, 3.0);
    assert_eq!(s["si_sdr"].capped, 1);
    assert_eq!(rep.failures(), 1);

    let text = rep.to_jsonl().unwrap();
    let back = MetricReport::from_jsonl(&text).unwrap();
    assert_eq!(back, rep);
    assert_eq!(back.to_jsonl().unwrap(), text);
    assert_eq!(back.summary_table(), rep.summary_table());
    assert!(MetricReport::from_jsonl("").is_err());
}
