//! Objective quality measures and per-utterance reports.

mod estoi;
pub mod resample;

pub use estoi::estoi;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};

/// Upper clamp for SI-SDR (reached by exact estimates).
pub const SI_SDR_CAP: f64 = 60.0;
/// Lower clamp, reached when the estimate has no component along the
/// reference.
pub const SI_SDR_FLOOR: f64 = -60.0;

/// Scale-invariant SDR in dB, clamped to `[SI_SDR_FLOOR, SI_SDR_CAP]`.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(format!("{} samples", reference.len()), est.len()));
    }
    let r = reference.samples();
    let e = est.samples();
    let rr: f64 = r.iter().map(|x| x * x).sum();
    if rr == 0.0 {
        return Err(Error::invalid("SI-SDR reference is silent"));
    }
    let alpha = e.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in e.iter().zip(r) {
        let t = alpha * b;
        target += t * t;
        noise += (a - t) * (a - t);
    }
    if noise == 0.0 {
        return Ok(if target > 0.0 { SI_SDR_CAP } else { SI_SDR_FLOOR });
    }
    if target == 0.0 {
        return Ok(SI_SDR_FLOOR);
    }
    Ok((10.0 * (target / noise).log10()).clamp(SI_SDR_FLOOR, SI_SDR_CAP))
}

/// SI-SDR gain of `est` over the unprocessed `mixture`.
pub fn si_sdr_improvement(est: &Waveform, mixture: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mixture, reference)?)
}

/// ESTOI gain of `est` over the unprocessed `mixture`.
pub fn estoi_improvement(est: &Waveform, mixture: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(estoi(est, reference)? - estoi(mixture, reference)?)
}

/// RMS of the element-wise log-Mel difference.
pub fn log_spectral_distance(est: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    let (a, b) = (est.values(), reference.values());
    a.same_shape(b)?;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    // identity first so ties keep it
    out.sort();
    out
}

/// Best mean of `metric(ests[perm[i]], refs[i])` over all assignments.
/// Returns the score and `perm`, where `perm[i]` is the estimate matched to
/// reference `i`. Ties keep the earliest permutation in lexicographic
/// order, so the identity wins any tie.
pub fn permutation_invariant<T, F>(metric: F, ests: &[T], refs: &[T]) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&T, &T) -> Result<f64>,
{
    let k = refs.len();
    if ests.len() != k {
        return Err(Error::shape(format!("{k} estimates"), ests.len()));
    }
    if k == 0 || k > 6 {
        return Err(Error::invalid(format!("permutation search supports 1..=6 sources, got {k}")));
    }
    // pairwise table avoids recomputing the metric per permutation
    let mut table = vec![vec![0.0; k]; k];
    for (i, r) in refs.iter().enumerate() {
        for (j, e) in ests.iter().enumerate() {
            table[i][j] = metric(e, r)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(k) {
        let score = perm.iter().enumerate().map(|(i, &j)| table[i][j]).sum::<f64>() / k as f64;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, perm));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Per-utterance scores. `error` is set (and `values` empty) when scoring
/// failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub values: BTreeMap<String, f64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    /// Values at the SI-SDR cap (SI-SDR metrics only).
    pub capped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub utterances: Vec<UtteranceRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    scenario: String,
    format_version: u32,
}

const REPORT_VERSION: u32 = 1;

impl MetricReport {
    pub fn new(scenario: impl Into<String>) -> Self {
        MetricReport {
            scenario: scenario.into(),
            utterances: Vec::new(),
        }
    }

    /// Add a scored utterance. Every record of a report must carry the same
    /// metric names and finite values.
    pub fn push(&mut self, id: impl Into<String>, values: BTreeMap<String, f64>) -> Result<()> {
        if let Some((k, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("metric {k} is not finite ({v})")));
        }
        if let Some(first) = self.utterances.iter().find(|u| u.error.is_none()) {
            if !first.values.keys().eq(values.keys()) {
                return Err(Error::invalid("metric names differ between utterances"));
            }
        }
        self.utterances.push(UtteranceRecord {
            id: id.into(),
            values,
            error: None,
        });
        Ok(())
    }

    pub fn push_failure(&mut self, id: impl Into<String>, error: impl ToString) {
        self.utterances.push(UtteranceRecord {
            id: id.into(),
            values: BTreeMap::new(),
            error: Some(error.to_string()),
        });
    }

    pub fn failures(&self) -> usize {
        self.utterances.iter().filter(|u| u.error.is_some()).count()
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.utterances.iter().filter_map(|u| u.values.get(metric).copied()).collect()
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.utterances
            .iter()
            .find(|u| u.error.is_none())
            .map(|u| u.values.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn summary(&self) -> BTreeMap<String, MetricSummary> {
        self.metric_names()
            .into_iter()
            .map(|name| {
                let v = self.values(&name);
                let s = summarize(&v, name.starts_with("si_sdr") && !name.ends_with("_i"));
                (name, s)
            })
            .collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        let v = self.values(metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn median(&self, metric: &str) -> Option<f64> {
        let v = self.values(metric);
        (!v.is_empty()).then(|| median(&v))
    }

    /// Header line, then one JSON record per utterance.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            scenario: self.scenario.clone(),
            format_version: REPORT_VERSION,
        })?;
        out.push('\n');
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::invalid("empty report"))?)?;
        if header.format_version != REPORT_VERSION {
            return Err(Error::invalid(format!("unsupported report version {}", header.format_version)));
        }
        let mut report = MetricReport::new(header.scenario);
        for line in lines {
            let u: UtteranceRecord = serde_json::from_str(line)?;
            match u.error {
                Some(e) => report.push_failure(u.id, e),
                None => report.push(u.id, u.values)?,
            }
        }
        Ok(report)
    }

    /// Fixed-width text table of the summary.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}  utterances: {}  failures: {}", self.scenario, self.utterances.len(), self.failures());
        let _ = writeln!(s, "{:<12} {:>6} {:>10} {:>10} {:>10} {:>7}", "metric", "n", "mean", "std", "median", "capped");
        for (name, m) in self.summary() {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>7}",
                name, m.count, m.mean, m.std, m.median, m.capped
            );
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.jsonl"), self.to_jsonl()?)?;
        std::fs::write(dir.join("summary.txt"), self.summary_table())?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(dir.as_ref().join("metrics.jsonl"))?)
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn summarize(v: &[f64], count_capped: bool) -> MetricSummary {
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n.max(1) as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    MetricSummary {
        count: n,
        mean,
        std: var.sqrt(),
        median: if n == 0 { 0.0 } else { median(v) },
        capped: if count_capped { v.iter().filter(|&&x| x >= SI_SDR_CAP).count() } else { 0 },
    }
}

#[cfg(test)]
mod tests;
