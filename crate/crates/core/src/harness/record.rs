//! Per-run experiment record.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::LossEntry;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, MetricSummary};

/// Hyper-parameter value a record was produced with in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
}

/// Where a metric report was written, with its summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRef {
    pub scenario: String,
    pub path: String,
    pub failures: usize,
    pub summary: BTreeMap<String, MetricSummary>,
}

impl ReportRef {
    pub fn new(report: &MetricReport, path: impl Into<String>) -> Self {
        ReportRef {
            scenario: report.scenario.clone(),
            path: path.into(),
            failures: report.failures(),
            summary: report.summary(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    pub name: String,
    /// Configuration the run was started with.
    pub config: RunConfig,
    #[serde(default)]
    pub sweep: Option<SweepPoint>,
    pub loss_curve: Vec<LossEntry>,
    pub checkpoints: Vec<String>,
    pub reports: Vec<ReportRef>,
    pub wall_clock_s: f64,
}

impl ExperimentRecord {
    pub fn new(name: impl Into<String>, config: RunConfig) -> Self {
        ExperimentRecord {
            name: name.into(),
            config,
            sweep: None,
            loss_curve: Vec::new(),
            checkpoints: Vec::new(),
            reports: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.loss_curve.iter().find(|e| !e.loss.is_finite()) {
            return Err(Error::NonFinite {
                step: e.step,
                context: "recorded loss".into(),
            });
        }
        if self.loss_curve.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(Error::invalid("loss curve steps are not increasing"));
        }
        if !self.wall_clock_s.is_finite() {
            return Err(Error::invalid("wall clock is not finite"));
        }
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().map(|e| e.loss)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ExperimentRecord = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
