//! Tables and line plots across experiment records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::record::ExperimentRecord;
use crate::error::{Error, Result};

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

fn columns(records: &[ExperimentRecord]) -> BTreeSet<(String, String)> {
    records
        .iter()
        .flat_map(|r| r.reports.iter())
        .flat_map(|rep| rep.summary.keys().map(|m| (rep.scenario.clone(), m.clone())))
        .collect()
}

fn metric_mean(r: &ExperimentRecord, scenario: &str, metric: &str) -> Option<f64> {
    r.reports
        .iter()
        .find(|rep| rep.scenario == scenario)
        .and_then(|rep| rep.summary.get(metric))
        .map(|s| s.mean)
}

/// One row per record: name, sweep value, steps, final loss, then the
/// mean of every (scenario, metric) pair seen in any record.
pub fn summary_table(records: &[ExperimentRecord]) -> String {
    let cols = columns(records);
    let mut s = String::new();
    let _ = write!(s, "{:<24} {:>10} {:>8} {:>12}", "run", "sweep", "steps", "final_loss");
    for (scenario, metric) in &cols {
        let _ = write!(s, " {:>24}", format!("{scenario}:{metric}"));
    }
    s.push('\n');
    for r in records {
        let sweep = r.sweep.as_ref().map_or("-".to_string(), |p| format!("{}", p.value));
        let steps = r.loss_curve.last().map_or(0, |e| e.step);
        let loss = r.final_loss().map_or("-".to_string(), |l| format!("{l:.6}"));
        let _ = write!(s, "{:<24} {:>10} {:>8} {:>12}", r.name, sweep, steps, loss);
        for (scenario, metric) in &cols {
            let v = metric_mean(r, scenario, metric).map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = write!(s, " {v:>24}");
        }
        s.push('\n');
    }
    s
}

/// Mean of `scenario:metric` per sweep value (records sharing a value,
/// e.g. several seeds, are averaged), sorted by value.
pub fn sweep_curve(records: &[ExperimentRecord], param: &str, scenario: &str, metric: &str) -> Vec<(f64, f64)> {
    let mut acc: Vec<(f64, f64, usize)> = Vec::new();
    for r in records {
        let Some(p) = r.sweep.as_ref().filter(|p| p.param == param) else { continue };
        let Some(v) = metric_mean(r, scenario, metric) else { continue };
        match acc.iter_mut().find(|(x, _, _)| *x == p.value) {
            Some(slot) => {
                slot.1 += v;
                slot.2 += 1;
            }
            None => acc.push((p.value, v, 1)),
        }
    }
    acc.sort_by(|a, b| a.0.total_cmp(&b.0));
    acc.into_iter().map(|(x, sum, n)| (x, sum / n as f64)).collect()
}

pub fn curve_csv(x_name: &str, y_name: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{x_name},{y_name}\n");
    for (x, y) in points {
        let _ = writeln!(s, "{x},{y}");
    }
    s
}

/// Minimal SVG line plot with axis ranges taken from the data.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, anchor, x, y) in [
        (x0, "start", M, H - M + 16.0),
        (x1, "end", W - M, H - M + 16.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4}</text>"#);
    }
    for (v, y) in [(y0, H - M), (y1, M)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.2}" text-anchor="end">{v:.4}</text>"#, M - 4.0);
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { 'M' } else { 'L' }, px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        for &(x, y) in points.iter().filter(|_| points.len() <= 50) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - M + 4.0,
            M + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write the summary table, a loss curve per record, and one curve per
/// swept parameter and metric. Returns the files written, in order.
pub fn write_report(dir: impl AsRef<Path>, records: &[ExperimentRecord]) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::invalid("report needs at least one record"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("summary.txt".into(), summary_table(records))?;

    for r in records.iter().filter(|r| !r.loss_curve.is_empty()) {
        let pts: Vec<(f64, f64)> = r.loss_curve.iter().map(|e| (e.step as f64, e.loss)).collect();
        let stem = file_stem(&r.name);
        put(format!("loss_{stem}.csv"), curve_csv("step", "loss", &pts))?;
        let svg = line_plot_svg(&format!("training loss: {}", r.name), "step", "loss", &[(r.name.clone(), pts)]);
        put(format!("loss_{stem}.svg"), svg)?;
    }

    let params: BTreeSet<String> = records.iter().filter_map(|r| r.sweep.as_ref().map(|p| p.param.clone())).collect();
    let cols = columns(records);
    for param in &params {
        let mut by_metric: BTreeMap<String, Vec<(String, Vec<(f64, f64)>)>> = BTreeMap::new();
        for (scenario, metric) in &cols {
            let pts = sweep_curve(records, param, scenario, metric);
            if pts.is_empty() {
                continue;
            }
            let stem = file_stem(&format!("sweep_{param}_{scenario}_{metric}"));
            put(format!("{stem}.csv"), curve_csv(param, metric, &pts))?;
            by_metric.entry(metric.clone()).or_default().push((scenario.clone(), pts));
        }
        for (metric, series) in by_metric {
            let stem = file_stem(&format!("sweep_{param}_{metric}"));
            put(format!("{stem}.svg"), line_plot_svg(&format!("{metric} vs {param}"), param, &metric, &series))?;
        }
    }
    Ok(written)
}
