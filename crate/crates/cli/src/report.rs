//! Reads a finished run directory back and renders a short table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fedmorph_core::runtime::{Summary, METRICS_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub model_count: usize,
    pub largest_macs: u64,
    pub mean_loss: f64,
    pub doc: Option<f64>,
    pub cum_macs: u64,
    pub round_time_s: f64,
    pub comm_mb: f64,
}

fn field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("metrics.csv:{line}: bad `{name}` value {s:?}"))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        Some(h) => return Err(format!("metrics.csv:1: unexpected header {h:?}")),
        None => return Err("metrics.csv: empty file".into()),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(format!("metrics.csv:{n}: expected 8 fields, found {}", f.len()));
        }
        rows.push(MetricsRow {
            round: field(f[0], "round", n)?,
            model_count: field(f[1], "model_count", n)?,
            largest_macs: field(f[2], "largest_macs", n)?,
            mean_loss: field(f[3], "mean_loss", n)?,
            doc: if f[4].trim().is_empty() { None } else { Some(field(f[4], "doc", n)?) },
            cum_macs: field(f[5], "cum_macs", n)?,
            round_time_s: field(f[6], "round_time_s", n)?,
            comm_mb: field(f[7], "comm_mb", n)?,
        });
    }
    Ok(rows)
}

/// `m x10^e` with a three-decimal mantissa.
pub fn scaled(value: f64) -> String {
    if value == 0.0 {
        return "0".into();
    }
    let e = value.abs().log10().floor() as i32;
    format!("{:.3} x10^{e}", value / 10f64.powi(e))
}

pub struct Report {
    pub summary: Summary,
    pub metrics: Vec<MetricsRow>,
}

pub fn load(dir: &Path) -> Result<Report, String> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).map_err(|e| format!("{}: {e}", dir.join(name).display()))
    };
    let metrics = parse_metrics(&read("metrics.csv")?)?;
    let summary: Summary = serde_json::from_str(&read("summary.json")?)
        .map_err(|e| format!("summary.json:{}:{}: {e}", e.line(), e.column()))?;
    Ok(Report { summary, metrics })
}

impl Report {
    pub fn table(&self, name: &str) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "{:<16}{}", "run", name);
        let _ = writeln!(out, "{:<16}{:.2} %", "mean accuracy", 100.0 * s.mean_acc);
        let _ = writeln!(out, "{:<16}{:.2} %", "accuracy IQR", 100.0 * s.iqr_acc);
        let _ = writeln!(out, "{:<16}{} MACs", "total cost", scaled(s.total_macs as f64));
        let _ = writeln!(out, "{:<16}{}", "models", s.models.len());
        let _ = writeln!(out, "{:<16}{}", "rounds", self.metrics.len());
        out
    }

    pub fn plot_csv(&self) -> String {
        let mut out = String::from("round,mean_loss,cum_macs,model_count\n");
        for r in &self.metrics {
            let _ = writeln!(out, "{},{},{},{}", r.round, r.mean_loss, r.cum_macs, r.model_count);
        }
        out
    }
}
