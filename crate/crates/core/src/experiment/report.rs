use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "seed,noise_sigma,accuracy,objective_ratio,cycle_violations,iterations,wall_time_s";

/// One `(seed, noise)` point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunRow {
    pub seed: u64,
    pub noise_sigma: f64,
    pub accuracy: f64,
    pub objective_ratio: f64,
    pub cycle_violations: usize,
    pub iterations: usize,
    pub wall_time_s: f64,
}

impl RunRow {
    fn numeric(&self) -> [f64; 5] {
        [
            self.accuracy,
            self.objective_ratio,
            self.cycle_violations as f64,
            self.iterations as f64,
            self.wall_time_s,
        ]
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}\n",
            self.seed,
            self.noise_sigma,
            self.accuracy,
            self.objective_ratio,
            self.cycle_violations,
            self.iterations,
            self.wall_time_s
        )
    }
}

/// Column statistics; `std` is the population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

pub const AGGREGATE_COLUMNS: [&str; 5] = ["accuracy", "objective_ratio", "cycle_violations", "iterations", "wall_time_s"];

fn stats(values: impl Iterator<Item = f64> + Clone) -> ColumnStats {
    let n = values.clone().count();
    if n == 0 {
        return ColumnStats { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    ColumnStats { mean, std: var.sqrt() }
}

/// Detailed per-point record written to `solver_reports.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverReport {
    pub mode: String,
    pub seed: u64,
    pub noise_sigma: f64,
    pub accuracy: f64,
    /// Accuracy before test-time adaptation (tta only).
    pub accuracy_before: Option<f64>,
    pub objective: f64,
    /// Ground-truth or oracle objective the ratio is taken against.
    pub reference_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fit or adaptation loss trace, when the mode produced one.
    pub losses: Vec<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    rows: Vec<RunRow>,
    aggregate: [ColumnStats; 5],
    pub solver_reports: Vec<SolverReport>,
}

impl RunReport {
    /// Sorts rows by `(seed, noise_sigma)` and computes the aggregates.
    pub fn new(mut rows: Vec<RunRow>, mut solver_reports: Vec<SolverReport>) -> Self {
        rows.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.noise_sigma.total_cmp(&b.noise_sigma)));
        solver_reports.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.noise_sigma.total_cmp(&b.noise_sigma)));
        let aggregate = Self::compute(&rows);
        Self { rows, aggregate, solver_reports }
    }

    fn compute(rows: &[RunRow]) -> [ColumnStats; 5] {
        std::array::from_fn(|k| stats(rows.iter().map(move |r| r.numeric()[k])))
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn aggregate(&self) -> &[ColumnStats; 5] {
        &self.aggregate
    }

    /// Recomputes the aggregates from the rows and compares.
    pub fn aggregates_consistent(&self, tol: f64) -> bool {
        Self::compute(&self.rows).iter().zip(&self.aggregate).all(|(a, b)| {
            (a.mean.is_nan() && b.mean.is_nan()) || ((a.mean - b.mean).abs() <= tol && (a.std - b.std).abs() <= tol)
        })
    }

    /// Mean accuracy per noise level, in increasing noise order.
    pub fn accuracy_by_noise(&self) -> Vec<(f64, f64)> {
        let mut levels: Vec<f64> = self.rows.iter().map(|r| r.noise_sigma).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        levels
            .into_iter()
            .map(|s| {
                let at = self.rows.iter().filter(|r| r.noise_sigma == s).map(|r| r.accuracy);
                (s, stats(at).mean)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_line());
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("rows={}\n", self.rows.len());
        for (name, s) in AGGREGATE_COLUMNS.iter().zip(&self.aggregate) {
            let _ = writeln!(out, "{name}: {} ± {}", s.mean, s.std);
        }
        for (sigma, acc) in self.accuracy_by_noise() {
            let _ = writeln!(out, "accuracy at noise_sigma={sigma}: {acc}");
        }
        out
    }
}

/// Writes `results.csv`, `summary.txt`, `config.resolved` and
/// `solver_reports.json` into `out_dir`.
pub fn write_report(report: &RunReport, resolved_config: &str, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = serde_json::to_string_pretty(&report.solver_reports)
        .map_err(|e| Error::Parameter(format!("solver report serialization: {e}")))?;
    for (name, body) in [
        ("results.csv", report.to_csv()),
        ("summary.txt", report.summary()),
        ("config.resolved", resolved_config.to_string()),
        ("solver_reports.json", json + "\n"),
    ] {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
