//! Aggregation of archived trials into per-(world, method) tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::read_metrics_csv;
use super::trial::{summarize, TrialSpec, TrialSummary};
use super::METHODS;
use crate::error::{Error, Result};
use crate::fsm::EventLog;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub world: String,
    pub method: String,
    pub trials: usize,
    pub failures: usize,
    pub target_reached: usize,
    pub bac: Stat,
    pub ate_rmse: Stat,
    pub loops_per_meter: Stat,
    pub wheel_rotation_per_meter: Stat,
    pub final_path_length: Stat,
    pub final_normalized_entropy: Stat,
    pub path_to_target: Stat,
    pub entropy_at_target: Stat,
    pub recoveries: Stat,
}

/// Relative difference of a method's mean path-to-coverage versus the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDelta {
    pub world: String,
    pub method: String,
    pub reference: String,
    pub path_to_target_pct: f64,
    pub final_path_length_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub groups: Vec<GroupStats>,
    pub deltas: Vec<MethodDelta>,
}

impl Report {
    pub fn group(&self, world: &str, method: &str) -> Option<&GroupStats> {
        self.groups
            .iter()
            .find(|g| g.world == world && g.method == method)
    }
}

fn method_rank(m: &str) -> usize {
    METHODS
        .iter()
        .position(|x| *x == m)
        .unwrap_or(METHODS.len())
}

/// Per-(world, method) mean and std over every trial, failed ones
/// included and counted, plus path deltas against method `A`.
pub fn compare_methods(trials: &[TrialSummary]) -> Report {
    let mut cells: BTreeMap<(String, usize, String), Vec<&TrialSummary>> = BTreeMap::new();
    for t in trials {
        cells
            .entry((t.world.clone(), method_rank(&t.method), t.method.clone()))
            .or_default()
            .push(t);
    }
    let mut groups = Vec::new();
    for ((world, _, method), ts) in &cells {
        let col = |f: &dyn Fn(&TrialSummary) -> f64| {
            Stat::of(&ts.iter().map(|t| f(t)).collect::<Vec<_>>())
        };
        groups.push(GroupStats {
            world: world.clone(),
            method: method.clone(),
            trials: ts.len(),
            failures: ts.iter().filter(|t| t.failed()).count(),
            target_reached: ts.iter().filter(|t| t.target_reached).count(),
            bac: col(&|t| t.final_bac),
            ate_rmse: col(&|t| t.final_ate_rmse),
            loops_per_meter: col(&|t| t.loops_per_meter),
            wheel_rotation_per_meter: col(&|t| t.wheel_rotation_per_meter),
            final_path_length: col(&|t| t.final_path_length),
            final_normalized_entropy: col(&|t| t.final_normalized_entropy),
            path_to_target: col(&|t| t.path_to_target),
            entropy_at_target: col(&|t| t.entropy_at_target),
            recoveries: col(&|t| (t.recoveries_easy + t.recoveries_hard) as f64),
        });
    }
    let mut deltas = Vec::new();
    for g in &groups {
        let Some(reference) = groups
            .iter()
            .find(|r| r.world == g.world && r.method == "A")
        else {
            continue;
        };
        if g.method == "A" {
            continue;
        }
        let pct = |a: f64, b: f64| {
            if b != 0.0 {
                100.0 * (a - b) / b
            } else {
                f64::NAN
            }
        };
        deltas.push(MethodDelta {
            world: g.world.clone(),
            method: g.method.clone(),
            reference: "A".into(),
            path_to_target_pct: pct(g.path_to_target.mean, reference.path_to_target.mean),
            final_path_length_pct: pct(g.final_path_length.mean, reference.final_path_length.mean),
        });
    }
    Report { groups, deltas }
}

fn trial_dirs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join("summary.json").is_file() {
        out.push(root.to_path_buf());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        trial_dirs(&e, out)?;
    }
    Ok(())
}

/// Finds every trial directory under `root` and recomputes its summary
/// from the archived metrics and event log.
pub fn load_trials(root: &Path) -> Result<Vec<TrialSummary>> {
    let mut dirs = Vec::new();
    trial_dirs(root, &mut dirs)?;
    let mut out = Vec::new();
    for dir in dirs {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path)?;
        let stored: TrialSummary = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let rows = read_metrics_csv(&dir.join("metrics.csv"))?;
        let events = EventLog::read(&dir.join("events.jsonl"))?;
        let spec = TrialSpec {
            world: stored.world.clone(),
            method: stored.method.clone(),
            seed: stored.seed,
            duration: stored.duration,
        };
        out.push(summarize(
            &spec,
            stored.duration,
            stored.outcome.clone(),
            &rows,
            &events,
            stored.coverage_target,
        ));
    }
    Ok(out)
}

fn fmt_stat(s: &Stat, prec: usize) -> String {
    format!("{:.p$} ± {:.p$}", s.mean, s.std, p = prec)
}

/// Writes the aligned text table to `path` and the CSV next to it
/// (`.csv`, or `.txt` for the table when `path` itself ends in `.csv`).
pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let (text_path, csv_path) = if path.extension().is_some_and(|e| e == "csv") {
        (path.with_extension("txt"), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.with_extension("csv"))
    };
    if let Some(parent) = text_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&text_path, render_text(report))?;
    std::fs::write(&csv_path, render_csv(report))?;
    Ok(())
}

pub fn render_text(report: &Report) -> String {
    let header = [
        "world",
        "method",
        "n",
        "fail",
        "cov",
        "BAC",
        "ATE [m]",
        "loops/m",
        "wheel rad/m",
        "path [m]",
        "H_norm",
        "path@cov [m]",
        "H_norm@cov",
        "recov",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for g in &report.groups {
        rows.push(vec![
            g.world.clone(),
            g.method.clone(),
            g.trials.to_string(),
            g.failures.to_string(),
            format!("{}/{}", g.target_reached, g.trials),
            fmt_stat(&g.bac, 3),
            fmt_stat(&g.ate_rmse, 3),
            fmt_stat(&g.loops_per_meter, 3),
            fmt_stat(&g.wheel_rotation_per_meter, 1),
            fmt_stat(&g.final_path_length, 1),
            fmt_stat(&g.final_normalized_entropy, 3),
            fmt_stat(&g.path_to_target, 1),
            fmt_stat(&g.entropy_at_target, 3),
            fmt_stat(&g.recoveries, 1),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(
                s,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            );
        }
    }
    if !report.deltas.is_empty() {
        let _ = writeln!(
            s,
            "\nPath length relative to A (mean path to coverage target / final path):"
        );
        for d in &report.deltas {
            let _ = writeln!(
                s,
                "  {:<10} {:<8} {:+6.1}% / {:+6.1}%",
                d.world, d.method, d.path_to_target_pct, d.final_path_length_pct
            );
        }
    }
    s
}

pub fn render_csv(report: &Report) -> String {
    let mut s = String::from(
        "world,method,trials,failures,target_reached,bac_mean,bac_std,ate_mean,ate_std,loops_per_m_mean,loops_per_m_std,\
wheel_per_m_mean,wheel_per_m_std,path_mean,path_std,entropy_mean,entropy_std,path_to_target_mean,path_to_target_std,\
entropy_at_target_mean,entropy_at_target_std,recoveries_mean,recoveries_std,path_to_target_delta_pct\n",
    );
    for g in &report.groups {
        let delta = report
            .deltas
            .iter()
            .find(|d| d.world == g.world && d.method == g.method)
            .map(|d| format!("{:.3}", d.path_to_target_pct))
            .unwrap_or_default();
        let st = |x: &Stat| format!("{:.6},{:.6}", x.mean, x.std);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            g.world,
            g.method,
            g.trials,
            g.failures,
            g.target_reached,
            st(&g.bac),
            st(&g.ate_rmse),
            st(&g.loops_per_meter),
            st(&g.wheel_rotation_per_meter),
            st(&g.final_path_length),
            st(&g.final_normalized_entropy),
            st(&g.path_to_target),
            st(&g.entropy_at_target),
            st(&g.recoveries),
            delta
        );
    }
    s
}
