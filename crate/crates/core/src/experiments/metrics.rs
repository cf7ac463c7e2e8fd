//! Per-step metric samples, 2 s bucketing and the metrics CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    /// Sim time, seconds.
    pub t: f64,
    /// Explored map area, m².
    pub explored_area: f64,
    pub normalized_entropy: f64,
    /// Balanced accuracy against the ground-truth map.
    pub bac: f64,
    /// Fraction of mappable ground-truth cells observed.
    pub coverage: f64,
    /// Ground-truth distance travelled, m.
    pub path_length: f64,
    /// Summed absolute wheel rotation, rad.
    pub wheel_rotation: f64,
    pub closures: usize,
    pub ate_rmse: f64,
    pub session: u32,
}

pub const METRICS_HEADER: &str =
    "t,explored_area,normalized_entropy,bac,coverage,path_length,wheel_rotation,closures,ate_rmse,session";

/// Groups samples into `[k·bin, (k+1)·bin)` windows keeping the last value
/// per window; windows without samples repeat the previous window. Each
/// output row is stamped with its window end.
pub fn bucket_metrics(samples: &[MetricSample], bin: f64) -> Vec<MetricSample> {
    let Some(last) = samples.last() else {
        return Vec::new();
    };
    let index = |t: f64| ((t / bin) + 1e-9).floor().max(0.0) as usize;
    let n = index(last.t) + 1;
    let mut slots: Vec<Option<MetricSample>> = vec![None; n];
    for s in samples {
        slots[index(s.t)] = Some(*s);
    }
    let mut out: Vec<MetricSample> = Vec::with_capacity(n);
    for (k, slot) in slots.into_iter().enumerate() {
        let value = match (slot, out.last()) {
            (Some(s), _) => s,
            (None, Some(prev)) => *prev,
            // Nothing yet: leading empty windows are skipped.
            (None, None) => continue,
        };
        out.push(MetricSample {
            t: (k + 1) as f64 * bin,
            ..value
        });
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricSample]) -> Result<()> {
    let mut s = String::new();
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{:.3},{:.6},{:.9},{:.9},{:.9},{:.6},{:.6},{},{:.9},{}",
            r.t,
            r.explored_area,
            r.normalized_entropy,
            r.bac,
            r.coverage,
            r.path_length,
            r.wheel_rotation,
            r.closures,
            r.ate_rmse,
            r.session
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricSample>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(format!("expected 10 fields: `{line}`")));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| bad(format!("`{}`: {e}", f[i])))
        };
        let int = |i: usize| {
            f[i].parse::<u64>()
                .map_err(|e| bad(format!("`{}`: {e}", f[i])))
        };
        rows.push(MetricSample {
            t: num(0)?,
            explored_area: num(1)?,
            normalized_entropy: num(2)?,
            bac: num(3)?,
            coverage: num(4)?,
            path_length: num(5)?,
            wheel_rotation: num(6)?,
            closures: int(7)? as usize,
            ate_rmse: num(8)?,
            session: int(9)? as u32,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(t: f64, v: f64) -> MetricSample {
        MetricSample {
            t,
            explored_area: v,
            normalized_entropy: 0.0,
            bac: 0.0,
            coverage: 0.0,
            path_length: v,
            wheel_rotation: 0.0,
            closures: 0,
            ate_rmse: 0.0,
            session: 0,
        }
    }

    #[test]
    fn one_bin_keeps_last_value() {
        let b = bucket_metrics(&[at(0.3, 1.0), at(1.9, 2.0)], 2.0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].explored_area, 2.0);
        assert_eq!(b[0].t, 2.0);
    }

    #[test]
    fn gaps_are_forward_filled() {
        let b = bucket_metrics(&[at(0.5, 1.0), at(7.0, 5.0)], 2.0);
        let v: Vec<f64> = b.iter().map(|s| s.explored_area).collect();
        assert_eq!(v, vec![1.0, 1.0, 1.0, 5.0]);
        let t: Vec<f64> = b.iter().map(|s| s.t).collect();
        assert_eq!(t, vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn empty_series() {
        assert!(bucket_metrics(&[], 2.0).is_empty());
    }

    #[test]
    fn bin_edges_belong_to_the_next_bin() {
        let b = bucket_metrics(&[at(1.0, 1.0), at(2.0, 2.0)], 2.0);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].explored_area, 1.0);
        assert_eq!(b[1].explored_area, 2.0);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![at(2.0, 1.25), at(4.0, 3.5)];
        write_metrics_csv(&p, &rows).unwrap();
        assert_eq!(read_metrics_csv(&p).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn monotone_series_stay_monotone(steps in proptest::collection::vec((0.0f64..3.0, 0.0f64..1.0), 1..60)) {
            let mut t = 0.0;
            let mut v = 0.0;
            let raw: Vec<MetricSample> = steps.iter().map(|(dt, dv)| { t += dt; v += dv; at(t, v) }).collect();
            let b = bucket_metrics(&raw, 2.0);
            for w in b.windows(2) {
                prop_assert!(w[1].path_length >= w[0].path_length);
                prop_assert!((w[1].t - w[0].t - 2.0).abs() < 1e-9);
            }
            prop_assert_eq!(b.last().unwrap().path_length, raw.last().unwrap().path_length);
        }
    }
}
