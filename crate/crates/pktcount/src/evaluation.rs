//! Error metrics against ground truth and the comparison/time-series reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sig6, write_atomic};
use crate::localizer::TrajectoryEstimate;
use crate::simulator::GroundTruth;

/// Identifies a run in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMeta {
    pub algorithm: String,
    pub freq_hz: f64,
    pub power_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub meta: RunMeta,
    pub errors_m: Vec<f64>,
    pub mean_m: f64,
    pub median_m: f64,
    pub p90_m: f64,
    /// Mean over windows not flagged as aisle transitions; absent when every
    /// window is flagged.
    pub within_aisle_mean_m: Option<f64>,
    /// Mean over flagged (transition) windows; absent without flags.
    pub transition_mean_m: Option<f64>,
}

impl ErrorReport {
    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        write_atomic(path, s.as_bytes())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Euclidean error per window: estimate vs interpolated truth at the window
/// center. Centers that fall outside the truth span by more than half the
/// window spacing are an error; smaller overhangs clamp to the span edge.
pub fn per_window_error(est: &TrajectoryEstimate, truth: &GroundTruth) -> Result<Vec<f64>> {
    if est.windows.is_empty() {
        return Err(Error::InvalidArgument("empty estimate".into()));
    }
    let duration = truth.duration_s();
    let slack = if est.windows.len() >= 2 {
        (est.windows[1].t_center_s - est.windows[0].t_center_s) / 2.0
    } else {
        est.windows[0].t_center_s
    };
    let mut errors = Vec::with_capacity(est.windows.len());
    for w in &est.windows {
        let t = w.t_center_s;
        if t < -slack || t > duration + slack {
            return Err(Error::InvalidArgument(format!(
                "window center {t} s outside truth span [0, {duration}] s"
            )));
        }
        let (tx, ty) = truth.position_at(t.clamp(0.0, duration))?;
        errors.push(((w.x_hat - tx).powi(2) + (w.y_hat - ty).powi(2)).sqrt());
    }
    Ok(errors)
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Aggregate per-window errors. `corridor_flags[i]` marks window i as an
/// aisle-transition window; quantiles use the nearest-rank method.
pub fn summarize(errors: &[f64], corridor_flags: &[bool], meta: RunMeta) -> Result<ErrorReport> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("no errors to summarize".into()));
    }
    if errors.len() != corridor_flags.len() {
        return Err(Error::InvalidArgument(format!(
            "{} errors but {} flags",
            errors.len(),
            corridor_flags.len()
        )));
    }
    if errors.iter().any(|&e| !(e >= 0.0)) {
        return Err(Error::InvalidArgument("errors must be >= 0".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean_of = |keep: &dyn Fn(usize) -> bool| {
        let vals: Vec<f64> =
            errors.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, &e)| e).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(ErrorReport {
        meta,
        errors_m: errors.to_vec(),
        mean_m: errors.iter().sum::<f64>() / errors.len() as f64,
        median_m: nearest_rank(&sorted, 0.5),
        p90_m: nearest_rank(&sorted, 0.9),
        within_aisle_mean_m: mean_of(&|i| !corridor_flags[i]),
        transition_mean_m: mean_of(&|i| corridor_flags[i]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub power_dbm: f64,
    pub freq_hz: f64,
    pub pcmcl_mean: f64,
    pub mcl_mean: f64,
    pub reduction_pct: f64,
}

/// Percentage error reduction of `pcmcl` relative to `mcl`.
pub fn reduction_pct(pcmcl_mean: f64, mcl_mean: f64) -> Result<f64> {
    if pcmcl_mean == 0.0 && mcl_mean == 0.0 {
        return Ok(0.0);
    }
    if !(mcl_mean > 0.0) {
        return Err(Error::InvalidArgument(format!("baseline mean must be > 0, got {mcl_mean}")));
    }
    Ok((mcl_mean - pcmcl_mean) / mcl_mean * 100.0)
}

/// Paired-report table. Each pair must carry matching radio settings and the
/// expected algorithm tags.
pub fn compare_report(runs: &[(ErrorReport, ErrorReport)]) -> Result<Vec<CompareRow>> {
    runs.iter()
        .map(|(p, m)| {
            if p.meta.freq_hz != m.meta.freq_hz || p.meta.power_dbm != m.meta.power_dbm {
                return Err(Error::InvalidArgument(format!(
                    "unpaired configs: ({}, {}) vs ({}, {})",
                    p.meta.freq_hz, p.meta.power_dbm, m.meta.freq_hz, m.meta.power_dbm
                )));
            }
            Ok(CompareRow {
                power_dbm: p.meta.power_dbm,
                freq_hz: p.meta.freq_hz,
                pcmcl_mean: p.mean_m,
                mcl_mean: m.mean_m,
                reduction_pct: reduction_pct(p.mean_m, m.mean_m)?,
            })
        })
        .collect()
}

pub fn compare_rows_to_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut out = String::from("power_dbm,freq_hz,pcmcl_mean,mcl_mean,reduction_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            sig6(r.power_dbm),
            sig6(r.freq_hz),
            sig6(r.pcmcl_mean),
            sig6(r.mcl_mean),
            sig6(r.reduction_pct)
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// One labelled run for the time-series export.
#[derive(Debug, Clone)]
pub struct TimeseriesRun {
    pub algorithm: String,
    pub estimate: TrajectoryEstimate,
    pub errors_m: Vec<f64>,
}

/// Plot-ready error-vs-window CSV, one row per (algorithm, window), ordered by
/// (algorithm, window).
pub fn timeseries_export(runs: &[TimeseriesRun], path: &Path) -> Result<()> {
    let mut sorted: Vec<&TimeseriesRun> = runs.iter().collect();
    sorted.sort_by(|a, b| a.algorithm.cmp(&b.algorithm));
    let mut out = String::from("algorithm,window,t_center_s,error_m,flags\n");
    for run in sorted {
        if run.errors_m.len() != run.estimate.windows.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: {} errors for {} windows",
                run.algorithm,
                run.errors_m.len(),
                run.estimate.windows.len()
            )));
        }
        for (w, &e) in run.estimate.windows.iter().zip(&run.errors_m) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                run.algorithm,
                w.window,
                sig6(w.t_center_s),
                sig6(e),
                w.flags.join(";")
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::WindowEstimate;
    use crate::simulator::TruthSample;
    use approx::assert_relative_eq;

    fn est_at(points: &[(f64, f64, f64)]) -> TrajectoryEstimate {
        TrajectoryEstimate {
            windows: points
                .iter()
                .enumerate()
                .map(|(i, &(t, x, y))| WindowEstimate {
                    window: i,
                    t_center_s: t,
                    x_hat: x,
                    y_hat: y,
                    x_lo: x,
                    x_hi: x,
                    y_lo: y,
                    y_hi: y,
                    flags: vec![],
                })
                .collect(),
        }
    }

    fn truth_line(points: &[(f64, f64, f64)]) -> GroundTruth {
        GroundTruth {
            samples: points
                .iter()
                .map(|&(t, x, y)| TruthSample { t_s: t, x, y, aisle: 0, corridor: false })
                .collect(),
        }
    }

    #[test]
    fn three_four_five() {
        let est = est_at(&[(5.0, 0.0, 0.0)]);
        let truth = truth_line(&[(0.0, 3.0, 4.0), (10.0, 3.0, 4.0)]);
        let errs = per_window_error(&est, &truth).unwrap();
        assert_relative_eq!(errs[0], 5.0, max_relative = 1e-12);
    }

    #[test]
    fn exact_match_gives_zeros() {
        let est = est_at(&[(2.0, 1.0, 1.0), (6.0, 3.0, 1.0)]);
        let truth = truth_line(&[(0.0, 0.0, 1.0), (8.0, 4.0, 1.0)]);
        let errs = per_window_error(&est, &truth).unwrap();
        for e in errs {
            assert_relative_eq!(e, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn known_offsets() {
        let truth = truth_line(&[(0.0, 5.0, 5.0), (20.0, 5.0, 5.0)]);
        let est = est_at(&[(5.0, 6.0, 5.0), (15.0, 5.0, 7.0)]);
        let errs = per_window_error(&est, &truth).unwrap();
        assert_relative_eq!(errs[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(errs[1], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn disjoint_spans_error() {
        let truth = truth_line(&[(0.0, 0.0, 0.0), (10.0, 0.0, 0.0)]);
        let est = est_at(&[(100.0, 0.0, 0.0), (110.0, 0.0, 0.0)]);
        assert!(per_window_error(&est, &truth).is_err());
    }

    #[test]
    fn summarize_means() {
        let rep = summarize(&[1.0, 2.0, 3.0], &[false; 3], RunMeta::default()).unwrap();
        assert_relative_eq!(rep.mean_m, 2.0, max_relative = 1e-12);
        assert_eq!(rep.median_m, 2.0);
        assert_eq!(rep.p90_m, 3.0);
        assert_eq!(rep.within_aisle_mean_m, Some(2.0));
        assert_eq!(rep.transition_mean_m, None);
    }

    #[test]
    fn summarize_splits_by_flag() {
        let rep = summarize(&[1.0, 9.0], &[false, true], RunMeta::default()).unwrap();
        assert_eq!(rep.within_aisle_mean_m, Some(1.0));
        assert_eq!(rep.transition_mean_m, Some(9.0));
    }

    #[test]
    fn summarize_matches_arithmetic_mean() {
        let errors: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin().abs() * 3.0).collect();
        let rep = summarize(&errors, &vec![false; 100], RunMeta::default()).unwrap();
        let oracle = errors.iter().sum::<f64>() / 100.0;
        assert_relative_eq!(rep.mean_m, oracle, max_relative = 1e-12);
    }

    #[test]
    fn summarize_rejects_bad_input() {
        assert!(summarize(&[], &[], RunMeta::default()).is_err());
        assert!(summarize(&[1.0], &[], RunMeta::default()).is_err());
        assert!(summarize(&[-1.0], &[false], RunMeta::default()).is_err());
    }

    fn report(alg: &str, f: f64, r: f64, mean: f64) -> ErrorReport {
        summarize(
            &[mean],
            &[false],
            RunMeta { algorithm: alg.into(), freq_hz: f, power_dbm: r },
        )
        .unwrap()
    }

    #[test]
    fn reduction_values() {
        // published table rows
        assert_relative_eq!(
            reduction_pct(1.48, 3.17).unwrap(),
            53.31230283911672,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            reduction_pct(1.83, 3.35).unwrap(),
            45.37313432835821,
            max_relative = 1e-12
        );
        assert_eq!(reduction_pct(2.5, 2.5).unwrap(), 0.0);
        // scale free
        for c in [0.5, 2.0, 17.0] {
            assert_relative_eq!(
                reduction_pct(1.48 * c, 3.17 * c).unwrap(),
                reduction_pct(1.48, 3.17).unwrap(),
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn compare_report_pairs_and_rejects_mismatch() {
        let rows = compare_report(&[(
            report("pcmcl", 2.0, -15.0, 1.48),
            report("mcl", 2.0, -15.0, 3.17),
        )])
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_relative_eq!(rows[0].reduction_pct, 53.31230283911672, max_relative = 1e-12);
        assert!(compare_report(&[(
            report("pcmcl", 2.0, -15.0, 1.48),
            report("mcl", 1.0, -15.0, 3.17),
        )])
        .is_err());
    }

    #[test]
    fn timeseries_rows_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.csv");
        let mut est = est_at(&[(5.0, 1.0, 1.0), (15.0, 2.0, 1.0)]);
        est.windows[1].flags.push("relaxed".into());
        let runs = vec![
            TimeseriesRun {
                algorithm: "pcmcl".into(),
                estimate: est.clone(),
                errors_m: vec![0.5, 0.7],
            },
            TimeseriesRun { algorithm: "mcl".into(), estimate: est, errors_m: vec![3.0, 3.5] },
        ];
        timeseries_export(&runs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        // ordered by algorithm then window; flags carried through
        assert!(lines[1].starts_with("mcl,0,"));
        assert!(lines[2].starts_with("mcl,1,"));
        assert!(lines[2].ends_with(",relaxed"));
        assert!(lines[3].starts_with("pcmcl,0,"));
    }
}
