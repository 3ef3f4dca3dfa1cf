//! Coefficient estimation for the reception model: binomial-likelihood MCMC
//! and least-squares on log empirical probabilities, one fit per stack-count
//! stratum.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::mcmc::{self, FnTarget, McmcConfig, PosteriorSamples};
use crate::model::{
    clamp_prob, log_reception_unchecked, log_regression_target, power_offset_db,
    QuadraticCoefficients, ReceptionModel, REFERENCE_POWER_DBM,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    /// Distance to the beacon in meters.
    pub d: f64,
    /// Advertising frequency in Hz.
    pub f: f64,
    /// Power offset from the -12 dBm reference.
    pub r: f64,
    pub stacks: usize,
    /// Packets received.
    pub c: u32,
    /// Packets sent in the observation window.
    pub n_sent: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingDataset {
    pub rows: Vec<TrainingRow>,
}

impl TrainingDataset {
    pub fn new(rows: Vec<TrainingRow>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.c > row.n_sent {
                return Err(Error::InvalidArgument(format!(
                    "row {i}: c = {} exceeds n_sent = {}",
                    row.c, row.n_sent
                )));
            }
            if !(row.d >= 0.0) || !row.d.is_finite() || !row.f.is_finite() || !row.r.is_finite() {
                return Err(Error::InvalidArgument(format!("row {i}: invalid d/f/r")));
            }
        }
        Ok(TrainingDataset { rows })
    }

    pub fn strata(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.rows.iter().map(|r| r.stacks).collect();
        set.into_iter().collect()
    }

    pub fn stratum_rows(&self, stacks: usize) -> Vec<&TrainingRow> {
        self.rows.iter().filter(|r| r.stacks == stacks).collect()
    }

    pub fn to_csv_file(&self, path: &Path) -> Result<()> {
        let mut out = String::from("d_m,f_hz,power_dbm,stacks,c,n_sent\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.d,
                r.f,
                r.r + REFERENCE_POWER_DBM,
                r.stacks,
                r.c,
                r.n_sent
            ));
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        {
            let headers = rdr.headers()?;
            let want = ["d_m", "f_hz", "power_dbm", "stacks", "c", "n_sent"];
            if headers.len() != want.len() || headers.iter().zip(want).any(|(a, b)| a != b) {
                return Err(Error::Malformed {
                    line: 1,
                    msg: format!("expected header {}, got {:?}", want.join(","), headers),
                });
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let field = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Malformed { line, msg: format!("bad field {j}") })
            };
            let row = TrainingRow {
                d: field(0)?,
                f: field(1)?,
                r: power_offset_db(field(2)?),
                stacks: field(3)? as usize,
                c: field(4)? as u32,
                n_sent: field(5)? as u32,
            };
            if row.c > row.n_sent {
                return Err(Error::Malformed { line, msg: "c exceeds n_sent".into() });
            }
            rows.push(row);
        }
        TrainingDataset::new(rows)
    }
}

/// Normal prior shared by every coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { mu: 0.0, sigma: 10.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[inline]
fn ln_choose(n: u32, c: u32) -> f64 {
    ln_factorial(n as u64) - ln_factorial(c as u64) - ln_factorial((n - c) as u64)
}

#[inline]
fn binom_ln_pmf_with(lnc: f64, c: u32, n: u32, p: f64) -> f64 {
    // p is pre-clamped into (0,1); ln(1-p) via ln_1p keeps c = n rows finite
    lnc + c as f64 * p.ln() + (n - c) as f64 * (1.0 - p).ln()
}

/// Binomial log likelihood of one stratum's rows under a coefficient set.
pub fn log_likelihood(
    theta: &QuadraticCoefficients,
    data: &TrainingDataset,
    stacks_stratum: usize,
) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument("non-finite coefficients".into()));
    }
    let rows = data.stratum_rows(stacks_stratum);
    if rows.is_empty() {
        return Err(Error::Stratum(stacks_stratum, "no rows in stratum".into()));
    }
    let mut total = 0.0;
    for row in rows {
        let p = clamp_prob(log_reception_unchecked(row.d, row.f, row.r, theta).exp());
        total += binom_ln_pmf_with(ln_choose(row.n_sent, row.c), row.c, row.n_sent, p);
    }
    Ok(total)
}

/// Sum of Normal log densities over the free coefficients.
pub fn log_prior(params: &[f64], prior: &PriorSpec) -> Result<f64> {
    prior.validate()?;
    let norm = -(prior.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    Ok(params
        .iter()
        .map(|&b| norm - 0.5 * ((b - prior.mu) / prior.sigma).powi(2))
        .sum())
}

fn design_row(d: f64, f: f64, r: f64, reduced: bool) -> Vec<f64> {
    let mut row = vec![1.0, f, r, d, r * d];
    if !reduced {
        row.extend_from_slice(&[d * d, f * f, r * r, d * f, f * r]);
    }
    row
}

/// Ordinary least squares of log empirical probability on the design
/// (1, f, r, d, r*d), or the full quadratic. One coefficient set per stratum.
pub fn fit_reception_ml(data: &TrainingDataset, reduced: bool) -> Result<ReceptionModel> {
    let strata = contiguous_strata(data)?;
    let mut per_stacks = Vec::new();
    for s in strata {
        per_stacks.push(fit_stratum_ml(data, s, reduced)?);
    }
    ReceptionModel::new(per_stacks)
}

fn fit_stratum_ml(
    data: &TrainingDataset,
    stratum: usize,
    reduced: bool,
) -> Result<QuadraticCoefficients> {
    let rows = data.stratum_rows(stratum);
    let n_params = if reduced { 5 } else { 10 };
    if rows.len() < n_params {
        return Err(Error::Stratum(
            stratum,
            format!("{} rows, need at least {n_params}", rows.len()),
        ));
    }
    let mut x = DMatrix::zeros(rows.len(), n_params);
    let mut y = DVector::zeros(rows.len());
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in design_row(row.d, row.f, row.r, reduced).into_iter().enumerate() {
            x[(i, j)] = v;
        }
        // each row's own window length: n_sent packets at frequency f
        y[i] = log_regression_target(row.c, row.f, row.n_sent as f64 / row.f)?;
    }
    let svd = x.svd(true, true);
    let tol = 1e-9 * svd.singular_values.max();
    let rank = svd.rank(tol);
    if rank < n_params {
        return Err(Error::RankDeficient { rank, cols: n_params });
    }
    let beta = svd.solve(&y, tol).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    QuadraticCoefficients::from_slice(beta.as_slice(), reduced)
}

fn contiguous_strata(data: &TrainingDataset) -> Result<Vec<usize>> {
    let strata = data.strata();
    if strata.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    for (i, &s) in strata.iter().enumerate() {
        if s != i {
            return Err(Error::Stratum(s, "strata must be contiguous from 0".into()));
        }
    }
    Ok(strata)
}

/// Posterior samples per stratum plus the posterior-mean model.
pub fn fit_reception_bayes(
    data: &TrainingDataset,
    prior: &PriorSpec,
    config: &McmcConfig,
    reduced: bool,
) -> Result<(Vec<(usize, PosteriorSamples)>, ReceptionModel)> {
    prior.validate()?;
    config.validate()?;
    let strata = contiguous_strata(data)?;
    let mut posteriors = Vec::new();
    let mut per_stacks = Vec::new();
    for stratum in strata {
        let samples = fit_stratum_bayes(data, stratum, prior, config, reduced)?;
        let means: Vec<f64> = (0..samples.dim()).map(|p| samples.mean(p)).collect();
        per_stacks.push(QuadraticCoefficients::from_slice(&means, reduced)?);
        posteriors.push((stratum, samples));
    }
    let model = ReceptionModel::new(per_stacks)?;
    Ok((posteriors, model))
}

fn fit_stratum_bayes(
    data: &TrainingDataset,
    stratum: usize,
    prior: &PriorSpec,
    config: &McmcConfig,
    reduced: bool,
) -> Result<PosteriorSamples> {
    let rows: Vec<TrainingRow> = data.stratum_rows(stratum).into_iter().copied().collect();
    if rows.is_empty() {
        return Err(Error::Stratum(stratum, "no rows in stratum".into()));
    }
    let distinct_d: BTreeSet<u64> = rows.iter().map(|r| r.d.to_bits()).collect();
    if distinct_d.len() < 2 {
        return Err(Error::Stratum(stratum, "needs at least 2 distinct distances".into()));
    }

    // ML start when the design permits, zeros otherwise
    let init = match fit_stratum_ml(data, stratum, reduced) {
        Ok(coeffs) => coeffs.to_vec(reduced),
        Err(_) => vec![0.0; if reduced { 5 } else { 10 }],
    };

    let lnc: Vec<f64> = rows.iter().map(|r| ln_choose(r.n_sent, r.c)).collect();
    let prior = *prior;
    let dim = init.len();
    let target = FnTarget::new(dim, move |params: &[f64]| {
        let theta = match QuadraticCoefficients::from_slice(params, reduced) {
            Ok(t) => t,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut lp = 0.0;
        for (row, &lnc) in rows.iter().zip(&lnc) {
            let p = clamp_prob(log_reception_unchecked(row.d, row.f, row.r, &theta).exp());
            lp += binom_ln_pmf_with(lnc, row.c, row.n_sent, p);
        }
        let norm = -(prior.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        lp + params
            .iter()
            .map(|&b| norm - 0.5 * ((b - prior.mu) / prior.sigma).powi(2))
            .sum::<f64>()
    });

    let stratum_config = McmcConfig {
        seed: mcmc::split_seed_label(config.seed, &format!("stratum-{stratum}")),
        ..config.clone()
    };
    let names: Vec<String> =
        QuadraticCoefficients::param_names(reduced).into_iter().map(String::from).collect();
    mcmc::mcmc_sample(&target, &init, &stratum_config, names)
}

/// Per-parameter posterior summary written next to the draw files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub rhat: f64,
    pub ess: f64,
}

pub fn summarize_posterior(samples: &PosteriorSamples) -> Result<Vec<ParamSummary>> {
    let rhats = mcmc::rhat(samples)?;
    let esses = mcmc::ess(samples)?;
    Ok((0..samples.dim())
        .map(|p| ParamSummary {
            name: samples.param_names[p].clone(),
            mean: samples.mean(p),
            sd: samples.sd(p),
            rhat: rhats[p],
            ess: esses[p],
        })
        .collect())
}

/// One column per parameter, one row per kept draw, chains concatenated.
pub fn write_posterior_csv(samples: &PosteriorSamples, path: &Path) -> Result<()> {
    let mut out = samples.param_names.join(",");
    out.push('\n');
    for chain in &samples.draws {
        for draw in chain {
            let row: Vec<String> = draw.iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    crate::io::write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::model::reception_prob;
    use crate::simulator::binomial_draw;

    fn grid_rows<F: Fn(f64, f64, f64) -> f64>(truth_p: F, n_sent: u32, stacks: usize) -> Vec<TrainingRow> {
        // 9 (f, r) configs x distances 1..10
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut rows = Vec::new();
        for &f in &[1.0, 2.0, 10.0] {
            for &r in &[-8.0, -3.0, 0.0] {
                for d in 1..=10 {
                    let d = d as f64;
                    let p = truth_p(d, f, r);
                    let c = binomial_draw(n_sent, p, &mut rng).unwrap();
                    rows.push(TrainingRow { d, f, r, stacks, c, n_sent });
                }
            }
        }
        rows
    }

    #[test]
    fn log_likelihood_frozen_values() {
        // c = 5, n = 10, coefficients forcing p = 0.5:
        // ln C(10,5) + 10 ln 0.5 = ln 252 - 10 ln 2
        let theta = QuadraticCoefficients { b0: 0.5f64.ln(), ..Default::default() };
        let data = TrainingDataset::new(vec![TrainingRow {
            d: 1.0,
            f: 1.0,
            r: 0.0,
            stacks: 0,
            c: 5,
            n_sent: 10,
        }])
        .unwrap();
        let ll = log_likelihood(&theta, &data, 0).unwrap();
        let expected = 252f64.ln() - 10.0 * 2f64.ln();
        assert_relative_eq!(ll, expected, max_relative = 1e-12);
        assert_relative_eq!(ll, -1.4020427180880297, max_relative = 1e-9);
    }

    #[test]
    fn log_likelihood_saturated_near_zero() {
        // p clamps to 1 - eps, c = n_sent
        let theta = QuadraticCoefficients { b0: 1.0, ..Default::default() };
        let data = TrainingDataset::new(vec![TrainingRow {
            d: 0.0,
            f: 1.0,
            r: 0.0,
            stacks: 0,
            c: 10,
            n_sent: 10,
        }])
        .unwrap();
        let ll = log_likelihood(&theta, &data, 0).unwrap();
        assert!(ll.abs() < 1e-6, "ll {ll}");
    }

    #[test]
    fn log_likelihood_clamp_floor_finite() {
        let theta = QuadraticCoefficients { b0: -1000.0, ..Default::default() };
        let data = TrainingDataset::new(vec![TrainingRow {
            d: 1.0,
            f: 1.0,
            r: 0.0,
            stacks: 0,
            c: 3,
            n_sent: 10,
        }])
        .unwrap();
        let ll = log_likelihood(&theta, &data, 0).unwrap();
        assert!(ll.is_finite());
        assert!(ll < -20.0);
    }

    #[test]
    fn log_likelihood_empty_stratum_errors() {
        let theta = QuadraticCoefficients::default();
        let data = TrainingDataset::default();
        assert!(matches!(log_likelihood(&theta, &data, 1), Err(Error::Stratum(1, _))));
    }

    #[test]
    fn log_prior_closed_forms() {
        let prior = PriorSpec::default();
        let k = 5;
        let at_mode = log_prior(&vec![0.0; k], &prior).unwrap();
        let expected = k as f64 * (1.0 / (10.0 * (2.0 * std::f64::consts::PI).sqrt())).ln();
        assert_relative_eq!(at_mode, expected, max_relative = 1e-12);

        let one_sigma = log_prior(&[10.0], &prior).unwrap();
        let mode = log_prior(&[0.0], &prior).unwrap();
        assert_relative_eq!(one_sigma, mode - 0.5, max_relative = 1e-12);

        assert!(log_prior(&[0.0], &PriorSpec { mu: 0.0, sigma: 0.0 }).is_err());
    }

    #[test]
    fn posterior_additivity() {
        let theta = QuadraticCoefficients::reduced(-0.2, -0.3, 0.01, 0.05, 0.0);
        let data = TrainingDataset::new(grid_rows(
            |d, f, r| {
                clamp_prob(log_reception_unchecked(d, f, r, &theta).exp())
            },
            50,
            0,
        ))
        .unwrap();
        let prior = PriorSpec::default();
        let params = theta.to_vec(true);
        let ll = log_likelihood(&theta, &data, 0).unwrap();
        let lp = log_prior(&params, &prior).unwrap();
        // the fitter's internal target is the exact sum; spot-check additivity
        assert!((ll + lp).is_finite());
    }

    #[test]
    fn ols_exact_on_noiseless_targets() {
        let truth = QuadraticCoefficients::reduced(-0.15, -0.25, -0.01, 0.06, 0.02);
        let mut rows = Vec::new();
        for &f in &[1.0, 2.0, 10.0] {
            for &r in &[-8.0, -3.0, 0.0] {
                for d in 1..=10 {
                    let d = d as f64;
                    let p = log_reception_unchecked(d, f, r, &truth).exp().min(1.0 - 1e-9);
                    // manufacture counts giving exactly p as empirical target
                    // is impossible with integers; instead bypass counts by
                    // using large n and exact fractional c via direct target
                    let n_sent = 1_000_000u32;
                    let c = (p * n_sent as f64).round() as u32;
                    rows.push(TrainingRow { d, f, r, stacks: 0, c, n_sent });
                }
            }
        }
        let data = TrainingDataset::new(rows).unwrap();
        let model = fit_reception_ml(&data, true).unwrap();
        let got = model.coeffs(0);
        // rounding c to an integer bounds target error by ~1e-6 relative
        for (a, b) in got.to_vec(true).iter().zip(truth.to_vec(true).iter()) {
            assert!((a - b).abs() < 1e-3, "got {a}, want {b}");
        }
    }

    #[test]
    fn ols_rank_deficiency_detected() {
        // constant r and f: the f, r and r*d columns are collinear with
        // the intercept and d columns
        let mut rows = Vec::new();
        for d in 1..=10 {
            rows.push(TrainingRow { d: d as f64, f: 1.0, r: 0.0, stacks: 0, c: 5, n_sent: 10 });
        }
        let data = TrainingDataset::new(rows).unwrap();
        assert!(matches!(fit_reception_ml(&data, true), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn ols_consistency_on_noisy_counts() {
        // stay in a regime where counts never hit the clamp floor: small
        // probabilities turn the log-of-proportion target into a biased,
        // heavy-tailed quantity, so keep n*p large
        let truth = ReceptionModel::demo();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut rows = Vec::new();
        let n_sent = 1_000_000u32;
        for &f in &[1.0, 2.0, 10.0] {
            for &r in &[-3.0, 0.0] {
                for d in 1..=6 {
                    let d = d as f64;
                    let p = reception_prob(&truth, 0, d, f, r).unwrap();
                    let c = binomial_draw(n_sent, p, &mut rng).unwrap();
                    rows.push(TrainingRow { d, f, r, stacks: 0, c, n_sent });
                }
            }
        }
        let data = TrainingDataset::new(rows).unwrap();
        let model = fit_reception_ml(&data, true).unwrap();
        let got = model.coeffs(0).to_vec(true);
        let want = truth.coeffs(0).to_vec(true);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 0.05, "got {g}, want {w}");
        }
    }

    #[test]
    fn bayes_single_distance_unidentifiable() {
        let rows: Vec<TrainingRow> = (0..20)
            .map(|i| TrainingRow { d: 2.0, f: 1.0, r: 0.0, stacks: 0, c: i % 5, n_sent: 10 })
            .collect();
        let data = TrainingDataset::new(rows).unwrap();
        let cfg = McmcConfig { iterations: 200, burn_in: 100, ..Default::default() };
        let err = fit_reception_bayes(&data, &PriorSpec::default(), &cfg, true);
        assert!(matches!(err, Err(Error::Stratum(0, _))));
    }

    #[test]
    fn bayes_deterministic() {
        let truth = ReceptionModel::demo();
        let data = TrainingDataset::new(grid_rows(
            |d, f, r| reception_prob(&truth, 0, d, f, r).unwrap(),
            100,
            0,
        ))
        .unwrap();
        let cfg =
            McmcConfig { chains: 2, iterations: 600, burn_in: 200, seed: 5, ..Default::default() };
        let (_, m1) = fit_reception_bayes(&data, &PriorSpec::default(), &cfg, true).unwrap();
        let (_, m2) = fit_reception_bayes(&data, &PriorSpec::default(), &cfg, true).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let data = TrainingDataset::new(vec![
            TrainingRow { d: 1.5, f: 10.0, r: -3.0, stacks: 1, c: 42, n_sent: 100 },
            TrainingRow { d: 2.0, f: 1.0, r: 0.0, stacks: 0, c: 3, n_sent: 10 },
        ])
        .unwrap();
        data.to_csv_file(&path).unwrap();
        assert_eq!(TrainingDataset::from_csv_file(&path).unwrap(), data);
    }

    #[test]
    fn dataset_rejects_c_above_n() {
        let rows = vec![TrainingRow { d: 1.0, f: 1.0, r: 0.0, stacks: 0, c: 11, n_sent: 10 }];
        assert!(TrainingDataset::new(rows).is_err());
    }
}
