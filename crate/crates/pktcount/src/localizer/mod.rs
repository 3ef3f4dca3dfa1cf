//! Trajectory estimation from windowed packet counts: PC-MCL (batch MCMC over
//! positions, speeds and aisle thresholds) and the range-free MCL baseline.

mod mcl;
mod pcmcl;

pub use mcl::mcl_localize;
pub use pcmcl::{pcmcl_localize, pcmcl_log_posterior, PcmclParams, PcmclPosterior};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mcmc::McmcConfig;

/// Floor on the movement-increment standard deviation; keeps the density
/// nonsingular as speed approaches zero.
pub const SIGMA_FLOOR_M: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackMode {
    /// Latent thresholds tau1, tau2 partition y into three aisles.
    Thresholds,
    /// Stack count marginalized under a symmetric Dirichlet prior; works for
    /// any aisle count.
    Dirichlet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub delta_s: f64,
    pub s_max: f64,
    pub mcmc: McmcConfig,
    pub stack_mode: StackMode,
    pub dirichlet_alpha: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            delta_s: 10.0,
            s_max: 2.0,
            mcmc: McmcConfig::default(),
            stack_mode: StackMode::Thresholds,
            dirichlet_alpha: 1.0,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_s > 0.0) {
            return Err(Error::InvalidArgument("delta_s must be > 0".into()));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::InvalidArgument("s_max must be > 0".into()));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::InvalidArgument("dirichlet_alpha must be > 0".into()));
        }
        self.mcmc.validate()
    }
}

/// Aisle from the y coordinate and the two thresholds: 0 below tau1, 1 on
/// [tau1, tau2], 2 above tau2.
pub fn aisle_index(y: f64, tau1: f64, tau2: f64) -> Result<usize> {
    if tau1 > tau2 {
        return Err(Error::InvalidArgument(format!("tau1 = {tau1} > tau2 = {tau2}")));
    }
    Ok(if y < tau1 {
        0
    } else if y <= tau2 {
        1
    } else {
        2
    })
}

/// Per-window position estimate with 95% credible intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEstimate {
    pub window: usize,
    pub t_center_s: f64,
    pub x_hat: f64,
    pub y_hat: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryEstimate {
    pub windows: Vec<WindowEstimate>,
}

impl TrajectoryEstimate {
    pub fn to_csv_file(&self, path: &Path) -> Result<()> {
        let mut out = String::from("window,t_center_s,x_hat,y_hat,x_lo,x_hi,y_lo,y_hi,flags\n");
        for w in &self.windows {
            out.push_str(&format!(
                "{},{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                w.window,
                w.t_center_s,
                w.x_hat,
                w.y_hat,
                w.x_lo,
                w.x_hi,
                w.y_lo,
                w.y_hi,
                w.flags.join(";")
            ));
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut windows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Malformed { line, msg: format!("bad field {j}") })
            };
            let flags = rec
                .get(8)
                .map(|s| {
                    s.split(';').filter(|p| !p.is_empty()).map(String::from).collect::<Vec<_>>()
                })
                .unwrap_or_default();
            windows.push(WindowEstimate {
                window: parse(0)? as usize,
                t_center_s: parse(1)?,
                x_hat: parse(2)?,
                y_hat: parse(3)?,
                x_lo: parse(4)?,
                x_hi: parse(5)?,
                y_lo: parse(6)?,
                y_hi: parse(7)?,
                flags,
            });
        }
        Ok(TrajectoryEstimate { windows })
    }
}

/// Symmetric Dirichlet(alpha) log density summed over 3-simplex rows.
pub fn dirichlet_stack_logprior(q: &[[f64; 3]], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be > 0".into()));
    }
    let log_norm = ln_gamma(3.0 * alpha) - 3.0 * ln_gamma(alpha);
    let mut total = 0.0;
    for row in q {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("not a simplex point: {row:?}")));
        }
        total += log_norm;
        if alpha != 1.0 {
            for &v in row {
                total += (alpha - 1.0) * v.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    Ok(total)
}

/// Categorical stack-count draw from a simplex point.
pub fn stack_draw<R: Rng>(q: &[f64; 3], rng: &mut R) -> Result<usize> {
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || q.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!("not a simplex point: {q:?}")));
    }
    let u: f64 = rng.gen::<f64>() * sum;
    let mut acc = 0.0;
    for (s, &w) in q.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(s);
        }
    }
    Ok(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aisle_index_cases() {
        assert_eq!(aisle_index(0.0, 3.0, 7.0).unwrap(), 0);
        assert_eq!(aisle_index(5.0, 3.0, 7.0).unwrap(), 1);
        // boundary inclusive on both thresholds
        assert_eq!(aisle_index(3.0, 3.0, 7.0).unwrap(), 1);
        assert_eq!(aisle_index(7.0, 3.0, 7.0).unwrap(), 1);
        assert_eq!(aisle_index(10.0, 3.0, 7.0).unwrap(), 2);
        assert!(aisle_index(5.0, 7.0, 3.0).is_err());
    }

    #[test]
    fn flat_dirichlet_density() {
        let q = [[0.2, 0.3, 0.5], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        let lp = dirichlet_stack_logprior(&q, 1.0).unwrap();
        assert_relative_eq!(lp, 2.0 * 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn dirichlet_rejects_non_simplex() {
        assert!(dirichlet_stack_logprior(&[[0.5, 0.5, 0.5]], 1.0).is_err());
        assert!(dirichlet_stack_logprior(&[[-0.1, 0.6, 0.5]], 1.0).is_err());
    }

    #[test]
    fn degenerate_categorical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(stack_draw(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn uniform_marginal_under_flat_prior() {
        // drawing q ~ Dir(1) then S ~ Cat(q) must give a uniform S marginal
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            // Dir(1,1,1) via normalized exponentials
            let e: Vec<f64> = (0..3).map(|_| -rng.gen::<f64>().ln()).collect();
            let sum: f64 = e.iter().sum();
            let q = [e[0] / sum, e[1] / sum, e[2] / sum];
            counts[stack_draw(&q, &mut rng).unwrap()] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.02 / 3.0 + 0.01, "frac {frac}");
        }
    }

    #[test]
    fn estimate_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.csv");
        let est = TrajectoryEstimate {
            windows: vec![WindowEstimate {
                window: 0,
                t_center_s: 5.0,
                x_hat: 1.25,
                y_hat: 0.5,
                x_lo: 1.0,
                x_hi: 1.5,
                y_lo: 0.25,
                y_hi: 0.75,
                flags: vec!["uninformative".into()],
            }],
        };
        est.to_csv_file(&path).unwrap();
        assert_eq!(TrajectoryEstimate::from_csv_file(&path).unwrap(), est);
    }
}
