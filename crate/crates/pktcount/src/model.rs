//! Packet-reception probability model: log p is quadratic in distance,
//! advertising frequency and transmit power offset, with one coefficient set
//! per obstructing-stack count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp bound keeping probabilities inside (0, 1) so binomial likelihoods
/// stay finite.
pub const PROB_EPS: f64 = 1e-9;

/// Reference transmit power in dBm; `r` everywhere is the offset from this.
pub const REFERENCE_POWER_DBM: f64 = -12.0;

/// Converts an absolute transmit power in dBm to the model's dB offset.
pub fn power_offset_db(power_dbm: f64) -> f64 {
    power_dbm - REFERENCE_POWER_DBM
}

/// Beacon radio settings plus the observation window length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    /// Advertising frequency in packets per second.
    pub freq_hz: f64,
    /// Transmit power as a dB offset from the -12 dBm reference.
    pub power_db: f64,
    /// Observation window length in seconds.
    pub window_s: f64,
}

impl RadioConfig {
    pub fn new(freq_hz: f64, power_db: f64, window_s: f64) -> Result<Self> {
        if !(freq_hz > 0.0 && freq_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!("freq_hz must be > 0, got {freq_hz}")));
        }
        if !(window_s > 0.0 && window_s.is_finite()) {
            return Err(Error::InvalidArgument(format!("window_s must be > 0, got {window_s}")));
        }
        if !power_db.is_finite() {
            return Err(Error::InvalidArgument("power_db must be finite".into()));
        }
        let cfg = RadioConfig { freq_hz, power_db, window_s };
        if cfg.packets_per_window() < 1 {
            return Err(Error::InvalidArgument(format!(
                "round(freq_hz * window_s) must be >= 1, got {}",
                cfg.packets_per_window()
            )));
        }
        Ok(cfg)
    }

    /// From an absolute power in dBm.
    pub fn from_dbm(freq_hz: f64, power_dbm: f64, window_s: f64) -> Result<Self> {
        Self::new(freq_hz, power_offset_db(power_dbm), window_s)
    }

    /// Nominal packets sent per beacon per window, N = round(f * delta).
    pub fn packets_per_window(&self) -> u32 {
        (self.freq_hz * self.window_s).round() as u32
    }
}

/// Coefficients of the quadratic form in (d, f, r).
///
/// The fitted reduced form keeps `b0`, the linear terms and the d*r cross
/// term; the remaining quadratic entries stay available and default to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct QuadraticCoefficients {
    pub b0: f64,
    #[serde(default)]
    pub b_d: f64,
    #[serde(default)]
    pub b_f: f64,
    #[serde(default)]
    pub b_r: f64,
    #[serde(default)]
    pub b_dd: f64,
    #[serde(default)]
    pub b_ff: f64,
    #[serde(default)]
    pub b_rr: f64,
    #[serde(default)]
    pub b_df: f64,
    /// Coefficient of the r*d cross term.
    #[serde(default)]
    pub b_rd: f64,
    #[serde(default)]
    pub b_fr: f64,
}

impl QuadraticCoefficients {
    /// Reduced form (b0, b_d, b_f, b_r, b_rd), all other quad terms zero.
    pub fn reduced(b0: f64, b_d: f64, b_f: f64, b_r: f64, b_rd: f64) -> Self {
        QuadraticCoefficients { b0, b_d, b_f, b_r, b_rd, ..Default::default() }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.b0, self.b_d, self.b_f, self.b_r, self.b_dd, self.b_ff, self.b_rr, self.b_df,
            self.b_rd, self.b_fr,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Coefficients in the order used by the fitters.
    /// Reduced: [b0, b_f, b_r, b_d, b_rd]; full adds [b_dd, b_ff, b_rr, b_df, b_fr].
    pub fn to_vec(&self, reduced: bool) -> Vec<f64> {
        let mut v = vec![self.b0, self.b_f, self.b_r, self.b_d, self.b_rd];
        if !reduced {
            v.extend_from_slice(&[self.b_dd, self.b_ff, self.b_rr, self.b_df, self.b_fr]);
        }
        v
    }

    pub fn from_slice(params: &[f64], reduced: bool) -> Result<Self> {
        let want = if reduced { 5 } else { 10 };
        if params.len() != want {
            return Err(Error::InvalidArgument(format!(
                "expected {want} coefficients, got {}",
                params.len()
            )));
        }
        let mut c = QuadraticCoefficients::reduced(params[0], params[3], params[1], params[2], params[4]);
        if !reduced {
            c.b_dd = params[5];
            c.b_ff = params[6];
            c.b_rr = params[7];
            c.b_df = params[8];
            c.b_fr = params[9];
        }
        Ok(c)
    }

    /// Parameter names matching [`Self::to_vec`].
    pub fn param_names(reduced: bool) -> Vec<&'static str> {
        let mut n = vec!["b0", "b_f", "b_r", "b_d", "b_rd"];
        if !reduced {
            n.extend_from_slice(&["b_dd", "b_ff", "b_rr", "b_df", "b_fr"]);
        }
        n
    }
}

/// log p as a quadratic in (d, f, r). Pure; may exceed 0.
pub fn log_reception_general(d: f64, f: f64, r: f64, c: &QuadraticCoefficients) -> Result<f64> {
    if !(d.is_finite() && f.is_finite() && r.is_finite()) {
        return Err(Error::InvalidArgument("non-finite input to log_reception_general".into()));
    }
    if d < 0.0 {
        return Err(Error::InvalidArgument(format!("distance must be >= 0, got {d}")));
    }
    if !c.is_finite() {
        return Err(Error::InvalidArgument("non-finite coefficients".into()));
    }
    Ok(log_reception_unchecked(d, f, r, c))
}

/// Same as [`log_reception_general`] without validation, for inner loops.
#[inline]
pub fn log_reception_unchecked(d: f64, f: f64, r: f64, c: &QuadraticCoefficients) -> f64 {
    c.b0 + c.b_d * d + c.b_f * f + c.b_r * r
        + c.b_dd * d * d
        + c.b_ff * f * f
        + c.b_rr * r * r
        + c.b_df * d * f
        + c.b_rd * r * d
        + c.b_fr * f * r
}

/// Per-stack-count coefficient sets. Index s selects the model for s
/// obstructing stacks; counts above `max_stacks` clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptionModel {
    pub per_stacks: Vec<QuadraticCoefficients>,
    pub max_stacks: usize,
}

impl ReceptionModel {
    pub fn new(per_stacks: Vec<QuadraticCoefficients>) -> Result<Self> {
        if per_stacks.is_empty() {
            return Err(Error::InvalidArgument("per_stacks must be nonempty".into()));
        }
        if per_stacks.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficients".into()));
        }
        let max_stacks = per_stacks.len() - 1;
        Ok(ReceptionModel { per_stacks, max_stacks })
    }

    /// Free-space / one-stack / two-stack model fitted on the library testbed;
    /// used by the demo layout and the reproduction pipeline.
    pub fn demo() -> Self {
        ReceptionModel {
            per_stacks: vec![
                QuadraticCoefficients::reduced(-0.101, -0.272, -0.012, 0.056, 0.189),
                QuadraticCoefficients::reduced(-0.236, -0.292, -0.026, 0.303, 0.018),
                QuadraticCoefficients::reduced(-0.305, -0.302, -0.033, 0.604, 0.017),
            ],
            max_stacks: 2,
        }
    }

    pub fn coeffs(&self, stacks: usize) -> &QuadraticCoefficients {
        &self.per_stacks[stacks.min(self.max_stacks)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_stacks.len() != self.max_stacks + 1 {
            return Err(Error::InvalidArgument(format!(
                "per_stacks has {} entries, expected max_stacks+1 = {}",
                self.per_stacks.len(),
                self.max_stacks + 1
            )));
        }
        if self.per_stacks.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficients".into()));
        }
        Ok(())
    }
}

/// Clamp a probability into [PROB_EPS, 1 - PROB_EPS].
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Reception probability for a given stack count; exp of the quadratic,
/// clamped into (0, 1).
pub fn reception_prob(model: &ReceptionModel, stacks: usize, d: f64, f: f64, r: f64) -> Result<f64> {
    let lp = log_reception_general(d, f, r, model.coeffs(stacks))?;
    Ok(clamp_prob(lp.exp()))
}

/// Empirical reception probability c / (f * delta).
///
/// Returns the (possibly clamped-to-1) estimate and a flag set when c
/// exceeded the nominal packet budget f * delta.
pub fn empirical_prob(c: u32, f: f64, delta: f64) -> Result<(f64, bool)> {
    if !(f * delta > 0.0) || !f.is_finite() || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("f*delta must be > 0, got f={f}, delta={delta}")));
    }
    let n = f * delta;
    let p = c as f64 / n;
    if p > 1.0 {
        Ok((1.0, true))
    } else {
        Ok((p, false))
    }
}

/// Empirical probability prepared as a log-regression target: clamped to
/// [PROB_EPS, 1 - PROB_EPS] so log never diverges.
pub fn log_regression_target(c: u32, f: f64, delta: f64) -> Result<f64> {
    let (p, _) = empirical_prob(c, f, delta)?;
    Ok(clamp_prob(p).ln())
}
