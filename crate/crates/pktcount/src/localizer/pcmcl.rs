//! Packet-count Monte-Carlo localization: batch MCMC over the whole
//! trajectory, per-leg speeds and the latent aisle thresholds, driven by the
//! binomial count likelihood of the reception model.

use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::mcmc::{self, CoordTarget, McmcConfig, Target};
use crate::model::{clamp_prob, log_reception_unchecked, QuadraticCoefficients, RadioConfig, ReceptionModel};
use crate::trace::{PacketTrace, WindowedCounts};

use super::{aisle_index, LocalizerConfig, StackMode, TrajectoryEstimate, WindowEstimate, SIGMA_FLOOR_M};

const LN_SQRT_2PI: f64 = 0.9189385332046727;

/// Latent vector of the PC-MCL posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmclParams {
    /// One (x, y) per window.
    pub xy: Vec<(f64, f64)>,
    /// Speed per inter-window leg; length = windows - 1.
    pub speeds: Vec<f64>,
    /// Aisle thresholds (tau1, tau2); present in thresholds mode.
    pub tau: Option<(f64, f64)>,
}

impl PcmclParams {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.xy.len() * 3 + 1);
        for &(x, y) in &self.xy {
            v.push(x);
            v.push(y);
        }
        v.extend_from_slice(&self.speeds);
        if let Some((t1, t2)) = self.tau {
            v.push(t1);
            v.push(t2 - t1); // ordering transform: tau2 = tau1 + delta, delta >= 0
        }
        v
    }

    pub fn from_flat(flat: &[f64], n_windows: usize, thresholds: bool) -> Result<Self> {
        let want = if thresholds { 3 * n_windows + 1 } else { 3 * n_windows - 1 };
        if flat.len() != want {
            return Err(Error::InvalidArgument(format!(
                "expected {want} parameters for {n_windows} windows, got {}",
                flat.len()
            )));
        }
        let xy = (0..n_windows).map(|i| (flat[2 * i], flat[2 * i + 1])).collect();
        let speeds = flat[2 * n_windows..3 * n_windows - 1].to_vec();
        let tau = thresholds.then(|| {
            let t1 = flat[3 * n_windows - 1];
            (t1, t1 + flat[3 * n_windows])
        });
        Ok(PcmclParams { xy, speeds, tau })
    }
}

struct WindowData {
    n_sent: u32,
    counts: Vec<u32>,
    ln_choose: Vec<f64>,
}

/// The unnormalized log posterior, precomputed for fast coordinate updates.
pub struct PcmclPosterior {
    n_windows: usize,
    width: f64,
    length: f64,
    s_max: f64,
    delta_s: f64,
    freq: f64,
    power: f64,
    mode: StackMode,
    beacon_pos: Vec<(f64, f64)>,
    /// stacks_for[aisle][beacon index]
    stacks_for: Vec<Vec<usize>>,
    coeffs: Vec<QuadraticCoefficients>,
    windows: Vec<WindowData>,
}

impl PcmclPosterior {
    pub fn new(
        windows: &[WindowedCounts],
        layout: &LayoutSpec,
        model: &ReceptionModel,
        radio: &RadioConfig,
        config: &LocalizerConfig,
    ) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::InvalidArgument("no windows".into()));
        }
        config.validate()?;
        model.validate()?;
        layout.validate()?;
        if config.stack_mode == StackMode::Thresholds && layout.num_aisles != 3 {
            return Err(Error::Layout(format!(
                "thresholds mode supports exactly 3 aisles, layout has {}; use dirichlet mode",
                layout.num_aisles
            )));
        }
        let beacon_pos: Vec<(f64, f64)> = layout.beacons.iter().map(|b| (b.x, b.y)).collect();
        let mut stacks_for = Vec::with_capacity(layout.num_aisles);
        for aisle in 0..layout.num_aisles {
            let row: Result<Vec<usize>> =
                layout.beacons.iter().map(|b| layout.stacks_between(aisle, b.id)).collect();
            stacks_for.push(row?);
        }
        let win_data: Vec<WindowData> = windows
            .iter()
            .map(|w| {
                let counts: Vec<u32> =
                    layout.beacons.iter().map(|b| w.count(b.id).min(w.n_sent)).collect();
                let ln_choose = counts
                    .iter()
                    .map(|&c| {
                        use statrs::function::factorial::ln_factorial;
                        ln_factorial(w.n_sent as u64)
                            - ln_factorial(c as u64)
                            - ln_factorial((w.n_sent - c) as u64)
                    })
                    .collect();
                WindowData { n_sent: w.n_sent, counts, ln_choose }
            })
            .collect();
        Ok(PcmclPosterior {
            n_windows: windows.len(),
            width: layout.width_m,
            length: layout.length_m,
            s_max: config.s_max,
            delta_s: config.delta_s,
            freq: radio.freq_hz,
            power: radio.power_db,
            mode: config.stack_mode,
            beacon_pos,
            stacks_for,
            coeffs: model.per_stacks.clone(),
            windows: win_data,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    fn thresholds(&self) -> bool {
        self.mode == StackMode::Thresholds
    }

    #[inline]
    fn s_idx(&self, j: usize) -> usize {
        2 * self.n_windows + j
    }

    #[inline]
    fn tau_of(&self, theta: &[f64]) -> (f64, f64) {
        let t1 = theta[3 * self.n_windows - 1];
        (t1, t1 + theta[3 * self.n_windows])
    }

    #[inline]
    fn sigma(&self, theta: &[f64], leg: usize) -> f64 {
        (theta[self.s_idx(leg)] * self.delta_s).max(SIGMA_FLOOR_M)
    }

    #[inline]
    fn move_lp(diff: f64, sigma: f64) -> f64 {
        -0.5 * (diff / sigma).powi(2) - sigma.ln() - LN_SQRT_2PI
    }

    fn aisle_of(&self, theta: &[f64], win: usize) -> usize {
        let y = theta[2 * win + 1];
        let (t1, t2) = self.tau_of(theta);
        // support enforcement keeps t1 <= t2
        if y < t1 {
            0
        } else if y <= t2 {
            1
        } else {
            2
        }
    }

    /// Observation log likelihood of one window at a candidate position.
    pub fn obs_loglik(&self, win: usize, x: f64, y: f64, aisle: usize) -> f64 {
        let w = &self.windows[win];
        let n = w.n_sent;
        let mut total = 0.0;
        match self.mode {
            StackMode::Thresholds => {
                let stacks = &self.stacks_for[aisle];
                for (k, &(bx, by)) in self.beacon_pos.iter().enumerate() {
                    let d = ((x - bx).powi(2) + (y - by).powi(2)).sqrt();
                    let c = w.counts[k];
                    let q = log_reception_unchecked(d, self.freq, self.power, &self.coeffs[stacks[k]]);
                    let p = clamp_prob(q.exp());
                    total += w.ln_choose[k]
                        + c as f64 * p.ln()
                        + (n - c) as f64 * (1.0 - p).ln();
                }
            }
            StackMode::Dirichlet => {
                // stack count marginalized: equal-weight mixture over the
                // per-stack models (the Dirichlet latent integrates out)
                let n_models = self.coeffs.len() as f64;
                for (k, &(bx, by)) in self.beacon_pos.iter().enumerate() {
                    let d = ((x - bx).powi(2) + (y - by).powi(2)).sqrt();
                    let c = w.counts[k];
                    let mut terms = [f64::NEG_INFINITY; 8];
                    for (s, coeffs) in self.coeffs.iter().enumerate() {
                        let p = clamp_prob(
                            log_reception_unchecked(d, self.freq, self.power, coeffs).exp(),
                        );
                        terms[s] = c as f64 * p.ln() + (n - c) as f64 * (1.0 - p).ln();
                    }
                    let m = terms[..self.coeffs.len()]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + terms[..self.coeffs.len()]
                        .iter()
                        .map(|t| (t - m).exp())
                        .sum::<f64>()
                        .ln();
                    total += w.ln_choose[k] + lse - n_models.ln();
                }
            }
        }
        total
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        let n = self.n_windows;
        for i in 0..n {
            let (x, y) = (theta[2 * i], theta[2 * i + 1]);
            if !(0.0..=self.width).contains(&x) || !(0.0..=self.length).contains(&y) {
                return false;
            }
        }
        for j in 0..n.saturating_sub(1) {
            let s = theta[self.s_idx(j)];
            if !(0.0..=self.s_max).contains(&s) {
                return false;
            }
        }
        if self.thresholds() {
            let t1 = theta[3 * n - 1];
            let td = theta[3 * n];
            if t1 < 0.0 || td < 0.0 || t1 + td > self.length {
                return false;
            }
        }
        true
    }
}

impl Target for PcmclPosterior {
    fn dim(&self) -> usize {
        if self.thresholds() {
            3 * self.n_windows + 1
        } else {
            3 * self.n_windows - 1
        }
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        if !self.in_support(theta) {
            return f64::NEG_INFINITY;
        }
        let n = self.n_windows;
        let mut lp = 0.0;
        for i in 0..n {
            let aisle = if self.thresholds() { self.aisle_of(theta, i) } else { 0 };
            lp += self.obs_loglik(i, theta[2 * i], theta[2 * i + 1], aisle);
        }
        for i in 1..n {
            let sigma = self.sigma(theta, i - 1);
            lp += Self::move_lp(theta[2 * i] - theta[2 * i - 2], sigma);
            lp += Self::move_lp(theta[2 * i + 1] - theta[2 * i - 1], sigma);
        }
        lp
    }
}

enum Pending {
    None,
    Rejectable,
    Pos { win: usize, obs: f64, mv: [(usize, f64, bool); 2], n_mv: usize },
    Speed { leg: usize, mx: f64, my: f64 },
    Tau { obs: Vec<(usize, f64)> },
}

pub struct PcmclCache {
    obs: Vec<f64>,
    /// move_x[i] / move_y[i]: increment density into window i (i >= 1).
    move_x: Vec<f64>,
    move_y: Vec<f64>,
    pending: Pending,
}

impl CoordTarget for PcmclPosterior {
    type Cache = PcmclCache;

    fn init_cache(&self, theta: &[f64]) -> PcmclCache {
        let n = self.n_windows;
        let mut obs = Vec::with_capacity(n);
        for i in 0..n {
            let aisle = if self.thresholds() { self.aisle_of(theta, i) } else { 0 };
            obs.push(self.obs_loglik(i, theta[2 * i], theta[2 * i + 1], aisle));
        }
        let mut move_x = vec![0.0; n];
        let mut move_y = vec![0.0; n];
        for i in 1..n {
            let sigma = self.sigma(theta, i - 1);
            move_x[i] = Self::move_lp(theta[2 * i] - theta[2 * i - 2], sigma);
            move_y[i] = Self::move_lp(theta[2 * i + 1] - theta[2 * i - 1], sigma);
        }
        PcmclCache { obs, move_x, move_y, pending: Pending::None }
    }

    fn propose(&self, cache: &mut PcmclCache, theta: &[f64], idx: usize, value: f64) -> f64 {
        let n = self.n_windows;
        cache.pending = Pending::Rejectable;
        if idx < 2 * n {
            let win = idx / 2;
            let is_x = idx % 2 == 0;
            let bound = if is_x { self.width } else { self.length };
            if !(0.0..=bound).contains(&value) {
                return f64::NEG_INFINITY;
            }
            let (x, y) = if is_x {
                (value, theta[2 * win + 1])
            } else {
                (theta[2 * win], value)
            };
            let aisle = if self.thresholds() {
                let (t1, t2) = self.tau_of(theta);
                aisle_index(y, t1, t2).unwrap_or(0)
            } else {
                0
            };
            let obs_new = self.obs_loglik(win, x, y, aisle);
            let mut delta = obs_new - cache.obs[win];
            let mut mv = [(0usize, 0.0f64, true); 2];
            let mut n_mv = 0;
            if win > 0 {
                let sigma = self.sigma(theta, win - 1);
                let prev = theta[2 * (win - 1) + if is_x { 0 } else { 1 }];
                let lp = Self::move_lp(value - prev, sigma);
                let old = if is_x { cache.move_x[win] } else { cache.move_y[win] };
                delta += lp - old;
                mv[n_mv] = (win, lp, is_x);
                n_mv += 1;
            }
            if win + 1 < n {
                let sigma = self.sigma(theta, win);
                let next = theta[2 * (win + 1) + if is_x { 0 } else { 1 }];
                let lp = Self::move_lp(next - value, sigma);
                let old = if is_x { cache.move_x[win + 1] } else { cache.move_y[win + 1] };
                delta += lp - old;
                mv[n_mv] = (win + 1, lp, is_x);
                n_mv += 1;
            }
            cache.pending = Pending::Pos { win, obs: obs_new, mv, n_mv };
            delta
        } else if idx < 3 * n - 1 {
            let leg = idx - 2 * n;
            if !(0.0..=self.s_max).contains(&value) {
                return f64::NEG_INFINITY;
            }
            let sigma = (value * self.delta_s).max(SIGMA_FLOOR_M);
            let i = leg + 1;
            let mx = Self::move_lp(theta[2 * i] - theta[2 * i - 2], sigma);
            let my = Self::move_lp(theta[2 * i + 1] - theta[2 * i - 1], sigma);
            let delta = mx - cache.move_x[i] + my - cache.move_y[i];
            cache.pending = Pending::Speed { leg, mx, my };
            delta
        } else {
            // tau1 or tau_delta
            let (t1_new, td_new) = if idx == 3 * n - 1 {
                (value, theta[3 * n])
            } else {
                (theta[3 * n - 1], value)
            };
            if t1_new < 0.0 || td_new < 0.0 || t1_new + td_new > self.length {
                return f64::NEG_INFINITY;
            }
            let t2_new = t1_new + td_new;
            let mut delta = 0.0;
            let mut obs = Vec::new();
            for i in 0..n {
                let old_aisle = self.aisle_of(theta, i);
                let y = theta[2 * i + 1];
                let new_aisle = aisle_index(y, t1_new, t2_new).unwrap_or(0);
                if new_aisle != old_aisle {
                    let lp = self.obs_loglik(i, theta[2 * i], y, new_aisle);
                    delta += lp - cache.obs[i];
                    obs.push((i, lp));
                }
            }
            cache.pending = Pending::Tau { obs };
            delta
        }
    }

    fn accept(&self, cache: &mut PcmclCache, _theta: &[f64], _idx: usize, _value: f64) {
        match std::mem::replace(&mut cache.pending, Pending::None) {
            Pending::Pos { win, obs, mv, n_mv } => {
                cache.obs[win] = obs;
                for &(i, lp, is_x) in mv.iter().take(n_mv) {
                    if is_x {
                        cache.move_x[i] = lp;
                    } else {
                        cache.move_y[i] = lp;
                    }
                }
            }
            Pending::Speed { leg, mx, my } => {
                cache.move_x[leg + 1] = mx;
                cache.move_y[leg + 1] = my;
            }
            Pending::Tau { obs } => {
                for (i, lp) in obs {
                    cache.obs[i] = lp;
                }
            }
            Pending::None | Pending::Rejectable => {}
        }
    }
}

/// Evaluate the PC-MCL log posterior at a parameter point.
pub fn pcmcl_log_posterior(
    params: &PcmclParams,
    windows: &[WindowedCounts],
    layout: &LayoutSpec,
    model: &ReceptionModel,
    radio: &RadioConfig,
    config: &LocalizerConfig,
) -> Result<f64> {
    let post = PcmclPosterior::new(windows, layout, model, radio, config)?;
    let flat = params.to_flat();
    if flat.len() != post.dim() {
        return Err(Error::InvalidArgument(format!(
            "parameter vector has {} coordinates, posterior needs {}",
            flat.len(),
            post.dim()
        )));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite parameter".into()));
    }
    Ok(post.log_density(&flat))
}

/// Localize a trace: window the counts, run the sampler on the trajectory
/// posterior, report posterior means with 95% credible intervals.
pub fn pcmcl_localize(
    trace: &PacketTrace,
    layout: &LayoutSpec,
    model: &ReceptionModel,
    radio: &RadioConfig,
    config: &LocalizerConfig,
) -> Result<TrajectoryEstimate> {
    config.validate()?;
    let eff_radio = RadioConfig::new(radio.freq_hz, radio.power_db, config.delta_s)?;
    let windows = crate::trace::window_counts(trace, &eff_radio)?;
    if windows.is_empty() {
        return Err(Error::InvalidArgument("trace does not span a full window".into()));
    }
    let post = PcmclPosterior::new(&windows, layout, model, &eff_radio, config)?;
    let uninformative = windows.iter().all(|w| w.counts.values().all(|&c| c == 0));

    let init = initial_point(&post, layout, config)?;
    let names = param_names(&post);
    let mcmc_config = McmcConfig {
        seed: mcmc::split_seed_label(config.mcmc.seed, "pcmcl"),
        ..config.mcmc.clone()
    };
    let samples = mcmc::mcmc_sample(&post, &init, &mcmc_config, names)?;

    let n = post.n_windows();
    let delta_ms = (config.delta_s * 1000.0) as i64;
    let mut out = Vec::with_capacity(n);
    for (i, w) in windows.iter().enumerate() {
        let mut flags = Vec::new();
        if uninformative {
            flags.push("uninformative".to_string());
        }
        out.push(WindowEstimate {
            window: i,
            t_center_s: (w.t_start_ms + delta_ms / 2) as f64 / 1000.0,
            x_hat: samples.mean(2 * i),
            y_hat: samples.mean(2 * i + 1),
            x_lo: samples.quantile(2 * i, 0.025),
            x_hi: samples.quantile(2 * i, 0.975),
            y_lo: samples.quantile(2 * i + 1, 0.025),
            y_hi: samples.quantile(2 * i + 1, 0.975),
            flags,
        });
    }
    Ok(TrajectoryEstimate { windows: out })
}

fn param_names(post: &PcmclPosterior) -> Vec<String> {
    let n = post.n_windows();
    let mut names = Vec::with_capacity(post.dim());
    for i in 0..n {
        names.push(format!("x{i}"));
        names.push(format!("y{i}"));
    }
    for j in 0..n - 1 {
        names.push(format!("s{j}"));
    }
    if post.thresholds() {
        names.push("tau1".into());
        names.push("tau_delta".into());
    }
    names
}

/// Deterministic starting point: per-window grid argmax of the observation
/// likelihood over x steps and aisle-center y values, thresholds at the
/// stack-band midpoints, speeds from consecutive initial positions.
fn initial_point(
    post: &PcmclPosterior,
    layout: &LayoutSpec,
    config: &LocalizerConfig,
) -> Result<Vec<f64>> {
    let bands = layout.aisle_bands();
    let centers: Vec<f64> = bands.iter().map(|&(lo, hi)| (lo + hi) / 2.0).collect();
    let n = post.n_windows();
    let mut xy = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = (f64::NEG_INFINITY, centers.first().copied().unwrap_or(0.0), 0usize);
        let steps = (layout.width_m / 0.25).ceil() as usize;
        for (band, &yc) in centers.iter().enumerate() {
            let aisle = if post.thresholds() { band } else { 0 };
            for sx in 0..=steps {
                let x = (sx as f64 * 0.25).min(layout.width_m);
                let lp = post.obs_loglik(i, x, yc, aisle);
                if lp > best.0 {
                    best = (lp, x, band);
                }
            }
        }
        xy.push((best.1, centers[best.2]));
    }
    let speeds: Vec<f64> = (0..n.saturating_sub(1))
        .map(|j| {
            let (x0, y0) = xy[j];
            let (x1, y1) = xy[j + 1];
            let d = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            (d / config.delta_s).clamp(0.0, config.s_max)
        })
        .collect();
    let tau = if post.thresholds() {
        if bands.len() != 3 {
            return Err(Error::Layout("thresholds mode needs 3 aisle bands".into()));
        }
        let t1 = (bands[0].1 + bands[1].0) / 2.0;
        let t2 = (bands[1].1 + bands[2].0) / 2.0;
        Some((t1, t2))
    } else {
        None
    };
    Ok(PcmclParams { xy, speeds, tau }.to_flat())
}
