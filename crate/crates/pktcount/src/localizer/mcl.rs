//! Range-free Monte-Carlo localization baseline: a particle filter that keeps
//! candidates within a nominal radio range of every beacon heard in a window.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::mcmc::split_seed_label;
use crate::model::RadioConfig;
use crate::trace::{window_counts, PacketTrace};

use super::{TrajectoryEstimate, WindowEstimate};

/// Redraw rounds at the nominal range before relaxation kicks in.
const MAX_STRICT_ROUNDS: usize = 50;
/// Range growth factor per round once relaxing.
const RELAX_FACTOR: f64 = 1.1;

/// Range-free MCL. Particles start uniform in free space; each window applies
/// a uniform-disk motion step of radius `v_max * delta` and keeps particles
/// within `d0_m` of every heard beacon. A window whose constraints cannot be
/// met after repeated redraws relaxes the range by 10% per further round and
/// is flagged `relaxed`; a window with no heard beacons is prediction-only.
pub fn mcl_localize(
    trace: &PacketTrace,
    layout: &LayoutSpec,
    radio: &RadioConfig,
    d0_m: f64,
    n_particles: usize,
    v_max: f64,
    seed: u64,
) -> Result<TrajectoryEstimate> {
    if !(d0_m > 0.0) {
        return Err(Error::InvalidArgument("d0_m must be > 0".into()));
    }
    if n_particles == 0 {
        return Err(Error::InvalidArgument("n_particles must be > 0".into()));
    }
    if !(v_max > 0.0) {
        return Err(Error::InvalidArgument("v_max must be > 0".into()));
    }
    layout.validate()?;
    let windows = window_counts(trace, radio)?;
    if windows.is_empty() {
        return Err(Error::InvalidArgument("trace does not span a full window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed_label(seed, "mcl"));
    let step = v_max * radio.window_s;
    let delta_ms = (radio.window_s * 1000.0) as i64;

    let mut particles: Vec<(f64, f64)> = Vec::new();
    let mut out = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let heard: Vec<(f64, f64)> = layout
            .beacons
            .iter()
            .filter(|b| w.count(b.id) >= 1)
            .map(|b| (b.x, b.y))
            .collect();

        let mut d0 = d0_m;
        let mut relaxed = false;
        let mut next: Vec<(f64, f64)> = Vec::with_capacity(n_particles);
        let mut rounds = 0usize;
        while next.len() < n_particles {
            for _ in next.len()..n_particles {
                let (x, y) = if i == 0 {
                    (rng.gen::<f64>() * layout.width_m, rng.gen::<f64>() * layout.length_m)
                } else {
                    let parent = particles[rng.gen_range(0..particles.len())];
                    // uniform over the disk of radius `step`
                    let r = step * rng.gen::<f64>().sqrt();
                    let a = rng.gen::<f64>() * std::f64::consts::TAU;
                    (parent.0 + r * a.cos(), parent.1 + r * a.sin())
                };
                if !layout.in_free_space(x, y) {
                    continue;
                }
                if heard
                    .iter()
                    .all(|&(bx, by)| (x - bx).powi(2) + (y - by).powi(2) <= d0 * d0)
                {
                    next.push((x, y));
                }
            }
            if next.len() < n_particles {
                rounds += 1;
                if rounds >= MAX_STRICT_ROUNDS {
                    d0 *= RELAX_FACTOR;
                    relaxed = true;
                }
            }
        }
        particles = next;

        let n = particles.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(x, y) in &particles {
            sx += x;
            sy += y;
        }
        let mut xs: Vec<f64> = particles.iter().map(|p| p.0).collect();
        let mut ys: Vec<f64> = particles.iter().map(|p| p.1).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        ys.sort_by(|a, b| a.total_cmp(b));
        let q = |v: &[f64], q: f64| {
            let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
            v[rank - 1]
        };
        let mut flags = Vec::new();
        if relaxed {
            flags.push("relaxed".to_string());
        }
        if heard.is_empty() {
            flags.push("prediction_only".to_string());
        }
        out.push(WindowEstimate {
            window: i,
            t_center_s: (w.t_start_ms + delta_ms / 2) as f64 / 1000.0,
            x_hat: sx / n,
            y_hat: sy / n,
            x_lo: q(&xs, 0.025),
            x_hi: q(&xs, 0.975),
            y_lo: q(&ys, 0.025),
            y_hi: q(&ys, 0.975),
            flags,
        });
    }
    Ok(TrajectoryEstimate { windows: out })
}
