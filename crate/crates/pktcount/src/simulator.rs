//! Ground-truth trajectory generation (modified random waypoint with fixed
//! destinations) and synthetic packet-trace simulation from a reception model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::mcmc::split_seed_label;
use crate::model::{RadioConfig, ReceptionModel};
use crate::trace::{PacketEvent, PacketTrace};

/// Waypoint walk: destinations fixed in advance, speed drawn per leg, pause
/// drawn per stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementScript {
    pub waypoints: Vec<(f64, f64)>,
    pub pause_s: (f64, f64),
    pub speed_mps: (f64, f64),
    pub dt_s: f64,
}

impl MovementScript {
    /// Nine-stop walk over the demo layout: down aisle 0, around the end
    /// corridor into aisle 1, back, and around into aisle 2.
    pub fn demo_walk() -> Self {
        MovementScript {
            waypoints: vec![
                (2.0, 0.35),
                (7.0, 0.35),
                (12.0, 0.35),
                (13.25, 0.95), // end corridor, turning
                (12.0, 1.55),
                (7.0, 1.55),
                (2.0, 1.55),
                (0.75, 2.15), // opposite corridor
                (2.0, 2.75),
                (7.0, 2.75),
                (12.0, 2.75),
            ],
            pause_s: (8.0, 10.0),
            speed_mps: (0.5, 1.5),
            dt_s: 0.1,
        }
    }

    pub fn validate(&self, layout: &LayoutSpec) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::InvalidArgument("script needs at least one waypoint".into()));
        }
        if !(self.speed_mps.0 > 0.0 && self.speed_mps.1 >= self.speed_mps.0) {
            return Err(Error::InvalidArgument("speed range invalid".into()));
        }
        if !(self.dt_s > 0.0) {
            return Err(Error::InvalidArgument("dt_s must be > 0".into()));
        }
        for &(x, y) in &self.waypoints {
            if !layout.in_free_space(x, y) {
                return Err(Error::InvalidArgument(format!(
                    "waypoint ({x}, {y}) outside free space"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub t_s: f64,
    pub x: f64,
    pub y: f64,
    pub aisle: usize,
    pub corridor: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub samples: Vec<TruthSample>,
}

impl GroundTruth {
    pub fn duration_s(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t_s)
    }

    /// Position at time t by linear interpolation between samples.
    pub fn position_at(&self, t_s: f64) -> Result<(f64, f64)> {
        let first = self.samples.first().ok_or_else(|| {
            Error::InvalidArgument("empty ground truth".into())
        })?;
        let last = self.samples.last().unwrap();
        if t_s < first.t_s - 1e-9 || t_s > last.t_s + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "t = {t_s} outside truth range [{}, {}]",
                first.t_s, last.t_s
            )));
        }
        let idx = self
            .samples
            .partition_point(|s| s.t_s <= t_s)
            .min(self.samples.len() - 1);
        if idx == 0 {
            return Ok((first.x, first.y));
        }
        let (a, b) = (&self.samples[idx - 1], &self.samples[idx]);
        let span = b.t_s - a.t_s;
        let w = if span > 0.0 { ((t_s - a.t_s) / span).clamp(0.0, 1.0) } else { 0.0 };
        Ok((a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)))
    }

    /// Sample nearest to time t.
    pub fn sample_at(&self, t_s: f64) -> Option<&TruthSample> {
        if self.samples.is_empty() {
            return None;
        }
        let idx = self.samples.partition_point(|s| s.t_s < t_s);
        let candidates = [idx.checked_sub(1), Some(idx.min(self.samples.len() - 1))];
        candidates
            .iter()
            .flatten()
            .map(|&i| &self.samples[i])
            .min_by(|a, b| (a.t_s - t_s).abs().partial_cmp(&(b.t_s - t_s).abs()).unwrap())
    }

    pub fn to_csv_file(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t_s,x_m,y_m,aisle,corridor_flag\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{:.3},{:.6},{:.6},{},{}\n",
                s.t_s,
                s.x,
                s.y,
                s.aisle,
                s.corridor as u8
            ));
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut samples = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Malformed { line, msg: format!("bad field {j}") })
            };
            samples.push(TruthSample {
                t_s: parse(0)?,
                x: parse(1)?,
                y: parse(2)?,
                aisle: parse(3)? as usize,
                corridor: parse(4)? != 0.0,
            });
        }
        Ok(GroundTruth { samples })
    }
}

/// Walk the scripted waypoints: straight constant-speed legs, uniform speed
/// per leg, uniform pause per stop, sampled every dt_s.
pub fn gen_trajectory(
    script: &MovementScript,
    layout: &LayoutSpec,
    seed: u64,
) -> Result<GroundTruth> {
    script.validate(layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed_label(seed, "trajectory"));

    // piecewise description: (start_t, duration, from, to)
    struct Leg {
        t0: f64,
        dur: f64,
        from: (f64, f64),
        to: (f64, f64),
    }
    let mut legs: Vec<Leg> = Vec::new();
    let mut t = 0.0;
    let mut pos = script.waypoints[0];
    for (i, &wp) in script.waypoints.iter().enumerate() {
        if i > 0 {
            let dist = ((wp.0 - pos.0).powi(2) + (wp.1 - pos.1).powi(2)).sqrt();
            let speed = rng.gen_range(script.speed_mps.0..=script.speed_mps.1);
            let dur = dist / speed;
            legs.push(Leg { t0: t, dur, from: pos, to: wp });
            t += dur;
            pos = wp;
        }
        let pause = rng.gen_range(script.pause_s.0..=script.pause_s.1);
        legs.push(Leg { t0: t, dur: pause, from: pos, to: pos });
        t += pause;
    }
    let total = t;

    let n = (total / script.dt_s).floor() as usize + 1;
    let mut samples = Vec::with_capacity(n);
    let mut leg_idx = 0;
    for k in 0..n {
        let tk = k as f64 * script.dt_s;
        while leg_idx + 1 < legs.len() && tk >= legs[leg_idx].t0 + legs[leg_idx].dur {
            leg_idx += 1;
        }
        let leg = &legs[leg_idx];
        let w = if leg.dur > 0.0 { ((tk - leg.t0) / leg.dur).clamp(0.0, 1.0) } else { 0.0 };
        let x = leg.from.0 + w * (leg.to.0 - leg.from.0);
        let y = leg.from.1 + w * (leg.to.1 - leg.from.1);
        let (aisle, corridor) = layout.locate(x, y);
        samples.push(TruthSample { t_s: tk, x, y, aisle, corridor });
    }
    Ok(GroundTruth { samples })
}

/// Exact binomial draw as the sum of n Bernoulli trials.
pub fn binomial_draw<R: Rng>(n: u32, p: f64, rng: &mut R) -> Result<u32> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p must be in [0,1], got {p}")));
    }
    let mut c = 0;
    for _ in 0..n {
        if rng.gen::<f64>() < p {
            c += 1;
        }
    }
    Ok(c)
}

/// Per-event Bernoulli simulation of the packet trace. Each beacon advertises
/// at period 1/f with a uniformly drawn phase; each packet is received with
/// the reception probability at the receiver's position when it is sent.
/// Beacon streams use independently split seeds and merge deterministically.
pub fn simulate_trace(
    truth: &GroundTruth,
    layout: &LayoutSpec,
    model: &ReceptionModel,
    config: &RadioConfig,
    seed: u64,
) -> Result<PacketTrace> {
    model.validate()?;
    layout.validate()?;
    if truth.samples.is_empty() {
        return Err(Error::InvalidArgument("empty ground truth".into()));
    }
    for e in &layout.stack_map {
        if e.stacks > model.max_stacks {
            return Err(Error::InvalidArgument(format!(
                "layout needs a {}-stack model, model has max_stacks = {}",
                e.stacks, model.max_stacks
            )));
        }
    }
    let duration = truth.duration_s();
    let period = 1.0 / config.freq_hz;

    let mut events: Vec<PacketEvent> = Vec::new();
    for beacon in &layout.beacons {
        let mut rng =
            ChaCha8Rng::seed_from_u64(split_seed_label(seed, &format!("beacon-{}", beacon.id)));
        let phase = rng.gen::<f64>() * period;
        let mut t = phase;
        while t <= duration {
            let sample = truth.sample_at(t).unwrap();
            let stacks = layout.stacks_between(sample.aisle, beacon.id)?;
            let (x, y) = truth.position_at(t)?;
            let d = ((x - beacon.x).powi(2) + (y - beacon.y).powi(2)).sqrt();
            let p = crate::model::reception_prob(model, stacks, d, config.freq_hz, config.power_db)?;
            if rng.gen::<f64>() < p {
                events.push(PacketEvent { beacon_id: beacon.id, t_ms: (t * 1000.0).round() as i64 });
            }
            t += period;
        }
    }
    events.sort_by_key(|e| (e.t_ms, e.beacon_id));
    PacketTrace::new(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{QuadraticCoefficients, PROB_EPS};

    fn saturating_model() -> ReceptionModel {
        // b0 = 0 => p clamps to 1 - eps
        ReceptionModel::new(vec![QuadraticCoefficients::default(); 3]).unwrap()
    }

    fn blocking_model() -> ReceptionModel {
        ReceptionModel::new(vec![
            QuadraticCoefficients { b0: -1000.0, ..Default::default() };
            3
        ])
        .unwrap()
    }

    #[test]
    fn two_waypoints_fixed_speed_kinematics() {
        let layout = LayoutSpec::demo_three_stack();
        let script = MovementScript {
            waypoints: vec![(2.0, 0.35), (12.0, 0.35)],
            pause_s: (0.0, 0.0),
            speed_mps: (1.0, 1.0),
            dt_s: 0.1,
        };
        let truth = gen_trajectory(&script, &layout, 1).unwrap();
        assert_eq!(truth.samples.len(), 101);
        assert!((truth.duration_s() - 10.0).abs() < 1e-9);
        let last = truth.samples.last().unwrap();
        assert!((last.x - 12.0).abs() < 1e-9);
    }

    #[test]
    fn single_waypoint_stationary() {
        let layout = LayoutSpec::demo_three_stack();
        let script = MovementScript {
            waypoints: vec![(5.0, 1.55)],
            pause_s: (8.0, 10.0),
            speed_mps: (1.0, 1.0),
            dt_s: 0.1,
        };
        let truth = gen_trajectory(&script, &layout, 2).unwrap();
        assert!(truth.duration_s() >= 8.0 && truth.duration_s() <= 10.0);
        assert!(truth.samples.iter().all(|s| s.x == 5.0 && s.y == 1.55));
    }

    #[test]
    fn waypoint_inside_stack_rejected() {
        let layout = LayoutSpec::demo_three_stack();
        let script = MovementScript {
            waypoints: vec![(5.0, 0.9)],
            pause_s: (0.0, 1.0),
            speed_mps: (1.0, 1.0),
            dt_s: 0.1,
        };
        assert!(gen_trajectory(&script, &layout, 1).is_err());
    }

    #[test]
    fn demo_walk_stays_in_free_space() {
        let layout = LayoutSpec::demo_three_stack();
        let truth = gen_trajectory(&MovementScript::demo_walk(), &layout, 7).unwrap();
        for s in &truth.samples {
            assert!(layout.in_free_space(s.x, s.y), "({}, {}) inside a stack", s.x, s.y);
        }
        // displacement bounded by speed_max * dt
        for w in truth.samples.windows(2) {
            let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
            assert!(d <= 1.5 * 0.1 + 1e-9);
        }
    }

    #[test]
    fn trajectory_deterministic() {
        let layout = LayoutSpec::demo_three_stack();
        let a = gen_trajectory(&MovementScript::demo_walk(), &layout, 7).unwrap();
        let b = gen_trajectory(&MovementScript::demo_walk(), &layout, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn saturating_model_receives_everything() {
        let layout = LayoutSpec::demo_three_stack();
        let script = MovementScript {
            waypoints: vec![(5.0, 1.55)],
            pause_s: (10.0, 10.0),
            speed_mps: (1.0, 1.0),
            dt_s: 0.1,
        };
        let truth = gen_trajectory(&script, &layout, 3).unwrap();
        let cfg = RadioConfig::new(1.0, 0.0, 10.0).unwrap();
        let trace = simulate_trace(&truth, &layout, &saturating_model(), &cfg, 3).unwrap();
        let t = truth.duration_s();
        let expected = layout.beacons.len() as f64 * (t * 1.0).floor();
        let got = trace.events.len() as f64;
        assert!(
            (got - expected).abs() <= layout.beacons.len() as f64,
            "got {got}, expected about {expected}"
        );
    }

    #[test]
    fn blocking_model_yields_empty_trace() {
        let layout = LayoutSpec::demo_three_stack();
        let script = MovementScript {
            waypoints: vec![(5.0, 1.55)],
            pause_s: (10.0, 10.0),
            speed_mps: (1.0, 1.0),
            dt_s: 0.1,
        };
        let truth = gen_trajectory(&script, &layout, 3).unwrap();
        let cfg = RadioConfig::new(10.0, 0.0, 10.0).unwrap();
        let trace = simulate_trace(&truth, &layout, &blocking_model(), &cfg, 3).unwrap();
        assert!(trace.events.is_empty());
        let _ = PROB_EPS;
    }

    #[test]
    fn stationary_received_fraction_matches_model() {
        // receiver 2 m from a beacon, f = 10 Hz, r = 0
        let layout = LayoutSpec::demo_three_stack();
        let model = ReceptionModel::demo();
        let beacon = layout.beacons[5];
        let pos = (beacon.x - 2.0, 0.35); // same aisle, 2 m along x
        let script = MovementScript {
            waypoints: vec![pos],
            pause_s: (1000.0, 1000.0),
            speed_mps: (1.0, 1.0),
            dt_s: 0.5,
        };
        let truth = gen_trajectory(&script, &layout, 11).unwrap();
        let cfg = RadioConfig::new(10.0, 0.0, 10.0).unwrap();
        let trace = simulate_trace(&truth, &layout, &model, &cfg, 11).unwrap();
        let n_events = 10_000.0; // 1000 s at 10 Hz
        let c = trace.events.iter().filter(|e| e.beacon_id == beacon.id).count() as f64;
        let p = crate::model::reception_prob(&model, 0, 2.0, 10.0, 0.0).unwrap();
        let sigma = (n_events * p * (1.0 - p)).sqrt();
        assert!((c - n_events * p).abs() < 3.0 * sigma, "c = {c}, expected {}", n_events * p);
    }

    #[test]
    fn trace_deterministic_and_sorted() {
        let layout = LayoutSpec::demo_three_stack();
        let truth = gen_trajectory(&MovementScript::demo_walk(), &layout, 5).unwrap();
        let cfg = RadioConfig::new(2.0, -3.0, 10.0).unwrap();
        let a = simulate_trace(&truth, &layout, &ReceptionModel::demo(), &cfg, 5).unwrap();
        let b = simulate_trace(&truth, &layout, &ReceptionModel::demo(), &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.events.windows(2).all(|w| w[0].t_ms <= w[1].t_ms));
        assert!(a.events.iter().all(|e| layout.beacon(e.beacon_id).is_ok()));
        assert!(!a.events.is_empty());
    }

    #[test]
    fn binomial_draw_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(binomial_draw(100, 0.0, &mut rng).unwrap(), 0);
        assert_eq!(binomial_draw(100, 1.0, &mut rng).unwrap(), 100);
        assert!(binomial_draw(10, 1.5, &mut rng).is_err());

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            binomial_draw(1000, 0.3, &mut r1).unwrap(),
            binomial_draw(1000, 0.3, &mut r2).unwrap()
        );
    }

    #[test]
    fn binomial_draw_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000u32;
        let p = 0.3;
        let reps = 100;
        let mean: f64 = (0..reps)
            .map(|_| binomial_draw(n, p, &mut rng).unwrap() as f64)
            .sum::<f64>()
            / reps as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt() / (reps as f64).sqrt();
        assert!((mean - 30_000.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn truth_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let layout = LayoutSpec::demo_three_stack();
        let truth = gen_trajectory(&MovementScript::demo_walk(), &layout, 5).unwrap();
        truth.to_csv_file(&path).unwrap();
        let back = GroundTruth::from_csv_file(&path).unwrap();
        assert_eq!(back.samples.len(), truth.samples.len());
        for (a, b) in truth.samples.iter().zip(&back.samples) {
            assert!((a.x - b.x).abs() < 1e-5 && (a.y - b.y).abs() < 1e-5);
            assert_eq!(a.aisle, b.aisle);
            assert_eq!(a.corridor, b.corridor);
        }
    }
}
