//! Store layout: rectangular space, stack rectangles, beacon placement and the
//! aisle-to-stack-count mapping.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beacon {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackMapEntry {
    pub aisle: usize,
    pub group: usize,
    pub stacks: usize,
}

/// Layout of the space: bounds, stacks, beacons and the deterministic
/// (aisle, group) -> stack-count table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub width_m: f64,
    pub length_m: f64,
    pub stacks: Vec<Rect>,
    pub beacons: Vec<Beacon>,
    pub stack_map: Vec<StackMapEntry>,
    pub num_aisles: usize,
    pub max_stacks: usize,
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_m > 0.0 && self.length_m > 0.0) {
            return Err(Error::Layout("width_m and length_m must be > 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.beacons {
            if !seen.insert(b.id) {
                return Err(Error::Layout(format!("duplicate beacon id {}", b.id)));
            }
            if b.x < 0.0 || b.x > self.width_m || b.y < 0.0 || b.y > self.length_m {
                return Err(Error::Layout(format!("beacon {} outside bounds", b.id)));
            }
        }
        // stack_map must be total over aisles x groups present
        let groups: std::collections::HashSet<usize> =
            self.beacons.iter().map(|b| b.group).collect();
        let table: HashMap<(usize, usize), usize> =
            self.stack_map.iter().map(|e| ((e.aisle, e.group), e.stacks)).collect();
        for aisle in 0..self.num_aisles {
            for &g in &groups {
                match table.get(&(aisle, g)) {
                    None => {
                        return Err(Error::Layout(format!(
                            "stack_map missing entry for aisle {aisle}, group {g}"
                        )))
                    }
                    Some(&s) if s > self.max_stacks => {
                        return Err(Error::Layout(format!(
                            "stack_map entry ({aisle},{g}) = {s} exceeds max_stacks {}",
                            self.max_stacks
                        )))
                    }
                    _ => {}
                }
            }
        }
        if self.aisle_bands().len() != self.num_aisles {
            return Err(Error::Layout(format!(
                "stack geometry yields {} aisle bands, num_aisles says {}",
                self.aisle_bands().len(),
                self.num_aisles
            )));
        }
        Ok(())
    }

    pub fn beacon(&self, id: u32) -> Result<&Beacon> {
        self.beacons.iter().find(|b| b.id == id).ok_or(Error::UnknownBeacon(id))
    }

    /// Stack count between a receiver in `aisle` and the given beacon, via the
    /// beacon's group. Total over valid (aisle, beacon) pairs.
    pub fn stacks_between(&self, aisle: usize, beacon_id: u32) -> Result<usize> {
        if aisle >= self.num_aisles {
            return Err(Error::UnknownAisle { aisle, num_aisles: self.num_aisles });
        }
        let group = self.beacon(beacon_id)?.group;
        self.stack_map
            .iter()
            .find(|e| e.aisle == aisle && e.group == group)
            .map(|e| e.stacks)
            .ok_or_else(|| {
                Error::Layout(format!("stack_map missing entry for aisle {aisle}, group {group}"))
            })
    }

    /// y-intervals of the aisles, bottom to top: the complement of the stack
    /// y-extents within [0, L].
    pub fn aisle_bands(&self) -> Vec<(f64, f64)> {
        let mut ivals: Vec<(f64, f64)> = self.stacks.iter().map(|s| (s.y0, s.y1)).collect();
        ivals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // merge overlapping stack intervals
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for iv in ivals {
            match merged.last_mut() {
                Some(last) if iv.0 <= last.1 => last.1 = last.1.max(iv.1),
                _ => merged.push(iv),
            }
        }
        let mut bands = Vec::new();
        let mut lo = 0.0;
        for (s0, s1) in merged {
            if s0 > lo {
                bands.push((lo, s0));
            }
            lo = lo.max(s1);
        }
        if lo < self.length_m {
            bands.push((lo, self.length_m));
        }
        bands
    }

    /// x-extent spanned by the stacks; positions outside it are corridor.
    pub fn stack_x_extent(&self) -> (f64, f64) {
        let lo = self.stacks.iter().map(|s| s.x0).fold(f64::INFINITY, f64::min);
        let hi = self.stacks.iter().map(|s| s.x1).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, self.width_m)
        }
    }

    /// Locate a position: aisle index (nearest band for corridor positions)
    /// and whether the position is in a corridor / transition region.
    pub fn locate(&self, x: f64, y: f64) -> (usize, bool) {
        let bands = self.aisle_bands();
        let (x_lo, x_hi) = self.stack_x_extent();
        let in_band = bands.iter().position(|&(lo, hi)| y >= lo && y <= hi);
        match in_band {
            Some(a) if x >= x_lo && x <= x_hi => (a, false),
            _ => {
                // nearest band center along y
                let a = bands
                    .iter()
                    .enumerate()
                    .min_by(|(_, b1), (_, b2)| {
                        let c1 = ((b1.0 + b1.1) / 2.0 - y).abs();
                        let c2 = ((b2.0 + b2.1) / 2.0 - y).abs();
                        c1.partial_cmp(&c2).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                (a, true)
            }
        }
    }

    pub fn in_free_space(&self, x: f64, y: f64) -> bool {
        x >= 0.0
            && x <= self.width_m
            && y >= 0.0
            && y <= self.length_m
            && !self.stacks.iter().any(|s| s.contains(x, y))
    }

    /// Three-stack demo layout mirroring the test environment: 11 m stacks,
    /// 0.7 m aisles, 1.5 m corridors at both ends, two rows of 12 beacons per
    /// stack face. Aisle 0 is wall-bounded, so its group has a single row;
    /// groups hold beacon ids 1-12, 13-36 and 37-60.
    pub fn demo_three_stack() -> Self {
        let stack_len = 11.0;
        let corridor = 1.5;
        let aisle_w = 0.7;
        let stack_w = 0.5;
        let x0 = corridor;
        let x1 = corridor + stack_len;
        let width_m = stack_len + 2.0 * corridor;
        let length_m = 3.0 * (aisle_w + stack_w);

        let stacks: Vec<Rect> = (0..3)
            .map(|i| {
                let y0 = aisle_w + i as f64 * (aisle_w + stack_w);
                Rect { x0, y0, x1, y1: y0 + stack_w }
            })
            .collect();

        let beacon_x = |j: usize| x0 + stack_len * (j as f64 + 0.5) / 12.0;
        let mut beacons = Vec::new();
        let mut id = 1;
        // (row y, group): aisle 0 sees stack 0's lower face only.
        let rows = [
            (stacks[0].y0, 0),
            (stacks[0].y1, 1),
            (stacks[1].y0, 1),
            (stacks[1].y1, 2),
            (stacks[2].y0, 2),
        ];
        for &(y, group) in &rows {
            for j in 0..12 {
                beacons.push(Beacon { id, x: beacon_x(j), y, group });
                id += 1;
            }
        }

        let mut stack_map = Vec::new();
        for aisle in 0..3usize {
            for group in 0..3usize {
                let stacks_ct = aisle.abs_diff(group).min(2);
                stack_map.push(StackMapEntry { aisle, group, stacks: stacks_ct });
            }
        }

        let layout = LayoutSpec {
            width_m,
            length_m,
            stacks,
            beacons,
            stack_map,
            num_aisles: 3,
            max_stacks: 2,
        };
        debug_assert!(layout.validate().is_ok());
        layout
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let layout: LayoutSpec = serde_json::from_str(&text)?;
        layout.validate()?;
        Ok(layout)
    }
}
