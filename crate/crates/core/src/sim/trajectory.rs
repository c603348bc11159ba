use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::env_spec::EnvironmentSpec;
use super::geometry::Point;
use super::lidar::cast_rays;
use super::occupancy::OccupancyTracker;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,x,y,heading,v,omega,reward,done";

/// One recorded step. Row 0 is the reset pose with a zero action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub omega: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn push(&mut self, row: TrajectoryRow) {
        self.rows.push(row);
    }

    /// Floats use the shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step, r.x, r.y, r.heading, r.v, r.omega, r.reward, r.done as u8
            );
        }
        s
    }

    pub fn from_csv(src: &str) -> Result<Self> {
        let mut lines = src.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Format("trajectory: missing header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |m: String| Error::Parse {
                file: "trajectory".into(),
                line: i + 2,
                msg: m,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("expected 8 fields, got {}", f.len())));
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|e| bad(format!("field {k}: {e}")));
            rows.push(TrajectoryRow {
                step: f[0].trim().parse().map_err(|e| bad(format!("step: {e}")))?,
                x: num(1)?,
                y: num(2)?,
                heading: num(3)?,
                v: num(4)?,
                omega: num(5)?,
                reward: num(6)?,
                done: match f[7].trim() {
                    "0" => false,
                    "1" => true,
                    o => return Err(bad(format!("done: expected 0/1, got `{o}`"))),
                },
            });
        }
        Ok(Self { rows })
    }

    /// Distance traveled, summed over consecutive recorded positions.
    pub fn path_length(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
            .sum()
    }

    /// Re-derives explored area by re-scanning from every recorded pose.
    /// Exact for maps without moving obstacles.
    pub fn explored_area(&self, spec: &EnvironmentSpec) -> f64 {
        let mut tracker = OccupancyTracker::new(spec.width, spec.height);
        for r in &self.rows {
            let p = Point::new(r.x, r.y);
            let scan = cast_rays(p, r.heading, &spec.walls, &[]);
            tracker.update(p, r.heading, &scan);
        }
        tracker.explored_area()
    }
}
