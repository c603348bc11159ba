use serde::{Deserialize, Serialize};

use super::geometry::Point;
use super::lidar::{beam_angle, LidarScan};
use super::{CELL_AREA, CELL_SIZE};

/// Coverage grid at [`CELL_SIZE`] resolution over the map bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTracker {
    pub cols: usize,
    pub rows: usize,
    explored: Vec<bool>,
    visits: Vec<u32>,
    explored_count: usize,
}

impl OccupancyTracker {
    pub fn new(width: f64, height: f64) -> Self {
        let cols = (width / CELL_SIZE).ceil() as usize;
        let rows = (height / CELL_SIZE).ceil() as usize;
        Self {
            cols,
            rows,
            explored: vec![false; cols * rows],
            visits: vec![0; cols * rows],
            explored_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.explored.iter_mut().for_each(|e| *e = false);
        self.visits.iter_mut().for_each(|v| *v = 0);
        self.explored_count = 0;
    }

    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        if p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let (c, r) = ((p.x / CELL_SIZE) as usize, (p.y / CELL_SIZE) as usize);
        (c < self.cols && r < self.rows).then_some((c, r))
    }

    pub fn cell_center(c: usize, r: usize) -> Point {
        Point::new((c as f64 + 0.5) * CELL_SIZE, (r as f64 + 0.5) * CELL_SIZE)
    }

    pub fn is_explored(&self, c: usize, r: usize) -> bool {
        self.explored[r * self.cols + c]
    }

    pub fn visits(&self, c: usize, r: usize) -> u32 {
        self.visits[r * self.cols + c]
    }

    pub fn explored_cells(&self) -> usize {
        self.explored_count
    }

    pub fn explored_area(&self) -> f64 {
        self.explored_count as f64 * CELL_AREA
    }

    /// Area of the whole grid in square meters.
    pub fn total_area(&self) -> f64 {
        (self.cols * self.rows) as f64 * CELL_AREA
    }

    /// Counts a robot visit to the cell containing `p`.
    pub fn record_visit(&mut self, p: Point) {
        if let Some((c, r)) = self.cell_of(p) {
            self.visits[r * self.cols + c] += 1;
        }
    }

    fn mark(&mut self, c: usize, r: usize) -> bool {
        let i = r * self.cols + c;
        if self.explored[i] {
            return false;
        }
        self.explored[i] = true;
        self.explored_count += 1;
        true
    }

    /// Marks cells sensed by one beam: the beam is sampled every half cell up
    /// to its range, and each sampled cell counts if its center lies within
    /// the range of the origin. Returns the number of newly marked cells.
    pub fn mark_beam(&mut self, origin: Point, angle: f64, range: f64) -> usize {
        let (dy, dx) = angle.sin_cos();
        let step = CELL_SIZE / 2.0;
        let mut fresh = 0;
        let mut k = 0usize;
        loop {
            let t = k as f64 * step;
            if t > range {
                break;
            }
            let p = Point::new(origin.x + t * dx, origin.y + t * dy);
            if let Some((c, r)) = self.cell_of(p) {
                if Self::cell_center(c, r).dist(origin) <= range && self.mark(c, r) {
                    fresh += 1;
                }
            }
            k += 1;
        }
        fresh
    }

    /// Integrates a full scan taken at `origin`/`heading`; returns the newly explored area.
    pub fn update(&mut self, origin: Point, heading: f64, scan: &LidarScan) -> f64 {
        let fresh: usize = scan
            .ranges
            .iter()
            .enumerate()
            .map(|(i, &r)| self.mark_beam(origin, beam_angle(heading, i), r))
            .sum();
        fresh as f64 * CELL_AREA
    }
}
