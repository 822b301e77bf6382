//! Log-odds occupancy grid.
//!
//! Each scan adds `logit(p_free) - l0` to the cells its rays cross and
//! `logit(p_occ) - l0` to the cells holding a return. Log-odds are stored as
//! fixed-point integers, so adding and then removing a scan restores the grid
//! bit for bit and insertion order never matters (as long as no clamp was hit).
//! Within a scan every cell is updated at most once, and an endpoint takes
//! precedence over a pass-through.

use thiserror::Error;

use crate::geometry::{Point2, Pose2};
use crate::graph::PoseGraph;
use crate::matching::LaserScan;

/// Fixed-point scale of stored log-odds.
const SCALE: f64 = (1u32 << 20) as f64;

/// Rays this close to the maximum range are treated as misses.
pub const RANGE_MAX_MARGIN: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid inverse sensor model: need 0 < p_free < 0.5 < p_occ < 1")]
    InvalidModel,
    #[error("invalid grid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseModel {
    pub prop_occupied: f64,
    pub prop_free: f64,
}

impl Default for InverseModel {
    fn default() -> Self {
        Self {
            prop_occupied: 0.7,
            prop_free: 0.4,
        }
    }
}

impl InverseModel {
    pub fn new(prop_occupied: f64, prop_free: f64) -> Result<Self, GridError> {
        let ok = 0.0 < prop_free && prop_free < 0.5 && 0.5 < prop_occupied && prop_occupied < 1.0;
        if !ok {
            return Err(GridError::InvalidModel);
        }
        Ok(Self {
            prop_occupied,
            prop_free,
        })
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `1 - 1/(1 + e^l)`.
pub fn cell_probability(l: f64) -> f64 {
    1.0 - 1.0 / (1.0 + l.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridParams {
    pub resolution: f64,
    pub l0: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub model: InverseModel,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            resolution: 0.4,
            l0: 0.0,
            l_min: -4.0,
            l_max: 4.0,
            model: InverseModel::default(),
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(GridError::InvalidParams("resolution must be positive".into()));
        }
        if !(self.l_min < self.l0 && self.l0 < self.l_max) {
            return Err(GridError::InvalidParams("need l_min < l0 < l_max".into()));
        }
        InverseModel::new(self.model.prop_occupied, self.model.prop_free)?;
        Ok(())
    }
}

fn quantize(l: f64) -> i32 {
    (l * SCALE).round() as i32
}

fn dequantize(q: i32) -> f64 {
    q as f64 / SCALE
}

pub type Cell = (i64, i64);

/// 8-connected line from `a` to `b`, both included.
///
/// Minor-axis offsets are rounded half away from `a`, so the result depends
/// only on the displacement and not on where the line sits.
pub fn bresenham(a: Cell, b: Cell) -> Vec<Cell> {
    let dx = (b.0 - a.0).abs();
    let dy = (b.1 - a.1).abs();
    let sx = if b.0 >= a.0 { 1 } else { -1 };
    let sy = if b.1 >= a.1 { 1 } else { -1 };
    let (major, minor) = if dx >= dy { (dx, dy) } else { (dy, dx) };
    let mut out = Vec::with_capacity(major as usize + 1);
    let (mut x, mut y) = a;
    let mut d = 2 * minor - major;
    for _ in 0..=major {
        out.push((x, y));
        if d >= 0 && minor > 0 {
            if dx >= dy {
                y += sy;
            } else {
                x += sx;
            }
            d -= 2 * major;
        }
        d += 2 * minor;
        if dx >= dy {
            x += sx;
        } else {
            y += sy;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    params: GridParams,
    /// World coordinates of the outer corner of cell (0, 0).
    origin: Point2,
    width: usize,
    height: usize,
    cells: Vec<i32>,
    q_min: i32,
    q_max: i32,
    q_free: i32,
    q_occ: i32,
    q_prior: i32,
}

impl OccupancyGrid {
    pub fn new(params: GridParams, origin: Point2, width: usize, height: usize) -> Result<Self, GridError> {
        params.validate()?;
        if width == 0 || height == 0 {
            return Err(GridError::InvalidParams("grid must have at least one cell".into()));
        }
        let m = params.model;
        let q_prior = quantize(params.l0);
        Ok(Self {
            q_min: quantize(params.l_min),
            q_max: quantize(params.l_max),
            q_free: quantize(logit(m.prop_free) - params.l0),
            q_occ: quantize(logit(m.prop_occupied) - params.l0),
            q_prior,
            cells: vec![q_prior; width * height],
            params,
            origin,
            width,
            height,
        })
    }

    /// A square grid of `size` meters centered on `center`.
    pub fn centered(params: GridParams, center: Point2, size: f64) -> Result<Self, GridError> {
        let n = (size / params.resolution).ceil().max(1.0) as usize;
        let half = 0.5 * n as f64 * params.resolution;
        Self::new(params, Point2::new(center.x - half, center.y - half), n, n)
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    pub fn resolution(&self) -> f64 {
        self.params.resolution
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Cell containing `p`, without bounds checks.
    pub fn cell_of(&self, p: &Point2) -> Cell {
        let r = self.params.resolution;
        (((p.x - self.origin.x) / r).floor() as i64, ((p.y - self.origin.y) / r).floor() as i64)
    }

    pub fn world_to_cell(&self, p: &Point2) -> Option<(usize, usize)> {
        let (ix, iy) = self.cell_of(p);
        self.in_bounds((ix, iy)).then_some((ix as usize, iy as usize))
    }

    pub fn cell_center(&self, ix: i64, iy: i64) -> Point2 {
        let r = self.params.resolution;
        Point2::new(self.origin.x + (ix as f64 + 0.5) * r, self.origin.y + (iy as f64 + 0.5) * r)
    }

    fn in_bounds(&self, (ix, iy): Cell) -> bool {
        ix >= 0 && iy >= 0 && (ix as usize) < self.width && (iy as usize) < self.height
    }

    pub fn log_odds(&self, ix: usize, iy: usize) -> f64 {
        dequantize(self.cells[iy * self.width + ix])
    }

    pub fn probability(&self, ix: usize, iy: usize) -> f64 {
        cell_probability(self.log_odds(ix, iy))
    }

    /// Raw fixed-point cell values, row-major from the bottom row.
    pub fn raw_cells(&self) -> &[i32] {
        &self.cells
    }

    /// Grows the grid by doubling until every cell in `lo..=hi` exists.
    /// Returns the shift applied to existing cell indices.
    fn ensure(&mut self, lo: Cell, hi: Cell) -> Cell {
        let (mut left, mut right, mut down, mut up) = (0usize, 0usize, 0usize, 0usize);
        let (mut w, mut h) = (self.width.max(1), self.height.max(1));
        let mut x0 = 0i64;
        let mut y0 = 0i64;
        while lo.0 < x0 {
            left += w;
            x0 -= w as i64;
            w *= 2;
        }
        while hi.0 >= x0 + w as i64 {
            right += w;
            w *= 2;
        }
        while lo.1 < y0 {
            down += h;
            y0 -= h as i64;
            h *= 2;
        }
        while hi.1 >= y0 + h as i64 {
            up += h;
            h *= 2;
        }
        if left + right + down + up == 0 && self.width > 0 && self.height > 0 {
            return (0, 0);
        }
        let new_w = left + self.width + right;
        let new_h = down + self.height + up;
        let mut cells = vec![self.q_prior; new_w * new_h];
        for y in 0..self.height {
            let src = &self.cells[y * self.width..(y + 1) * self.width];
            let dst = (y + down) * new_w + left;
            cells[dst..dst + self.width].copy_from_slice(src);
        }
        let r = self.params.resolution;
        self.origin = Point2::new(self.origin.x - left as f64 * r, self.origin.y - down as f64 * r);
        self.width = new_w;
        self.height = new_h;
        self.cells = cells;
        (left as i64, down as i64)
    }

    fn bump(&mut self, (ix, iy): Cell, delta: i32) {
        let k = iy as usize * self.width + ix as usize;
        self.cells[k] = self.cells[k].saturating_add(delta).clamp(self.q_min, self.q_max);
    }

    /// Adds (`sign = 1`) or removes (`sign = -1`) a scan taken at `pose`.
    pub fn integrate_scan(&mut self, pose: &Pose2, scan: &LaserScan, sign: i32) {
        let sensor = pose.translation();
        let mut rays = Vec::new();
        for i in 0..scan.ranges.len() {
            if !scan.is_valid(i) {
                continue;
            }
            let rho = scan.ranges[i];
            let end = pose.transform_point(&Point2::from_polar(rho, scan.ray_angle(i)));
            rays.push((end, rho < scan.range_max - RANGE_MAX_MARGIN));
        }
        if rays.is_empty() {
            return;
        }
        let s = self.cell_of(&sensor);
        let (mut lo, mut hi) = (s, s);
        for (end, _) in &rays {
            let c = self.cell_of(end);
            lo = (lo.0.min(c.0), lo.1.min(c.1));
            hi = (hi.0.max(c.0), hi.1.max(c.1));
        }
        self.ensure(lo, hi);
        let s = self.cell_of(&sensor);

        let mut occupied = Vec::new();
        let mut free = Vec::new();
        for (end, hit) in &rays {
            let e = self.cell_of(end);
            let line = bresenham(s, e);
            if *hit {
                free.extend_from_slice(&line[..line.len() - 1]);
                occupied.push(e);
            } else {
                free.extend_from_slice(&line);
            }
        }
        occupied.sort_unstable();
        occupied.dedup();
        free.sort_unstable();
        free.dedup();
        let (q_occ, q_free) = (self.q_occ * sign, self.q_free * sign);
        for c in &occupied {
            self.bump(*c, q_occ);
        }
        for c in free {
            if occupied.binary_search(&c).is_err() {
                self.bump(c, q_free);
            }
        }
    }

    /// Inserts the scan of graph node `id` at its current pose.
    pub fn insert_node(&mut self, graph: &mut PoseGraph, id: usize) -> bool {
        let Some(node) = graph.node_mut(id) else { return false };
        let Some(scan) = node.scan.clone() else { return false };
        if node.last_map_pose.is_some() {
            return false;
        }
        let pose = node.pose;
        self.integrate_scan(&pose, &scan, 1);
        node.last_map_pose = Some(pose);
        true
    }

    /// Re-renders every integrated node whose pose moved by more than the
    /// tolerances since it was last written. Returns the number rewritten.
    pub fn reintegrate_deviated(&mut self, graph: &mut PoseGraph, trans_tol: f64, rot_tol: f64) -> usize {
        let mut count = 0;
        for id in 0..graph.len() {
            let node = graph.node(id).expect("id in range");
            let (Some(old), Some(scan)) = (node.last_map_pose, node.scan.clone()) else {
                continue;
            };
            let now = node.pose;
            let d = old.between(&now);
            if d.translation_norm() <= trans_tol && d.theta.abs() <= rot_tol {
                continue;
            }
            self.integrate_scan(&old, &scan, -1);
            self.integrate_scan(&now, &scan, 1);
            graph.node_mut(id).expect("id in range").last_map_pose = Some(now);
            count += 1;
        }
        count
    }

    /// Probability bounds implied by the clamps.
    pub fn probability_range(&self) -> (f64, f64) {
        (cell_probability(dequantize(self.q_min)), cell_probability(dequantize(self.q_max)))
    }
}
