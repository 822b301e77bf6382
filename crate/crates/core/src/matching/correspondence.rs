//! Nearest-two-point association against a reference scan.

use std::collections::HashMap;

use crate::geometry::Point2;

use super::MatchError;

/// Point-to-line pairing of current point `i` with the reference segment
/// `(j1, j2)`, where `j1` is the closest reference point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub i: usize,
    pub j1: usize,
    pub j2: usize,
    /// Unit normal of the segment, oriented towards the current point.
    pub n: Point2,
}

/// Uniform grid hash over reference points.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    points: Vec<Point2>,
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    min_cell: (i64, i64),
    max_cell: (i64, i64),
}

impl ReferenceIndex {
    pub fn new(points: Vec<Point2>, cell_size: f64) -> Result<Self, MatchError> {
        if points.len() < 2 {
            return Err(MatchError::ReferenceTooSmall(points.len()));
        }
        let cell = if cell_size > 0.0 && cell_size.is_finite() {
            cell_size
        } else {
            1.0
        };
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        let mut min_cell = (i64::MAX, i64::MAX);
        let mut max_cell = (i64::MIN, i64::MIN);
        for (idx, p) in points.iter().enumerate() {
            let key = key_of(p, cell);
            min_cell = (min_cell.0.min(key.0), min_cell.1.min(key.1));
            max_cell = (max_cell.0.max(key.0), max_cell.1.max(key.1));
            cells.entry(key).or_default().push(idx);
        }
        Ok(Self {
            points,
            cell,
            cells,
            min_cell,
            max_cell,
        })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    /// The two nearest reference points to `q` as `(index, squared distance)`,
    /// nearest first. Ties are broken by index.
    pub fn nearest_two(&self, q: &Point2) -> Option<[(usize, f64); 2]> {
        let (cx, cy) = key_of(q, self.cell);
        let mut best: [(usize, f64); 2] = [(usize::MAX, f64::INFINITY); 2];
        let span = (self.max_cell.0 - self.min_cell.0).max(self.max_cell.1 - self.min_cell.1)
            + (cx - self.min_cell.0).abs().max((cy - self.min_cell.1).abs())
            + 2;
        let mut ring: i64 = 0;
        loop {
            for (dx, dy) in ring_offsets(ring) {
                if let Some(ids) = self.cells.get(&(cx + dx, cy + dy)) {
                    for &j in ids {
                        let d2 = self.points[j].distance_squared(q);
                        insert_best(&mut best, (j, d2));
                    }
                }
            }
            // After scanning rings 0..=ring every point closer than
            // ring * cell is guaranteed to have been seen.
            let covered = ring as f64 * self.cell;
            if best[1].0 != usize::MAX && best[1].1 <= covered * covered {
                return Some(best);
            }
            if ring > span {
                return if best[1].0 != usize::MAX { Some(best) } else { None };
            }
            ring += 1;
        }
    }

    /// Nearest point within `max_dist`, searching only the 3x3 cell
    /// neighbourhood; valid when `max_dist <= cell size`.
    fn nearest_within(&self, q: &Point2, max_dist: f64) -> bool {
        let (cx, cy) = key_of(q, self.cell);
        let lim = max_dist * max_dist;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.cells.get(&(cx + dx, cy + dy)) {
                    if ids.iter().any(|&j| self.points[j].distance_squared(q) <= lim) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn key_of(p: &Point2, cell: f64) -> (i64, i64) {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
}

fn ring_offsets(r: i64) -> Vec<(i64, i64)> {
    if r == 0 {
        return vec![(0, 0)];
    }
    let mut out = Vec::with_capacity(8 * r as usize);
    for d in -r..=r {
        out.push((d, -r));
        out.push((d, r));
    }
    for d in -r + 1..r {
        out.push((-r, d));
        out.push((r, d));
    }
    out
}

fn insert_best(best: &mut [(usize, f64); 2], cand: (usize, f64)) {
    let less = |a: (usize, f64), b: (usize, f64)| a.1 < b.1 || (a.1 == b.1 && a.0 < b.0);
    if less(cand, best[0]) {
        best[1] = best[0];
        best[0] = cand;
    } else if less(cand, best[1]) {
        best[1] = cand;
    }
}

/// Unit normal of the segment `a - b`, or `None` for a zero-length segment.
pub fn segment_normal(a: &Point2, b: &Point2) -> Option<Point2> {
    let d = a.sub(b);
    let len = d.norm();
    if !(len > 0.0) || !len.is_finite() {
        return None;
    }
    Some(d.perp().scale(1.0 / len))
}

/// Pairs every current point (already expressed in the reference frame) with
/// its two nearest reference points.
///
/// Points whose nearest neighbour lies farther than `max_dist`, or whose two
/// neighbours coincide, are left unpaired.
pub fn find_correspondences(
    current_world: &[Point2],
    reference: &ReferenceIndex,
    max_dist: f64,
) -> Vec<Correspondence> {
    let mut out = Vec::with_capacity(current_world.len());
    let gate = max_dist * max_dist;
    let use_fast_gate = max_dist <= reference.cell;
    for (i, q) in current_world.iter().enumerate() {
        if use_fast_gate && !reference.nearest_within(q, max_dist) {
            continue;
        }
        let Some([(j1, d1), (j2, _)]) = reference.nearest_two(q) else {
            continue;
        };
        if d1 > gate || j1 == j2 {
            continue;
        }
        let p1 = reference.points[j1];
        let p2 = reference.points[j2];
        let Some(mut n) = segment_normal(&p1, &p2) else {
            continue;
        };
        if n.dot(&q.sub(&p1)) < 0.0 {
            n = n.scale(-1.0);
        }
        out.push(Correspondence { i, j1, j2, n });
    }
    out
}

/// Convenience wrapper building the grid hash on the fly.
pub fn find_correspondences_in(
    current_world: &[Point2],
    reference: &[Point2],
    max_dist: f64,
) -> Result<Vec<Correspondence>, MatchError> {
    let index = ReferenceIndex::new(reference.to_vec(), max_dist)?;
    Ok(find_correspondences(current_world, &index, max_dist))
}
