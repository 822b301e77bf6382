//! Plain-text file formats.
//!
//! Every format has a pure `parse_*` / `format_*` pair plus thin path-based
//! wrappers. Parsers skip blank lines and `#` comments and report 1-based line
//! numbers. Floats are written in shortest round-trip form, so a write
//! followed by a read reproduces every value exactly.
//!
//! | file | line format |
//! |------|-------------|
//! | scan log | `t angle_min angle_increment range_max n r1 .. rn` (`nan` = no return) |
//! | trajectory | `t x y z qx qy qz qw` with yaw-only quaternions |
//! | graph | `VERTEX2 id x y theta`, `EDGE2 i j dx dy dtheta o11 o12 o13 o22 o23 o33 kind` |
//! | config | `key = value` |
//! | map | binary PGM (P5) plus a `key value` sidecar |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::eval::Trajectory;
use crate::geometry::{wrap_angle, Pose2};
use crate::graph::{Constraint, ConstraintKind, PoseGraph};
use crate::matching::LaserScan;
use crate::occupancy::OccupancyGrid;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

/// Non-empty, comment-stripped lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn number(tok: &str, line: usize) -> Result<f64, IoError> {
    tok.parse::<f64>().map_err(|_| parse_err(line, format!("not a number: {tok:?}")))
}

fn finite(tok: &str, line: usize) -> Result<f64, IoError> {
    let v = number(tok, line)?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn index(tok: &str, line: usize) -> Result<usize, IoError> {
    tok.parse::<usize>().map_err(|_| parse_err(line, format!("not an index: {tok:?}")))
}

// ---- scan log ----

pub fn format_scan_log(scans: &[LaserScan]) -> String {
    let mut out = String::new();
    for s in scans {
        let _ = write!(out, "{} {} {} {} {}", s.timestamp, s.angle_min, s.angle_increment, s.range_max, s.ranges.len());
        for i in 0..s.ranges.len() {
            if s.is_valid(i) {
                let _ = write!(out, " {}", s.ranges[i]);
            } else {
                out.push_str(" nan");
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_scan_log(text: &str) -> Result<Vec<LaserScan>, IoError> {
    let mut scans: Vec<LaserScan> = Vec::new();
    for (line, content) in content_lines(text) {
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() < 5 {
            return Err(parse_err(line, "truncated scan header"));
        }
        let t = finite(toks[0], line)?;
        let angle_min = finite(toks[1], line)?;
        let inc = finite(toks[2], line)?;
        let range_max = finite(toks[3], line)?;
        let n = index(toks[4], line)?;
        if toks.len() != 5 + n {
            return Err(parse_err(line, format!("expected {n} ranges, found {}", toks.len() - 5)));
        }
        let ranges = toks[5..].iter().map(|r| number(r, line)).collect::<Result<Vec<_>, _>>()?;
        if let Some(prev) = scans.last() {
            if t <= prev.timestamp {
                return Err(parse_err(line, "timestamps must increase"));
            }
        }
        let scan = LaserScan::new(t, angle_min, inc, range_max, ranges).map_err(|e| parse_err(line, e.to_string()))?;
        scans.push(scan);
    }
    Ok(scans)
}

pub fn write_scan_log(path: impl AsRef<Path>, scans: &[LaserScan]) -> Result<(), IoError> {
    fs::write(path, format_scan_log(scans))?;
    Ok(())
}

pub fn read_scan_log(path: impl AsRef<Path>) -> Result<Vec<LaserScan>, IoError> {
    parse_scan_log(&fs::read_to_string(path)?)
}

// ---- trajectory ----

/// Yaw-only quaternion `(qx, qy, qz, qw)`.
pub fn yaw_to_quaternion(theta: f64) -> [f64; 4] {
    let (s, c) = (0.5 * theta).sin_cos();
    [0.0, 0.0, s, c]
}

/// Yaw of an arbitrary nonzero quaternion.
pub fn quaternion_to_yaw([qx, qy, qz, qw]: [f64; 4]) -> f64 {
    (2.0 * (qw * qz + qx * qy)).atan2(qw * qw + qx * qx - qy * qy - qz * qz)
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, p) in traj.samples() {
        let [qx, qy, qz, qw] = yaw_to_quaternion(p.theta);
        let _ = writeln!(out, "{t} {} {} 0 {qx} {qy} {qz} {qw}", p.x, p.y);
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory, IoError> {
    let mut samples = Vec::new();
    let mut lines = Vec::new();
    for (line, content) in content_lines(text) {
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(parse_err(line, format!("expected 8 fields, found {}", toks.len())));
        }
        let v = toks.iter().map(|t| finite(t, line)).collect::<Result<Vec<_>, _>>()?;
        let q = [v[4], v[5], v[6], v[7]];
        if q.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
            return Err(parse_err(line, "zero quaternion"));
        }
        samples.push((v[0], Pose2::new(v[1], v[2], quaternion_to_yaw(q))));
        lines.push(line);
    }
    Trajectory::new(samples).map_err(|e| {
        let k = match e {
            crate::eval::EvalError::Unordered(k) | crate::eval::EvalError::NonFinitePose(k) => k,
            _ => 0,
        };
        parse_err(lines.get(k).copied().unwrap_or(0), e.to_string())
    })
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<(), IoError> {
    fs::write(path, format_trajectory(traj))?;
    Ok(())
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory, IoError> {
    parse_trajectory(&fs::read_to_string(path)?)
}

// ---- pose graph ----

pub fn format_graph(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for n in graph.nodes() {
        let _ = writeln!(out, "VERTEX2 {} {} {} {}", n.id, n.pose.x, n.pose.y, n.pose.theta);
    }
    for c in graph.constraints() {
        let o = &c.omega;
        let _ = writeln!(
            out,
            "EDGE2 {} {} {} {} {} {} {} {} {} {} {} {}",
            c.i,
            c.j,
            c.z.x,
            c.z.y,
            c.z.theta,
            o[(0, 0)],
            o[(0, 1)],
            o[(0, 2)],
            o[(1, 1)],
            o[(1, 2)],
            o[(2, 2)],
            c.kind.as_str()
        );
    }
    out
}

/// Reads a graph dump. Vertices must be numbered densely from 0 in file
/// order; scans and timestamps are not part of the format. Whether an edge is
/// robustified follows from its kind.
pub fn parse_graph(text: &str, window_size: usize) -> Result<PoseGraph, IoError> {
    let mut graph = PoseGraph::new(window_size);
    for (line, content) in content_lines(text) {
        let toks: Vec<&str> = content.split_whitespace().collect();
        match toks[0] {
            "VERTEX2" => {
                if toks.len() != 5 {
                    return Err(parse_err(line, "VERTEX2 needs 4 fields"));
                }
                let id = index(toks[1], line)?;
                if id != graph.len() {
                    return Err(parse_err(line, format!("expected vertex {}, found {id}", graph.len())));
                }
                let v = toks[2..].iter().map(|t| finite(t, line)).collect::<Result<Vec<_>, _>>()?;
                graph.add_node(Pose2::new(v[0], v[1], v[2]), id as f64, None);
            }
            "EDGE2" => {
                if toks.len() != 13 {
                    return Err(parse_err(line, "EDGE2 needs 12 fields"));
                }
                let i = index(toks[1], line)?;
                let j = index(toks[2], line)?;
                let v = toks[3..12].iter().map(|t| finite(t, line)).collect::<Result<Vec<_>, _>>()?;
                let kind = ConstraintKind::parse(toks[12])
                    .ok_or_else(|| parse_err(line, format!("unknown edge kind {:?}", toks[12])))?;
                let omega = Matrix3::new(v[3], v[4], v[5], v[4], v[6], v[7], v[5], v[7], v[8]);
                let c = Constraint::new(i, j, Pose2::new(v[0], v[1], wrap_angle(v[2])), omega, kind);
                graph.add_constraint(c).map_err(|e| parse_err(line, e.to_string()))?;
            }
            other => return Err(parse_err(line, format!("unknown record {other:?}"))),
        }
    }
    Ok(graph)
}

pub fn write_graph(path: impl AsRef<Path>, graph: &PoseGraph) -> Result<(), IoError> {
    fs::write(path, format_graph(graph))?;
    Ok(())
}

pub fn read_graph(path: impl AsRef<Path>, window_size: usize) -> Result<PoseGraph, IoError> {
    parse_graph(&fs::read_to_string(path)?, window_size)
}

// ---- config ----

/// `key = value` pairs. Later duplicates are rejected.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, IoError> {
    let mut map = BTreeMap::new();
    for (line, content) in content_lines(text) {
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, "expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(parse_err(line, format!("bad key {k:?}")));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(parse_err(line, format!("duplicate key {k:?}")));
        }
    }
    Ok(map)
}

pub fn format_config(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

// ---- map export ----

/// Probability thresholds recorded alongside the image.
pub const OCCUPIED_THRESH: f64 = 0.6;
pub const FREE_THRESH: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct MapMeta {
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub width: usize,
    pub height: usize,
    pub occupied_thresh: f64,
    pub free_thresh: f64,
}

impl MapMeta {
    pub fn of(grid: &OccupancyGrid) -> Self {
        Self {
            resolution: grid.resolution(),
            origin_x: grid.origin().x,
            origin_y: grid.origin().y,
            width: grid.width(),
            height: grid.height(),
            occupied_thresh: OCCUPIED_THRESH,
            free_thresh: FREE_THRESH,
        }
    }
}

/// Gray level of a cell: 0 occupied, 255 free.
pub fn gray_level(p: f64) -> u8 {
    (255.0 * (1.0 - p)).round().clamp(0.0, 255.0) as u8
}

/// P5 image with the first row at the top of the map (largest y).
pub fn encode_pgm(grid: &OccupancyGrid) -> Vec<u8> {
    let (w, h) = (grid.width(), grid.height());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for row in 0..h {
        let iy = h - 1 - row;
        out.extend((0..w).map(|ix| gray_level(grid.probability(ix, iy))));
    }
    out
}

/// Decodes a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), IoError> {
    let bad = |m: &str| IoError::Format(format!("pgm: {m}"));
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        header.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if header[0] != "P5" {
        return Err(bad("not a P5 image"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (dim(header[1])?, dim(header[2])?);
    if header[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w.checked_mul(h).ok_or_else(|| bad("image too large"))?;
    if bytes.len() < pos || bytes.len() - pos != n {
        return Err(bad("raster size mismatch"));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

pub fn format_map_meta(meta: &MapMeta) -> String {
    format!(
        "resolution {}\norigin_x {}\norigin_y {}\nwidth {}\nheight {}\noccupied_thresh {}\nfree_thresh {}\n",
        meta.resolution, meta.origin_x, meta.origin_y, meta.width, meta.height, meta.occupied_thresh, meta.free_thresh
    )
}

pub fn parse_map_meta(text: &str) -> Result<MapMeta, IoError> {
    let mut fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (line, content) in content_lines(text) {
        let mut it = content.split_whitespace();
        let (Some(k), Some(v), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(line, "expected key value"));
        };
        if fields.insert(k, (line, v)).is_some() {
            return Err(parse_err(line, format!("duplicate key {k:?}")));
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| IoError::Format(format!("meta: missing {k}")));
    let real = |k: &str| get(k).and_then(|(l, v)| finite(v, l));
    let count = |k: &str| get(k).and_then(|(l, v)| index(v, l));
    let meta = MapMeta {
        resolution: real("resolution")?,
        origin_x: real("origin_x")?,
        origin_y: real("origin_y")?,
        width: count("width")?,
        height: count("height")?,
        occupied_thresh: real("occupied_thresh")?,
        free_thresh: real("free_thresh")?,
    };
    if !(meta.resolution > 0.0) {
        return Err(IoError::Format("meta: resolution must be positive".into()));
    }
    Ok(meta)
}

pub fn export_map(grid: &OccupancyGrid, pgm: impl AsRef<Path>, meta: impl AsRef<Path>) -> Result<(), IoError> {
    fs::write(pgm, encode_pgm(grid))?;
    fs::write(meta, format_map_meta(&MapMeta::of(grid)))?;
    Ok(())
}
