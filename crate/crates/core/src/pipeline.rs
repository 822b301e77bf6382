//! Offline and online drivers.
//!
//! Both modes run the same three stages: local tracking, graph optimization
//! and map construction. Offline mode interleaves them on the calling thread
//! in a fixed order and is bit-for-bit reproducible. Online mode gives each
//! stage its own thread, connected by bounded channels:
//!
//! ```text
//! caller --scans--> tracking --node/loop--> optimizer --optimized--> mapper
//! ```
//!
//! The tracker never waits for the other two. When a downstream queue is
//! full the pending request is kept and merged with later ones (optimizing the
//! newest window and writing un-mapped nodes are both idempotent), so nothing
//! is lost and the tracker never blocks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use thiserror::Error;

use crate::eval::Trajectory;
use crate::frontend::{process_scan, MatchPurpose, MatchRecord, TrackerConfig, TrackerState, TrackingOutcome};
use crate::geometry::{Point2, Pose2};
use crate::graph::{optimize, optimize_full, optimize_window, ConstraintKind, OptimizerConfig, PoseGraph};
use crate::kernel::BarronKernel;
use crate::matching::LaserScan;
use crate::occupancy::{GridParams, OccupancyGrid};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scan log is empty")]
    EmptyLog,
    #[error("no scan could be tracked")]
    NothingTracked,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("worker thread panicked")]
    WorkerPanic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub tracker: TrackerConfig,
    pub kernel: BarronKernel,
    pub optimizer: OptimizerConfig,
    pub window_size: usize,
    pub grid: GridParams,
    /// Resolution of the map rebuilt from the final poses.
    pub export_resolution: f64,
    /// Pose drift that triggers re-writing a scan into the map.
    pub reintegrate_trans_tol: f64,
    pub reintegrate_rot_tol: f64,
    pub channel_capacity: usize,
    pub record_timings: bool,
    pub record_matches: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let grid = GridParams::default();
        Self {
            mode: Mode::Offline,
            tracker: TrackerConfig::default(),
            kernel: BarronKernel::default(),
            optimizer: OptimizerConfig::default(),
            window_size: 10,
            reintegrate_trans_tol: grid.resolution,
            reintegrate_rot_tol: 0.05,
            grid,
            export_resolution: 0.1,
            channel_capacity: 16,
            record_timings: true,
            record_matches: true,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, PipelineError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(PipelineError::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl PipelineConfig {
    /// Applies `key = value` overrides on top of the defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, PipelineError> {
        let mut c = Self::default();
        let mut alpha = c.kernel.alpha();
        let mut scale = c.kernel.scale();
        let mut resolution_set = false;
        let mut tol_set = false;
        for (k, v) in map {
            let t = &mut c.tracker;
            let m = &mut t.matcher;
            match k.as_str() {
                "pipeline.mode" => {
                    c.mode = match v.as_str() {
                        "online" => Mode::Online,
                        "offline" => Mode::Offline,
                        _ => return Err(PipelineError::Config(format!("pipeline.mode: {v:?}"))),
                    }
                }
                "pipeline.channel_capacity" => c.channel_capacity = parse_value(k, v)?,
                "pipeline.record_timings" => c.record_timings = parse_bool(k, v)?,
                "pipeline.record_matches" => c.record_matches = parse_bool(k, v)?,
                "tracker.keyframe_trans_thresh" => t.keyframe_trans_thresh = parse_value(k, v)?,
                "tracker.keyframe_rot_thresh" => t.keyframe_rot_thresh = parse_value(k, v)?,
                "tracker.proximity_radius" => t.proximity_radius = parse_value(k, v)?,
                "tracker.loop_min_index_gap" => t.loop_min_index_gap = parse_value(k, v)?,
                "tracker.loop_search_radius" => t.loop_search_radius = parse_value(k, v)?,
                "tracker.loop_residual_gate" => t.loop_residual_gate = parse_value(k, v)?,
                "tracker.exclude_last_k" => t.exclude_last_k = parse_value(k, v)?,
                "tracker.max_proximity_candidates" => t.max_proximity_candidates = parse_value(k, v)?,
                "tracker.max_loop_candidates" => t.max_loop_candidates = parse_value(k, v)?,
                "tracker.verify_loops" => t.verify_loops = parse_bool(k, v)?,
                "tracker.robustify_all" => t.robustify_all = parse_bool(k, v)?,
                "matcher.max_dist" => m.max_dist = parse_value(k, v)?,
                "matcher.min_valid_rays" => m.min_valid_rays = parse_value(k, v)?,
                "matcher.min_correspondences" => m.min_correspondences = parse_value(k, v)?,
                "matcher.max_iterations" => m.max_iterations = parse_value(k, v)?,
                "matcher.eps_t" => m.eps_t = parse_value(k, v)?,
                "matcher.eps_theta" => m.eps_theta = parse_value(k, v)?,
                "covariance.sigma_range" => m.covariance.sigma_range = parse_value(k, v)?,
                "kernel.alpha" => alpha = parse_value(k, v)?,
                "kernel.c" => scale = parse_value(k, v)?,
                "graph.window_size" => c.window_size = parse_value(k, v)?,
                "optimizer.max_rounds" => c.optimizer.max_rounds = parse_value(k, v)?,
                "optimizer.max_lm_iterations" => c.optimizer.max_lm_iterations = parse_value(k, v)?,
                "optimizer.max_solver_steps" => c.optimizer.max_solver_steps = parse_value(k, v)?,
                "optimizer.rel_tol" => c.optimizer.rel_tol = parse_value(k, v)?,
                "optimizer.initial_damping" => c.optimizer.initial_damping = parse_value(k, v)?,
                "map.resolution" => {
                    c.grid.resolution = parse_value(k, v)?;
                    resolution_set = true;
                }
                "map.export_resolution" => c.export_resolution = parse_value(k, v)?,
                "map.l0" => c.grid.l0 = parse_value(k, v)?,
                "map.l_min" => c.grid.l_min = parse_value(k, v)?,
                "map.l_max" => c.grid.l_max = parse_value(k, v)?,
                "map.prop_occupied" => c.grid.model.prop_occupied = parse_value(k, v)?,
                "map.prop_free" => c.grid.model.prop_free = parse_value(k, v)?,
                "map.reintegrate_trans_tol" => {
                    c.reintegrate_trans_tol = parse_value(k, v)?;
                    tol_set = true;
                }
                "map.reintegrate_rot_tol" => c.reintegrate_rot_tol = parse_value(k, v)?,
                _ => return Err(PipelineError::Config(format!("unknown key {k:?}"))),
            }
        }
        if resolution_set && !tol_set {
            c.reintegrate_trans_tol = c.grid.resolution;
        }
        c.kernel = BarronKernel::new(alpha, scale).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.tracker.validate().map_err(|e| cfg(e.to_string()))?;
        self.grid.validate().map_err(|e| cfg(e.to_string()))?;
        if self.window_size < 2 {
            return Err(cfg("graph.window_size must be at least 2".into()));
        }
        if self.channel_capacity == 0 {
            return Err(cfg("pipeline.channel_capacity must be positive".into()));
        }
        if !(self.export_resolution > 0.0) {
            return Err(cfg("map.export_resolution must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Worker {
    Tracking,
    Optimization,
    Mapping,
}

impl Worker {
    pub fn as_str(&self) -> &'static str {
        match self {
            Worker::Tracking => "tracking",
            Worker::Optimization => "optimization",
            Worker::Mapping => "mapping",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Track,
    WindowOptimization,
    FullOptimization,
    MapInsert,
    MapReintegrate,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Track => "track",
            EventKind::WindowOptimization => "window_opt",
            EventKind::FullOptimization => "full_opt",
            EventKind::MapInsert => "map_insert",
            EventKind::MapReintegrate => "map_reintegrate",
        }
    }

    fn worker(&self) -> Worker {
        match self {
            EventKind::Track => Worker::Tracking,
            EventKind::WindowOptimization | EventKind::FullOptimization => Worker::Optimization,
            EventKind::MapInsert | EventKind::MapReintegrate => Worker::Mapping,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    /// Timestamp of the scan that caused the event.
    pub timestamp: f64,
    pub worker: Worker,
    pub event: EventKind,
    pub ms: f64,
    /// Graph size when the event ran.
    pub nodes: usize,
}

/// Node poses just before and just after a loop-triggered full optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopEvent {
    pub timestamp: f64,
    pub node: usize,
    pub before: Vec<(f64, Pose2)>,
    pub after: Vec<(f64, Pose2)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// One pose per tracked scan, re-anchored on the final node poses.
    pub trajectory: Trajectory,
    pub graph: PoseGraph,
    /// The map maintained during the run.
    pub grid: OccupancyGrid,
    pub timings: Vec<TimingRecord>,
    pub matches: Vec<MatchRecord>,
    pub loops: Vec<LoopEvent>,
    pub scans: usize,
    pub degraded: usize,
    /// Pose of the last tracked scan relative to its node.
    pub final_offset: Pose2,
}

impl PipelineOutput {
    /// Node trajectory (timestamp, pose) of the final graph.
    pub fn node_trajectory(&self) -> Trajectory {
        Trajectory::new(node_samples(&self.graph)).unwrap_or_default()
    }
}

fn node_samples(graph: &PoseGraph) -> Vec<(f64, Pose2)> {
    graph.nodes().iter().map(|n| (n.timestamp, n.pose)).collect()
}

/// Per-scan anchor bookkeeping: the final pose of a scan is its anchor
/// node's final pose composed with the recorded offset.
#[derive(Debug, Clone, Copy)]
struct Anchored {
    t: f64,
    node: usize,
    offset: Pose2,
}

fn anchored(o: &TrackingOutcome) -> Option<Anchored> {
    o.anchor.map(|node| Anchored {
        t: o.timestamp,
        node,
        offset: o.offset,
    })
}

fn final_trajectory(graph: &PoseGraph, anchors: &[Anchored]) -> Trajectory {
    let samples = anchors
        .iter()
        .filter_map(|a| graph.node(a.node).map(|n| (a.t, n.pose.compose(&a.offset))))
        .collect();
    Trajectory::new(samples).unwrap_or_default()
}

fn new_grid(params: &GridParams) -> OccupancyGrid {
    OccupancyGrid::centered(params.clone(), Point2::default(), 16.0 * params.resolution.max(1.0))
        .expect("validated grid parameters")
}

/// Renders every node scan at its current pose into a fresh grid.
pub fn rebuild_map(graph: &PoseGraph, params: &GridParams) -> OccupancyGrid {
    let mut grid = new_grid(params);
    for n in graph.nodes() {
        if let Some(scan) = &n.scan {
            grid.integrate_scan(&n.pose, scan, 1);
        }
    }
    grid
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Processes the scans strictly in order on the calling thread.
pub fn run_offline(scans: &[LaserScan], cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    if scans.is_empty() {
        return Err(PipelineError::EmptyLog);
    }
    let mut graph = PoseGraph::new(cfg.window_size);
    let mut grid = new_grid(&cfg.grid);
    let mut state = TrackerState::default();
    let mut timings = Vec::new();
    let mut matches = Vec::new();
    let mut loops = Vec::new();
    let mut anchors = Vec::new();
    let mut degraded = 0;

    let record = |timings: &mut Vec<TimingRecord>, t: f64, event: EventKind, start: Instant, nodes: usize| {
        if cfg.record_timings {
            timings.push(TimingRecord {
                timestamp: t,
                worker: event.worker(),
                event,
                ms: elapsed_ms(start),
                nodes,
            });
        }
    };

    for scan in scans {
        let t = scan.timestamp;
        let start = Instant::now();
        let out = process_scan(&mut state, &mut graph, Arc::new(scan.clone()), &cfg.tracker);
        record(&mut timings, t, EventKind::Track, start, graph.len());
        if cfg.record_matches {
            matches.extend(out.matches.iter().cloned());
        }
        degraded += out.degraded as usize;
        anchors.extend(anchored(&out));
        let Some(id) = out.new_node else { continue };

        if id > 0 {
            let start = Instant::now();
            // a singular window leaves the poses untouched; keep going
            let _ = optimize_window(&mut graph, &cfg.kernel, &cfg.optimizer);
            record(&mut timings, t, EventKind::WindowOptimization, start, graph.len());
        }
        let start = Instant::now();
        grid.insert_node(&mut graph, id);
        record(&mut timings, t, EventKind::MapInsert, start, graph.len());

        if out.loop_detected {
            let before = node_samples(&graph);
            let start = Instant::now();
            let _ = optimize_full(&mut graph, &cfg.kernel, &cfg.optimizer);
            record(&mut timings, t, EventKind::FullOptimization, start, graph.len());
            loops.push(LoopEvent {
                timestamp: t,
                node: id,
                before,
                after: node_samples(&graph),
            });
            let start = Instant::now();
            grid.reintegrate_deviated(&mut graph, cfg.reintegrate_trans_tol, cfg.reintegrate_rot_tol);
            record(&mut timings, t, EventKind::MapReintegrate, start, graph.len());
        }
    }
    if graph.is_empty() {
        return Err(PipelineError::NothingTracked);
    }
    Ok(PipelineOutput {
        trajectory: final_trajectory(&graph, &anchors),
        graph,
        grid,
        timings,
        matches,
        loops,
        scans: scans.len(),
        degraded,
        final_offset: anchors.last().map_or(Pose2::identity(), |a| a.offset),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum OptJob {
    Window { t: f64 },
    Full { t: f64, node: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MapJob {
    t: f64,
    full: bool,
}

/// Holds at most one undelivered request and merges newer ones into it.
struct Coalescing<T> {
    tx: SyncSender<T>,
    pending: Option<T>,
}

impl<T: Copy> Coalescing<T> {
    fn new(tx: SyncSender<T>) -> Self {
        Self { tx, pending: None }
    }

    fn offer(&mut self, job: Option<T>, merge: impl Fn(T, T) -> T) {
        self.pending = match (self.pending, job) {
            (Some(a), Some(b)) => Some(merge(a, b)),
            (a, b) => a.or(b),
        };
        self.flush();
    }

    fn flush(&mut self) {
        if let Some(job) = self.pending {
            match self.tx.try_send(job) {
                Ok(()) | Err(TrySendError::Disconnected(_)) => self.pending = None,
                Err(TrySendError::Full(_)) => {}
            }
        }
    }

    /// Blocking delivery of whatever is left, used at shutdown.
    fn finish(mut self) {
        if let Some(job) = self.pending.take() {
            let _ = self.tx.send(job);
        }
    }
}

fn merge_opt(a: OptJob, b: OptJob) -> OptJob {
    match (a, b) {
        (OptJob::Full { .. }, OptJob::Window { .. }) => a,
        _ => b,
    }
}

fn lock(graph: &Mutex<PoseGraph>) -> std::sync::MutexGuard<'_, PoseGraph> {
    graph.lock().unwrap_or_else(|e| e.into_inner())
}

struct TrackingResult {
    anchors: Vec<Anchored>,
    timings: Vec<TimingRecord>,
    matches: Vec<MatchRecord>,
    scans: usize,
    degraded: usize,
}

fn tracking_worker(
    scans: Receiver<LaserScan>,
    graph: Arc<Mutex<PoseGraph>>,
    opt_tx: SyncSender<OptJob>,
    cfg: PipelineConfig,
) -> TrackingResult {
    let mut state = TrackerState::default();
    let mut handle = graph;
    let mut to_opt = Coalescing::new(opt_tx);
    let mut res = TrackingResult {
        anchors: Vec::new(),
        timings: Vec::new(),
        matches: Vec::new(),
        scans: 0,
        degraded: 0,
    };
    for scan in scans {
        res.scans += 1;
        let t = scan.timestamp;
        let start = Instant::now();
        let out = process_scan(&mut state, &mut handle, Arc::new(scan), &cfg.tracker);
        let ms = elapsed_ms(start);
        let job = out.new_node.filter(|&id| id > 0).map(|id| {
            if out.loop_detected {
                OptJob::Full { t, node: id }
            } else {
                OptJob::Window { t }
            }
        });
        to_opt.offer(job, merge_opt);
        if cfg.record_timings {
            let nodes = out.new_node.map_or(0, |id| id + 1);
            res.timings.push(TimingRecord {
                timestamp: t,
                worker: Worker::Tracking,
                event: EventKind::Track,
                ms,
                nodes,
            });
        }
        if cfg.record_matches {
            res.matches.extend(out.matches.iter().cloned());
        }
        res.degraded += out.degraded as usize;
        res.anchors.extend(anchored(&out));
    }
    to_opt.finish();
    res
}

struct OptimizerResult {
    timings: Vec<TimingRecord>,
    loops: Vec<LoopEvent>,
}

fn optimizer_worker(
    jobs: Receiver<OptJob>,
    graph: Arc<Mutex<PoseGraph>>,
    map_tx: SyncSender<MapJob>,
    cfg: PipelineConfig,
) -> OptimizerResult {
    let mut to_map = Coalescing::new(map_tx);
    let mut res = OptimizerResult {
        timings: Vec::new(),
        loops: Vec::new(),
    };
    while let Ok(first) = jobs.recv() {
        // Serve loop jobs first and collapse the backlog into one job.
        let job = jobs.try_iter().fold(first, merge_opt);
        let (mut snapshot, len) = {
            let g = lock(&graph);
            (g.clone(), g.len())
        };
        if len < 2 {
            continue;
        }
        let start = Instant::now();
        let (t, kind, free): (f64, EventKind, Vec<usize>) = match job {
            OptJob::Window { t } => {
                let lo = len.saturating_sub(cfg.window_size);
                (t, EventKind::WindowOptimization, (lo + 1..len).collect())
            }
            OptJob::Full { t, .. } => (t, EventKind::FullOptimization, (1..len).collect()),
        };
        let before = matches!(job, OptJob::Full { .. }).then(|| node_samples(&snapshot));
        let report = optimize(&mut snapshot, &free, &cfg.kernel, &cfg.optimizer);
        let ms = elapsed_ms(start);
        let Ok(report) = report else { continue };
        let after = {
            let mut g = lock(&graph);
            g.commit(len, &report.updated);
            node_samples(&g)
        };
        if cfg.record_timings {
            res.timings.push(TimingRecord {
                timestamp: t,
                worker: Worker::Optimization,
                event: kind,
                ms,
                nodes: len,
            });
        }
        if let (OptJob::Full { node, .. }, Some(before)) = (job, before) {
            res.loops.push(LoopEvent {
                timestamp: t,
                node,
                before,
                after: after[..len].to_vec(),
            });
        }
        let full = kind == EventKind::FullOptimization;
        to_map.offer(Some(MapJob { t, full }), |a, b| MapJob {
            t: b.t,
            full: a.full || b.full,
        });
    }
    to_map.finish();
    res
}

fn mapping_worker(jobs: Receiver<MapJob>, graph: Arc<Mutex<PoseGraph>>, cfg: PipelineConfig) -> (OccupancyGrid, Vec<TimingRecord>) {
    let mut grid = new_grid(&cfg.grid);
    let mut timings = Vec::new();
    let run = |grid: &mut OccupancyGrid, job: MapJob, timings: &mut Vec<TimingRecord>| {
        // Claim the work under the lock, render outside it.
        let start = Instant::now();
        let (fresh, moved, nodes) = {
            let mut g = lock(&graph);
            let nodes = g.len();
            let mut fresh = Vec::new();
            let mut moved = Vec::new();
            for id in 0..g.len() {
                let n = g.node_mut(id).expect("id in range");
                let Some(scan) = n.scan.clone() else { continue };
                match n.last_map_pose {
                    None => {
                        fresh.push((n.pose, scan));
                        n.last_map_pose = Some(n.pose);
                    }
                    Some(old) if job.full => {
                        let d = old.between(&n.pose);
                        if d.translation_norm() > cfg.reintegrate_trans_tol || d.theta.abs() > cfg.reintegrate_rot_tol {
                            moved.push((old, n.pose, scan));
                            n.last_map_pose = Some(n.pose);
                        }
                    }
                    Some(_) => {}
                }
            }
            (fresh, moved, nodes)
        };
        for (pose, scan) in &fresh {
            grid.integrate_scan(pose, scan, 1);
        }
        if cfg.record_timings {
            timings.push(TimingRecord {
                timestamp: job.t,
                worker: Worker::Mapping,
                event: EventKind::MapInsert,
                ms: elapsed_ms(start),
                nodes,
            });
        }
        if job.full {
            let start = Instant::now();
            for (old, now, scan) in &moved {
                grid.integrate_scan(old, scan, -1);
                grid.integrate_scan(now, scan, 1);
            }
            if cfg.record_timings {
                timings.push(TimingRecord {
                    timestamp: job.t,
                    worker: Worker::Mapping,
                    event: EventKind::MapReintegrate,
                    ms: elapsed_ms(start),
                    nodes,
                });
            }
        }
    };
    while let Ok(first) = jobs.recv() {
        let job = jobs.try_iter().fold(first, |a, b| MapJob {
            t: b.t,
            full: a.full || b.full,
        });
        run(&mut grid, job, &mut timings);
    }
    // pick up nodes created after the last optimization
    run(&mut grid, MapJob { t: f64::NAN, full: false }, &mut timings);
    (grid, timings)
}

/// Runs the three workers concurrently until `scans` is exhausted.
pub fn run_online<I>(scans: I, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = LaserScan>,
{
    run_online_until(scans, cfg, &AtomicBool::new(false))
}

/// Like [`run_online`], but stops feeding scans as soon as `stop` is set. The
/// workers then drain their queues and the partial result is returned.
pub fn run_online_until<I>(scans: I, cfg: &PipelineConfig, stop: &AtomicBool) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = LaserScan>,
{
    cfg.validate()?;
    let graph = Arc::new(Mutex::new(PoseGraph::new(cfg.window_size)));
    let cap = cfg.channel_capacity;
    let (scan_tx, scan_rx) = sync_channel::<LaserScan>(cap);
    let (opt_tx, opt_rx) = sync_channel::<OptJob>(cap);
    let (map_tx, map_rx) = sync_channel::<MapJob>(cap);

    let tracker = {
        let (g, c) = (graph.clone(), cfg.clone());
        thread::spawn(move || tracking_worker(scan_rx, g, opt_tx, c))
    };
    let optimizer = {
        let (g, c) = (graph.clone(), cfg.clone());
        thread::spawn(move || optimizer_worker(opt_rx, g, map_tx, c))
    };
    let mapper = {
        let (g, c) = (graph.clone(), cfg.clone());
        thread::spawn(move || mapping_worker(map_rx, g, c))
    };

    let mut fed = 0;
    for scan in scans {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        if scan_tx.send(scan).is_err() {
            break;
        }
        fed += 1;
    }
    drop(scan_tx);

    let tracked = tracker.join().map_err(|_| PipelineError::WorkerPanic)?;
    let optimized = optimizer.join().map_err(|_| PipelineError::WorkerPanic)?;
    let (grid, map_timings) = mapper.join().map_err(|_| PipelineError::WorkerPanic)?;
    if fed == 0 {
        return Err(PipelineError::EmptyLog);
    }
    let graph = Arc::try_unwrap(graph)
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()))
        .unwrap_or_else(|shared| lock(&shared).clone());
    if graph.is_empty() {
        return Err(PipelineError::NothingTracked);
    }
    let mut timings = tracked.timings;
    timings.extend(optimized.timings);
    timings.extend(map_timings);
    Ok(PipelineOutput {
        trajectory: final_trajectory(&graph, &tracked.anchors),
        graph,
        grid,
        timings,
        matches: tracked.matches,
        loops: optimized.loops,
        scans: tracked.scans,
        degraded: tracked.degraded,
        final_offset: tracked.anchors.last().map_or(Pose2::identity(), |a| a.offset),
    })
}

/// Runs in the mode selected by the configuration.
pub fn run(scans: Vec<LaserScan>, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    match cfg.mode {
        Mode::Offline => run_offline(&scans, cfg),
        Mode::Online => run_online(scans, cfg),
    }
}

// ---- instrumentation ----

pub fn timings_csv(records: &[TimingRecord]) -> String {
    let mut out = String::from("timestamp,worker,event,ms,nodes\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.timestamp, r.worker.as_str(), r.event.as_str(), r.ms, r.nodes);
    }
    out
}

pub fn matches_csv(records: &[MatchRecord]) -> String {
    let mut out = String::from("timestamp,purpose,residual_sum,num_valid,converged,ms\n");
    for r in records {
        let purpose = match r.purpose {
            MatchPurpose::Tracking => "tracking",
            MatchPurpose::Proximity => "proximity",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.timestamp, purpose, r.residual_sum, r.num_valid, r.converged, r.elapsed_ms
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stat {
    pub count: usize,
    pub avg: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut count, mut sum, mut max) = (0, 0.0, 0.0f64);
        for v in values {
            count += 1;
            sum += v;
            max = max.max(v);
        }
        Self {
            count,
            avg: if count > 0 { sum / count as f64 } else { 0.0 },
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub scans: usize,
    pub degraded: usize,
    pub nodes: usize,
    pub constraints: usize,
    pub odometry: usize,
    pub proximity: usize,
    pub loop_constraints: usize,
    pub loop_events: usize,
    /// Odometry translation summed over the graph, plus the stretch driven
    /// since the last node.
    pub travelled_distance: f64,
    pub tracking_match_ms: Stat,
    pub proximity_match_ms: Stat,
    pub events: BTreeMap<EventKind, Stat>,
}

pub fn summarize(out: &PipelineOutput) -> Summary {
    let g = &out.graph;
    let match_stat = |p: MatchPurpose| Stat::of(out.matches.iter().filter(|m| m.purpose == p).map(|m| m.elapsed_ms));
    let mut events = BTreeMap::new();
    for kind in [
        EventKind::Track,
        EventKind::WindowOptimization,
        EventKind::FullOptimization,
        EventKind::MapInsert,
        EventKind::MapReintegrate,
    ] {
        events.insert(kind, Stat::of(out.timings.iter().filter(|r| r.event == kind).map(|r| r.ms)));
    }
    Summary {
        scans: out.scans,
        degraded: out.degraded,
        nodes: g.len(),
        constraints: g.constraints().len(),
        odometry: g.count_kind(ConstraintKind::Odometry),
        proximity: g.count_kind(ConstraintKind::Proximity),
        loop_constraints: g.count_kind(ConstraintKind::Loop),
        loop_events: out.loops.len(),
        travelled_distance: g.travelled_distance() + out.final_offset.translation_norm(),
        tracking_match_ms: match_stat(MatchPurpose::Tracking),
        proximity_match_ms: match_stat(MatchPurpose::Proximity),
        events,
    }
}

pub fn format_summary(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scans {}", s.scans);
    let _ = writeln!(out, "degraded_scans {}", s.degraded);
    let _ = writeln!(out, "nodes {}", s.nodes);
    let _ = writeln!(out, "constraints {}", s.constraints);
    let _ = writeln!(out, "odometry_constraints {}", s.odometry);
    let _ = writeln!(out, "proximity_constraints {}", s.proximity);
    let _ = writeln!(out, "loop_constraints {}", s.loop_constraints);
    let _ = writeln!(out, "loop_events {}", s.loop_events);
    let _ = writeln!(out, "travelled_distance_m {:.3}", s.travelled_distance);
    let mut stat = |name: &str, st: &Stat| {
        let _ = writeln!(out, "{name}_ms count {} avg {:.3} max {:.3}", st.count, st.avg, st.max);
    };
    stat("match_tracking", &s.tracking_match_ms);
    stat("match_proximity", &s.proximity_match_ms);
    for (k, st) in &s.events {
        stat(k.as_str(), st);
    }
    out
}
