//! Local tracking: keyframing, dense proximity edges and loop detection.
//!
//! Every scan is matched against the scan of the newest graph node. Once the
//! sensor has moved far enough from that node a new node is created, chained
//! to its predecessor by a robustified odometry edge, and matched against
//! every nearby older node. Edges to nodes at least `loop_min_index_gap`
//! indices back are loop closures.
//!
//! The graph is reached through [`GraphHandle`] so the same code drives a
//! plain [`PoseGraph`] offline and a shared, locked one online. The lock is
//! only held while reading or writing the graph, never while matching.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::Pose2;
use crate::graph::{Constraint, ConstraintKind, PoseGraph};
use crate::matching::{match_scans, LaserScan, MatchError, MatchResult, MatcherConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("tracker parameter {0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub keyframe_trans_thresh: f64,
    pub keyframe_rot_thresh: f64,
    pub proximity_radius: f64,
    pub loop_min_index_gap: usize,
    pub loop_search_radius: f64,
    /// Largest accepted mean squared point-to-line residual, in units of the
    /// range variance.
    pub loop_residual_gate: f64,
    /// Newest nodes skipped by the proximity search (already chained).
    pub exclude_last_k: usize,
    pub max_proximity_candidates: usize,
    pub max_loop_candidates: usize,
    /// Verify loop candidates by scan matching. When false a loop candidate
    /// is accepted from the odometry guess alone, with the odometry
    /// information.
    pub verify_loops: bool,
    /// Robustify proximity and loop edges too, not only odometry.
    pub robustify_all: bool,
    pub matcher: MatcherConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            keyframe_trans_thresh: 0.5,
            keyframe_rot_thresh: 0.3,
            proximity_radius: 3.0,
            loop_min_index_gap: 30,
            loop_search_radius: 5.0,
            loop_residual_gate: 9.0,
            exclude_last_k: 1,
            max_proximity_candidates: 5,
            max_loop_candidates: 5,
            verify_loops: true,
            robustify_all: false,
            matcher: MatcherConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let checks = [
            ("keyframe_trans_thresh", self.keyframe_trans_thresh),
            ("keyframe_rot_thresh", self.keyframe_rot_thresh),
            ("proximity_radius", self.proximity_radius),
            ("loop_min_index_gap", self.loop_min_index_gap as f64),
            ("loop_search_radius", self.loop_search_radius),
            ("loop_residual_gate", self.loop_residual_gate),
        ];
        for (name, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrackerError::NonPositive(name));
            }
        }
        Ok(())
    }
}

/// Access to a pose graph that may be shared with other threads.
pub trait GraphHandle {
    fn with_graph<R>(&mut self, f: impl FnOnce(&mut PoseGraph) -> R) -> R;
}

impl GraphHandle for PoseGraph {
    fn with_graph<R>(&mut self, f: impl FnOnce(&mut PoseGraph) -> R) -> R {
        f(self)
    }
}

impl GraphHandle for &Mutex<PoseGraph> {
    fn with_graph<R>(&mut self, f: impl FnOnce(&mut PoseGraph) -> R) -> R {
        let mut g = self.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut g)
    }
}

impl GraphHandle for Arc<Mutex<PoseGraph>> {
    fn with_graph<R>(&mut self, f: impl FnOnce(&mut PoseGraph) -> R) -> R {
        let mut g = self.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchPurpose {
    Tracking,
    Proximity,
}

/// Timing and quality of one scan match.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub timestamp: f64,
    pub purpose: MatchPurpose,
    pub elapsed_ms: f64,
    pub residual_sum: f64,
    pub num_valid: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub current_pose: Pose2,
    /// Motion between the last two tracked scans.
    pub last_motion: Pose2,
    pub latest_node_id: Option<usize>,
    /// Current pose relative to the latest node.
    pub offset: Pose2,
}

impl Default for TrackerState {
    fn default() -> Self {
        Self {
            current_pose: Pose2::identity(),
            last_motion: Pose2::identity(),
            latest_node_id: None,
            offset: Pose2::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingOutcome {
    pub timestamp: f64,
    pub pose: Pose2,
    /// Node the pose is expressed against, with `pose = anchor ⊕ offset`.
    pub anchor: Option<usize>,
    pub offset: Pose2,
    pub new_node: Option<usize>,
    pub new_constraints: Vec<Constraint>,
    pub loop_detected: bool,
    /// Matching failed and the pose was extrapolated.
    pub degraded: bool,
    pub matches: Vec<MatchRecord>,
}

/// Nodes within `radius` of `pose`, nearest first, skipping the newest
/// `exclude_last_k`. The ball is closed.
pub fn find_proximity_candidates(graph: &PoseGraph, pose: &Pose2, radius: f64, exclude_last_k: usize) -> Vec<usize> {
    let end = graph.len().saturating_sub(exclude_last_k);
    let p = pose.translation();
    let mut found: Vec<(f64, usize)> = graph.nodes()[..end]
        .iter()
        .map(|n| (n.pose.translation().distance(&p), n.id))
        .filter(|(d, _)| *d <= radius)
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.into_iter().map(|(_, id)| id).collect()
}

fn information(m: &MatchResult) -> Matrix3<f64> {
    let inv = m.covariance.try_inverse().unwrap_or_else(Matrix3::identity);
    (inv + inv.transpose()) * 0.5
}

fn timed_match(
    timestamp: f64,
    purpose: MatchPurpose,
    current: &LaserScan,
    reference: &LaserScan,
    guess: &Pose2,
    cfg: &MatcherConfig,
) -> (Result<MatchResult, MatchError>, Option<MatchRecord>) {
    let start = Instant::now();
    let result = match_scans(current, reference, guess, cfg);
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let record = result.as_ref().ok().map(|m| MatchRecord {
        timestamp,
        purpose,
        elapsed_ms,
        residual_sum: m.residual_sum,
        num_valid: m.num_valid,
        converged: m.converged,
    });
    (result, record)
}

/// Tracks one scan and extends the graph when it becomes a keyframe.
pub fn process_scan<G: GraphHandle>(
    state: &mut TrackerState,
    graph: &mut G,
    scan: Arc<LaserScan>,
    cfg: &TrackerConfig,
) -> TrackingOutcome {
    let t = scan.timestamp;
    let mut out = TrackingOutcome {
        timestamp: t,
        pose: state.current_pose,
        anchor: state.latest_node_id,
        offset: state.offset,
        new_node: None,
        new_constraints: Vec::new(),
        loop_detected: false,
        degraded: false,
        matches: Vec::new(),
    };

    let latest = graph.with_graph(|g| g.latest().map(|n| (n.id, n.scan.clone())));
    let Some((latest_id, Some(reference))) = latest else {
        if scan.num_valid() < cfg.matcher.min_valid_rays {
            out.degraded = true;
            return out;
        }
        let id = graph.with_graph(|g| g.add_node(Pose2::identity(), t, Some(scan.clone())));
        *state = TrackerState {
            latest_node_id: Some(id),
            ..TrackerState::default()
        };
        out.pose = Pose2::identity();
        out.anchor = Some(id);
        out.offset = Pose2::identity();
        out.new_node = Some(id);
        return out;
    };
    if state.latest_node_id != Some(latest_id) {
        // The graph gained a node we did not create; restart from it.
        state.latest_node_id = Some(latest_id);
        state.offset = Pose2::identity();
    }

    let guess = state.offset.compose(&state.last_motion);
    let (result, record) = timed_match(t, MatchPurpose::Tracking, &scan, &reference, &guess, &cfg.matcher);
    out.matches.extend(record);
    let q = match result {
        Ok(m) => m,
        Err(_) => {
            state.offset = guess;
            let pose = graph.with_graph(|g| g.node(latest_id).map(|n| n.pose)).unwrap_or_default();
            state.current_pose = pose.compose(&guess);
            out.pose = state.current_pose;
            out.offset = guess;
            out.anchor = Some(latest_id);
            out.degraded = true;
            return out;
        }
    };

    state.last_motion = state.offset.between(&q.q);
    state.offset = q.q;
    let is_keyframe =
        q.q.translation_norm() > cfg.keyframe_trans_thresh || q.q.theta.abs() > cfg.keyframe_rot_thresh;

    let odometry = Constraint::new(latest_id, latest_id + 1, q.q, information(&q), ConstraintKind::Odometry)
        .with_robustified(true);
    let inserted = graph.with_graph(|g| {
        let base = g.node(latest_id)?.pose;
        let pose = base.compose(&q.q);
        if !is_keyframe {
            return Some((pose, None));
        }
        let id = g.add_node(pose, t, Some(scan.clone()));
        debug_assert_eq!(id, latest_id + 1);
        g.add_constraint(odometry.clone()).ok()?;
        let near = |radius: f64| find_proximity_candidates(g, &pose, radius, cfg.exclude_last_k + 1);
        let mut cands: Vec<usize> = near(cfg.proximity_radius)
            .into_iter()
            .filter(|&c| id - c < cfg.loop_min_index_gap)
            .take(cfg.max_proximity_candidates)
            .collect();
        cands.extend(
            near(cfg.loop_search_radius)
                .into_iter()
                .filter(|&c| id - c >= cfg.loop_min_index_gap)
                .take(cfg.max_loop_candidates),
        );
        let cands: Vec<(usize, Pose2, Option<Arc<LaserScan>>)> = cands
            .into_iter()
            .filter(|&c| !g.has_constraint(c, id))
            .map(|c| {
                let n = g.node(c).expect("candidate exists");
                (c, n.pose, n.scan.clone())
            })
            .collect();
        Some((pose, Some((id, cands))))
    });
    let Some((pose, created)) = inserted else {
        out.degraded = true;
        return out;
    };
    state.current_pose = pose;
    out.pose = pose;
    out.anchor = Some(latest_id);
    out.offset = q.q;
    let Some((id, cands)) = created else {
        return out;
    };
    state.latest_node_id = Some(id);
    state.offset = Pose2::identity();
    out.new_node = Some(id);
    out.anchor = Some(id);
    out.offset = Pose2::identity();
    out.new_constraints.push(odometry);

    let mut accepted = Vec::new();
    for (c, cpose, cscan) in cands {
        let Some(cscan) = cscan else { continue };
        let kind = if id - c >= cfg.loop_min_index_gap {
            ConstraintKind::Loop
        } else {
            ConstraintKind::Proximity
        };
        let guess = cpose.between(&pose);
        let constraint = if kind == ConstraintKind::Loop && !cfg.verify_loops {
            Some(Constraint::new(c, id, guess, information(&q), kind))
        } else {
            let (result, record) = timed_match(t, MatchPurpose::Proximity, &scan, &cscan, &guess, &cfg.matcher);
            out.matches.extend(record);
            match result {
                Ok(m) if m.converged && m.normalized_residual(cfg.matcher.covariance.sigma_range) < cfg.loop_residual_gate => {
                    Some(Constraint::new(c, id, m.q, information(&m), kind))
                }
                _ => None,
            }
        };
        if let Some(mut con) = constraint {
            if cfg.robustify_all {
                con.robustified = true;
            }
            accepted.push(con);
        }
    }
    let added = graph.with_graph(|g| {
        accepted
            .into_iter()
            .filter_map(|con| g.add_constraint(con.clone()).ok().map(|_| con))
            .collect::<Vec<_>>()
    });
    out.loop_detected = added.iter().any(|c| c.kind == ConstraintKind::Loop);
    out.new_constraints.extend(added);
    out
}
