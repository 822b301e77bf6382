//! Pose graph storage and costs.
//!
//! The error of a constraint is the difference between the predicted relative
//! pose `between(x_i, x_j)` and the measurement `z_ij`, with the angle part
//! wrapped. Its whitened size is `r = sqrt(eᵀ Ω e)`. Plain constraints cost
//! `½ r²`; robustified constraints cost `ρ(r)` under a [`BarronKernel`].

mod optimizer;

use std::sync::Arc;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose2};
use crate::kernel::BarronKernel;
use crate::matching::LaserScan;

pub use optimizer::{optimize, optimize_full, optimize_window, OptimizeReport, OptimizerConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("constraint connects node {0} to itself")]
    SelfLoop(usize),
    #[error("odometry constraint {0} -> {1} is not between consecutive nodes")]
    OdometryNotConsecutive(usize, usize),
    #[error("information matrix is not symmetric positive semi-definite")]
    BadInformation,
    #[error("no free nodes to optimize")]
    EmptyActiveSet,
    #[error("graph has fewer than {0} nodes")]
    TooFewNodes(usize),
    #[error("no constraint links the free nodes to a fixed node")]
    NoAnchor,
    #[error("normal equations stayed singular under maximum damping")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    Odometry,
    Proximity,
    Loop,
}

impl ConstraintKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConstraintKind::Odometry => "odometry",
            ConstraintKind::Proximity => "proximity",
            ConstraintKind::Loop => "loop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "odometry" => Some(ConstraintKind::Odometry),
            "proximity" => Some(ConstraintKind::Proximity),
            "loop" => Some(ConstraintKind::Loop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub pose: Pose2,
    pub timestamp: f64,
    pub scan: Option<Arc<LaserScan>>,
    /// Pose at which the scan was last written into the map.
    pub last_map_pose: Option<Pose2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub i: usize,
    pub j: usize,
    /// Measured pose of `j` in the frame of `i`.
    pub z: Pose2,
    pub omega: Matrix3<f64>,
    pub kind: ConstraintKind,
    pub robustified: bool,
}

impl Constraint {
    /// Odometry constraints are robustified; the others are not.
    pub fn new(i: usize, j: usize, z: Pose2, omega: Matrix3<f64>, kind: ConstraintKind) -> Self {
        Self {
            i,
            j,
            z,
            omega,
            kind,
            robustified: kind == ConstraintKind::Odometry,
        }
    }

    pub fn with_robustified(mut self, robustified: bool) -> Self {
        self.robustified = robustified;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    constraints: Vec<Constraint>,
    /// Constraint indices touching each node.
    adjacency: Vec<Vec<usize>>,
    pub window_size: usize,
}

impl Default for PoseGraph {
    fn default() -> Self {
        Self::new(10)
    }
}

impl PoseGraph {
    pub fn new(window_size: usize) -> Self {
        Self {
            nodes: Vec::new(),
            constraints: Vec::new(),
            adjacency: Vec::new(),
            window_size: window_size.max(2),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&GraphNode> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: usize) -> Option<&mut GraphNode> {
        self.nodes.get_mut(id)
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn latest(&self) -> Option<&GraphNode> {
        self.nodes.last()
    }

    pub fn poses(&self) -> Vec<Pose2> {
        self.nodes.iter().map(|n| n.pose).collect()
    }

    /// Indices of the constraints touching `id`.
    pub fn constraints_of(&self, id: usize) -> &[usize] {
        self.adjacency.get(id).map_or(&[], |v| v.as_slice())
    }

    pub fn add_node(&mut self, pose: Pose2, timestamp: f64, scan: Option<Arc<LaserScan>>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(GraphNode {
            id,
            pose,
            timestamp,
            scan,
            last_map_pose: None,
        });
        self.adjacency.push(Vec::new());
        id
    }

    pub fn add_constraint(&mut self, c: Constraint) -> Result<usize, GraphError> {
        for id in [c.i, c.j] {
            if id >= self.nodes.len() {
                return Err(GraphError::UnknownNode(id));
            }
        }
        if c.i == c.j {
            return Err(GraphError::SelfLoop(c.i));
        }
        if c.kind == ConstraintKind::Odometry && c.j != c.i + 1 {
            return Err(GraphError::OdometryNotConsecutive(c.i, c.j));
        }
        if !is_information(&c.omega) {
            return Err(GraphError::BadInformation);
        }
        let idx = self.constraints.len();
        self.adjacency[c.i].push(idx);
        self.adjacency[c.j].push(idx);
        self.constraints.push(c);
        Ok(idx)
    }

    /// True if some constraint already links `a` and `b` (either direction).
    pub fn has_constraint(&self, a: usize, b: usize) -> bool {
        self.constraints_of(a).iter().any(|&k| {
            let c = &self.constraints[k];
            (c.i == a && c.j == b) || (c.i == b && c.j == a)
        })
    }

    /// Writes new poses for existing nodes. Nodes beyond the end of `poses`
    /// keep their pose.
    pub fn set_poses(&mut self, poses: &[(usize, Pose2)]) {
        for &(id, p) in poses {
            if let Some(n) = self.nodes.get_mut(id) {
                n.pose = p;
            }
        }
    }

    /// Applies an optimization result computed on a snapshot of the first
    /// `snapshot_len` nodes. Nodes added since the snapshot are moved rigidly
    /// with the newest node the snapshot shared.
    pub fn commit(&mut self, snapshot_len: usize, updated: &[(usize, Pose2)]) {
        let shared = snapshot_len.min(self.nodes.len());
        if shared == 0 {
            return;
        }
        let anchor = shared - 1;
        let before = self.nodes[anchor].pose;
        for &(id, p) in updated {
            if id < shared {
                self.nodes[id].pose = p;
            }
        }
        let after = self.nodes[anchor].pose;
        if before == after {
            return;
        }
        let delta = after.compose(&before.inverse());
        for n in &mut self.nodes[shared..] {
            n.pose = delta.compose(&n.pose);
        }
    }

    /// Total odometry translation, meters.
    pub fn travelled_distance(&self) -> f64 {
        self.constraints
            .iter()
            .filter(|c| c.kind == ConstraintKind::Odometry)
            .map(|c| c.z.translation_norm())
            .sum()
    }

    pub fn count_kind(&self, kind: ConstraintKind) -> usize {
        self.constraints.iter().filter(|c| c.kind == kind).count()
    }
}

fn is_information(omega: &Matrix3<f64>) -> bool {
    if !omega.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = omega.abs().max().max(1.0);
    if (omega - omega.transpose()).abs().max() > 1e-9 * scale {
        return false;
    }
    let sym = 0.5 * (omega + omega.transpose());
    SymmetricEigen::new(sym).eigenvalues.iter().all(|&v| v >= -1e-9 * scale)
}

/// `between(xi, xj) - z` with the angle difference wrapped.
pub fn error_vector(xi: &Pose2, xj: &Pose2, z: &Pose2) -> Vector3<f64> {
    let pred = xi.between(xj);
    Vector3::new(pred.x - z.x, pred.y - z.y, wrap_angle(pred.theta - z.theta))
}

/// Whitened residual `sqrt(eᵀ Ω e)`.
pub fn residual(e: &Vector3<f64>, omega: &Matrix3<f64>) -> f64 {
    e.dot(&(omega * e)).max(0.0).sqrt()
}

/// Cost of one constraint under the plain/robust convention.
pub fn constraint_cost(c: &Constraint, xi: &Pose2, xj: &Pose2, kernel: &BarronKernel) -> f64 {
    let r = residual(&error_vector(xi, xj, &c.z), &c.omega);
    if c.robustified {
        kernel.rho(r)
    } else {
        0.5 * r * r
    }
}

/// Sum of constraint costs with `poses[id]` as the state of node `id`.
pub fn total_cost(graph: &PoseGraph, poses: &[Pose2], kernel: &BarronKernel) -> f64 {
    graph
        .constraints
        .iter()
        .map(|c| constraint_cost(c, &poses[c.i], &poses[c.j], kernel))
        .sum()
}
