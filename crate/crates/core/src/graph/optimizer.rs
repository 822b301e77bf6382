//! IRLS over Levenberg-Marquardt.
//!
//! Each reweighting round freezes `w = ρ'(r)/r` for the robustified
//! constraints and runs damped Gauss-Newton on the surrogate
//! `Σ ½ w eᵀΩe`. Every linear solve counts against a shared step budget.

use nalgebra::{DMatrix, DVector, Matrix3};

use super::{constraint_cost, error_vector, residual, Constraint, GraphError, PoseGraph};
use crate::geometry::Pose2;
use crate::kernel::BarronKernel;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub max_rounds: usize,
    pub max_lm_iterations: usize,
    /// Linear solves allowed across all rounds.
    pub max_solver_steps: usize,
    /// Relative cost change below which iteration stops.
    pub rel_tol: f64,
    /// Initial damping as a fraction of the largest diagonal entry.
    pub initial_damping: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_rounds: 10,
            max_lm_iterations: 10,
            max_solver_steps: 100,
            rel_tol: 1e-9,
            initial_damping: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    /// Cost of the constraints touching free nodes, before and after.
    pub initial_cost: f64,
    pub final_cost: f64,
    pub rounds: usize,
    pub solver_steps: usize,
    pub accepted_steps: usize,
    pub converged: bool,
    pub free_nodes: usize,
    pub constraints_used: usize,
    /// New poses of the free nodes.
    pub updated: Vec<(usize, Pose2)>,
}

/// Jacobians of [`error_vector`] with respect to `xi` and `xj`.
pub(crate) fn error_jacobians(xi: &Pose2, xj: &Pose2) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = xi.theta.sin_cos();
    let dx = xj.x - xi.x;
    let dy = xj.y - xi.y;
    let ji = Matrix3::new(
        -c,
        -s,
        -s * dx + c * dy,
        s,
        -c,
        -c * dx - s * dy,
        0.0,
        0.0,
        -1.0,
    );
    let jj = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
    (ji, jj)
}

struct Problem<'a> {
    graph: &'a PoseGraph,
    free: Vec<usize>,
    constraints: Vec<&'a Constraint>,
    kernel: BarronKernel,
}

impl Problem<'_> {
    fn slot(&self, id: usize) -> Option<usize> {
        self.free.binary_search(&id).ok()
    }

    fn pose(&self, x: &[Pose2], id: usize) -> Pose2 {
        match self.slot(id) {
            Some(k) => x[k],
            None => self.graph.nodes[id].pose,
        }
    }

    fn cost(&self, x: &[Pose2]) -> f64 {
        self.constraints
            .iter()
            .map(|c| constraint_cost(c, &self.pose(x, c.i), &self.pose(x, c.j), &self.kernel))
            .sum()
    }

    fn weights(&self, x: &[Pose2]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| {
                if c.robustified {
                    let e = error_vector(&self.pose(x, c.i), &self.pose(x, c.j), &c.z);
                    self.kernel.weight(residual(&e, &c.omega))
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn surrogate(&self, x: &[Pose2], w: &[f64]) -> f64 {
        self.constraints
            .iter()
            .zip(w)
            .map(|(c, w)| {
                let e = error_vector(&self.pose(x, c.i), &self.pose(x, c.j), &c.z);
                0.5 * w * e.dot(&(c.omega * e))
            })
            .sum()
    }

    fn normal_equations(&self, x: &[Pose2], w: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = 3 * self.free.len();
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for (c, &wc) in self.constraints.iter().zip(w) {
            let xi = self.pose(x, c.i);
            let xj = self.pose(x, c.j);
            let e = error_vector(&xi, &xj, &c.z);
            let (ji, jj) = error_jacobians(&xi, &xj);
            let om = c.omega * wc;
            let blocks = [(self.slot(c.i), ji), (self.slot(c.j), jj)];
            for (sa, ja) in &blocks {
                let Some(a) = sa else { continue };
                let g = ja.transpose() * om * e;
                for r in 0..3 {
                    b[3 * a + r] += g[r];
                }
                for (sb, jb) in &blocks {
                    let Some(bb) = sb else { continue };
                    let blk = ja.transpose() * om * jb;
                    for r in 0..3 {
                        for col in 0..3 {
                            h[(3 * a + r, 3 * bb + col)] += blk[(r, col)];
                        }
                    }
                }
            }
        }
        (h, b)
    }
}

fn retract(x: &[Pose2], dx: &DVector<f64>) -> Vec<Pose2> {
    x.iter()
        .enumerate()
        .map(|(k, p)| Pose2::new(p.x + dx[3 * k], p.y + dx[3 * k + 1], p.theta + dx[3 * k + 2]))
        .collect()
}

fn relative_change(old: f64, new: f64) -> f64 {
    if old == 0.0 {
        0.0
    } else {
        (old - new).abs() / old.abs()
    }
}

/// Optimizes the poses of `free` against all constraints touching them.
///
/// Nodes outside `free` that share a constraint with a free node act as fixed
/// anchors; at least one must exist. On success the graph holds the best
/// poses found, which never cost more than the starting ones.
pub fn optimize(
    graph: &mut PoseGraph,
    free: &[usize],
    kernel: &BarronKernel,
    cfg: &OptimizerConfig,
) -> Result<OptimizeReport, GraphError> {
    let mut free = free.to_vec();
    free.sort_unstable();
    free.dedup();
    if free.is_empty() {
        return Err(GraphError::EmptyActiveSet);
    }
    if let Some(&bad) = free.iter().find(|&&id| id >= graph.len()) {
        return Err(GraphError::UnknownNode(bad));
    }
    let mut used: Vec<usize> = free.iter().flat_map(|&id| graph.constraints_of(id).iter().copied()).collect();
    used.sort_unstable();
    used.dedup();

    let (best, report) = {
        let problem = Problem {
            graph,
            constraints: used.iter().map(|&k| &graph.constraints[k]).collect(),
            free,
            kernel: *kernel,
        };
        let anchored = problem
            .constraints
            .iter()
            .any(|c| problem.slot(c.i).is_none() || problem.slot(c.j).is_none());
        if !anchored {
            return Err(GraphError::NoAnchor);
        }
        solve(&problem, cfg)?
    };
    graph.set_poses(&report.updated);
    debug_assert!(best <= report.initial_cost);
    Ok(report)
}

fn solve(p: &Problem<'_>, cfg: &OptimizerConfig) -> Result<(f64, OptimizeReport), GraphError> {
    let x0: Vec<Pose2> = p.free.iter().map(|&id| p.graph.nodes[id].pose).collect();
    let initial_cost = p.cost(&x0);
    let mut x = x0;
    let mut best = (initial_cost, x.clone());
    let mut steps = 0;
    let mut accepted = 0;
    let mut rounds = 0;
    let mut converged = false;
    let mut mu: Option<f64> = None;
    let mut prev_cost = initial_cost;

    'outer: for _ in 0..cfg.max_rounds {
        if steps >= cfg.max_solver_steps {
            break;
        }
        rounds += 1;
        let w = p.weights(&x);
        let mut s_cur = p.surrogate(&x, &w);
        for _ in 0..cfg.max_lm_iterations {
            if s_cur == 0.0 {
                break;
            }
            let (h, b) = p.normal_equations(&x, &w);
            let damping = *mu.get_or_insert_with(|| {
                let d = h.diagonal().max();
                if d > 0.0 {
                    cfg.initial_damping * d
                } else {
                    cfg.initial_damping
                }
            });
            let mut damped = h.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += damping;
            }
            if steps >= cfg.max_solver_steps {
                break 'outer;
            }
            steps += 1;
            let Some(chol) = damped.cholesky() else {
                let next = damping * 10.0;
                if !next.is_finite() || next > 1e30 {
                    return Err(GraphError::Singular);
                }
                mu = Some(next);
                continue;
            };
            let dx = chol.solve(&(-&b));
            let x_new = retract(&x, &dx);
            let s_new = p.surrogate(&x_new, &w);
            if s_new.is_finite() && s_new <= s_cur {
                accepted += 1;
                mu = Some((damping / 10.0).max(1e-300));
                let rel = relative_change(s_cur, s_new);
                x = x_new;
                s_cur = s_new;
                if rel < cfg.rel_tol {
                    break;
                }
            } else {
                mu = Some(damping * 10.0);
            }
        }
        let c = p.cost(&x);
        if c < best.0 {
            best = (c, x.clone());
        }
        if c == 0.0 || relative_change(prev_cost, c) < cfg.rel_tol {
            converged = true;
            break;
        }
        prev_cost = c;
    }

    let (final_cost, poses) = best;
    let updated = p.free.iter().copied().zip(poses).collect();
    Ok((
        final_cost,
        OptimizeReport {
            initial_cost,
            final_cost,
            rounds,
            solver_steps: steps,
            accepted_steps: accepted,
            converged,
            free_nodes: p.free.len(),
            constraints_used: p.constraints.len(),
            updated,
        },
    ))
}

/// Optimizes the newest `window_size` nodes with the oldest of them fixed.
pub fn optimize_window(
    graph: &mut PoseGraph,
    kernel: &BarronKernel,
    cfg: &OptimizerConfig,
) -> Result<OptimizeReport, GraphError> {
    let n = graph.len();
    if n < 2 {
        return Err(GraphError::TooFewNodes(2));
    }
    let start = n.saturating_sub(graph.window_size);
    let free: Vec<usize> = (start + 1..n).collect();
    optimize(graph, &free, kernel, cfg)
}

/// Optimizes every node except node 0.
pub fn optimize_full(
    graph: &mut PoseGraph,
    kernel: &BarronKernel,
    cfg: &OptimizerConfig,
) -> Result<OptimizeReport, GraphError> {
    let n = graph.len();
    if n < 2 {
        return Err(GraphError::TooFewNodes(2));
    }
    let free: Vec<usize> = (1..n).collect();
    optimize(graph, &free, kernel, cfg)
}
