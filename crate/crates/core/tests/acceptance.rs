//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use slam2d::covariance::{correspondence_slots, hessian_xx, hessian_xz, MeasurementVector};
use slam2d::eval::{ate, rpe, RpeDelta, Trajectory};
use slam2d::frontend::TrackerConfig;
use slam2d::graph::{optimize_full, optimize_window, Constraint, ConstraintKind, OptimizerConfig, PoseGraph};
use slam2d::matching::correspondence::{find_correspondences_in, segment_normal, Correspondence};
use slam2d::matching::{build_normal_system, multiplier_roots, plicp_step, quartic_coefficients, scan_to_points, ScanPoint};
use slam2d::occupancy::{bresenham, Cell, GridParams, OccupancyGrid};
use slam2d::pipeline::{run_offline, run_online, EventKind, Mode, PipelineConfig, PipelineOutput, Worker};
use slam2d::sim::{fixtures, generate_log, generate_scans, raycast, raycast_exact, LidarSpec, Segment, World};
use slam2d::{match_scans, BarronKernel, LaserScan, MatcherConfig, Point2, Pose2};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("PLICP step matches brute-force minimization", c1_plicp_oracle),
        ("quartic roots satisfy the unit constraint", c2_secular),
        ("closed-form covariance", c3_covariance),
        ("robust kernel family", c4_kernel),
        ("Cauchy beats L2 under outlier constraints", c5_robustness),
        ("sliding-window contracts", c6_window),
        ("occupancy map", c7_occupancy),
        ("end-to-end valley run (offline)", c8_end_to_end),
        ("online repeatability", c9_repeatability),
        ("matching speed and flat tracking latency", c10_performance),
        ("determinism", c11_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict} {name} ({:.1} s): {}", k + 1, t.elapsed().as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---- 1 ----

/// Two walls meeting at a random corner, sampled with noise.
fn corner_fixture(rng: &mut ChaCha8Rng) -> (Vec<Point2>, Vec<Point2>, Vec<Correspondence>) {
    let n = rng.gen_range(10..=100);
    let sigma: f64 = rng.gen_range(0.0..=0.02);
    let noise = Normal::new(0.0, sigma.max(1e-12)).unwrap();
    let corner = Point2::new(rng.gen_range(2.0..4.0), rng.gen_range(1.5..3.0));
    let a1 = rng.gen_range(0.0..PI);
    let a2 = a1 + rng.gen_range(0.6..2.5);
    let along = |a: f64, s: f64| corner.add(&Point2::from_polar(s, a));
    let clean: Vec<Point2> = (0..n)
        .flat_map(|k| {
            let s = 0.1 + 3.0 * k as f64 / n as f64;
            [along(a1, s), along(a2, s)]
        })
        .collect();
    let q = Pose2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.1..0.1));
    let mut jitter = |p: &Point2| Point2::new(p.x + noise.sample(rng), p.y + noise.sample(rng));
    let reference: Vec<Point2> = clean.iter().map(&mut jitter).collect();
    let current: Vec<Point2> = clean.iter().map(|p| q.inverse().transform_point(&jitter(p))).collect();
    let moved: Vec<Point2> = current.iter().map(|p| q.transform_point(p)).collect();
    let corrs = find_correspondences_in(&moved, &reference, 1.0).unwrap();
    (current, reference, corrs)
}

fn point_to_line(corrs: &[Correspondence], cur: &[Point2], refs: &[Point2], x: f64, y: f64, th: f64) -> f64 {
    let (s, c) = th.sin_cos();
    corrs
        .iter()
        .map(|k| {
            let p = cur[k.i];
            let px = c * p.x - s * p.y + x - refs[k.j1].x;
            let py = s * p.x + c * p.y + y - refs[k.j1].y;
            let r = k.n.x * px + k.n.y * py;
            r * r
        })
        .sum()
}

/// For fixed θ the cost is a linear least-squares problem in t; solve it
/// exactly and scan θ on a grid, then refine the grid around the best cell.
fn brute_force(corrs: &[Correspondence], cur: &[Point2], refs: &[Point2]) -> Pose2 {
    let best_t = |th: f64| -> (f64, f64, f64) {
        let (s, c) = th.sin_cos();
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in corrs {
            let p = cur[k.i];
            let (nx, ny) = (k.n.x, k.n.y);
            let off = nx * (c * p.x - s * p.y - refs[k.j1].x) + ny * (s * p.x + c * p.y - refs[k.j1].y);
            a11 += nx * nx;
            a12 += nx * ny;
            a22 += ny * ny;
            b1 -= nx * off;
            b2 -= ny * off;
        }
        let det = a11 * a22 - a12 * a12;
        let x = (a22 * b1 - a12 * b2) / det;
        let y = (a11 * b2 - a12 * b1) / det;
        (x, y, point_to_line(corrs, cur, refs, x, y, th))
    };
    let (mut lo, mut hi) = (-0.6, 0.6);
    let mut best = (0.0, f64::INFINITY);
    for _ in 0..8 {
        let steps = 400;
        for k in 0..=steps {
            let th = lo + (hi - lo) * k as f64 / steps as f64;
            let f = best_t(th).2;
            if f < best.1 {
                best = (th, f);
            }
        }
        let w = (hi - lo) / steps as f64;
        (lo, hi) = (best.0 - 2.0 * w, best.0 + 2.0 * w);
    }
    let (x, y, _) = best_t(best.0);
    Pose2::new(x, y, best.0)
}

/// Polynomial value with error-free transformations, accurate as if
/// evaluated in twice the working precision.
fn compensated_horner(p: &[f64], x: f64) -> f64 {
    let two_sum = |a: f64, b: f64| {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    };
    let two_prod = |a: f64, b: f64| {
        let m = a * b;
        (m, a.mul_add(b, -m))
    };
    let (mut s, mut err) = (p[0], 0.0);
    for &c in &p[1..] {
        let (m, pe) = two_prod(s, x);
        let (t, se) = two_sum(m, c);
        s = t;
        err = err * x + (pe + se);
    }
    s + err
}

fn c1_plicp_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_t, mut worst_th, mut worst_res) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (cur, refs, corrs) = corner_fixture(&mut rng);
        let sys = build_normal_system(&corrs, &cur, &refs).unwrap();
        let step = plicp_step(&sys).unwrap();
        let oracle = brute_force(&corrs, &cur, &refs);
        worst_t = worst_t.max(step.translation().distance(&oracle.translation()));
        worst_th = worst_th.max((step.theta - oracle.theta).abs());

        let p = quartic_coefficients(&sys).unwrap();
        for lambda in multiplier_roots(&sys).unwrap() {
            let v = compensated_horner(&p, lambda);
            worst_res = worst_res.max(v.abs() / (p[0].abs() * lambda.abs().powi(4).max(1.0)));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_t < 1e-3 && worst_th < 1e-3 && worst_res < 1e-9 && secs < 5.0,
        format!("max |dt| {worst_t:.2e} m, max |dθ| {worst_th:.2e} rad, max quartic residual {worst_res:.2e}, {secs:.2} s"),
    )
}

// ---- 2 ----

fn c2_secular() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut roots) = (0.0f64, 0);
    for _ in 0..100 {
        let (cur, refs, corrs) = corner_fixture(&mut rng);
        let sys = build_normal_system(&corrs, &cur, &refs).unwrap();
        for lambda in multiplier_roots(&sys).unwrap() {
            let n: Matrix4<f64> = 2.0 * sys.m + 2.0 * lambda * sys.w;
            let Some(ni) = n.try_inverse() else { continue };
            let v = (sys.g.transpose() * ni * sys.w * ni.transpose() * sys.g)[(0, 0)];
            worst = worst.max((v - 1.0).abs());
            roots += 1;
        }
    }
    outcome(worst < 1e-6 && roots >= 100, format!("{roots} roots, max |gᵀN⁻¹WN⁻ᵀg - 1| {worst:.2e}"))
}

// ---- 3 ----

fn orthogonal_walls() -> World {
    World::new(
        "walls",
        vec![
            Segment { a: Point2::new(4.0, -10.0), b: Point2::new(4.0, 3.0) },
            Segment { a: Point2::new(-10.0, 3.0), b: Point2::new(4.0, 3.0) },
        ],
    )
    .unwrap()
}

// Point-to-line cost with normals recomputed from perturbed ranges.
// `dz` holds (slot, which, delta) with which = 0 for ρ_i, 1 for ρ_j1, 2 for ρ_j2.
fn cost_of_ranges(
    corrs: &[Correspondence],
    cur: &[ScanPoint],
    refs: &[ScanPoint],
    x: &Vector3<f64>,
    dz: Option<(usize, usize, f64)>,
) -> f64 {
    let q = Pose2::new(x[0], x[1], x[2]);
    let bump = |slot: usize, which: usize| match dz {
        Some((s, w, d)) if s == slot && w == which => d,
        _ => 0.0,
    };
    corrs
        .iter()
        .map(|c| {
            let pi = cur[c.i].direction.scale(cur[c.i].range + bump(c.i, 0));
            let p1 = refs[c.j1].direction.scale(refs[c.j1].range + bump(c.i, 1));
            let p2 = refs[c.j2].direction.scale(refs[c.j2].range + bump(c.i, 2));
            let n = segment_normal(&p1, &p2).unwrap();
            let r = n.dot(&q.transform_point(&pi).sub(&p1));
            r * r
        })
        .sum()
}

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn c3_covariance() -> Outcome {
    let t0 = Instant::now();
    let world = orthogonal_walls();
    // Two-degree rays keep neighbouring returns ~14 cm apart. That is well
    // above the 3 cm range noise, so segment normals stay meaningful under
    // noise, and well above the 4 mm range step of the normal derivative.
    let spec = LidarSpec {
        increment: 2f64.to_radians(),
        range_noise_sigma: 0.03,
        ..LidarSpec::default()
    };
    let q = Pose2::new(0.12, -0.07, 0.03);
    let r0 = raycast_exact(&world, &Pose2::identity(), &spec, 0.0);
    let c0 = raycast_exact(&world, &q, &spec, 0.0);
    let refs = scan_to_points(&r0);
    let cur = scan_to_points(&c0);
    let ref_pts: Vec<Point2> = refs.iter().map(|p| p.point).collect();
    let moved: Vec<Point2> = cur.iter().map(|p| q.transform_point(&p.point)).collect();
    let corrs = find_correspondences_in(&moved, &ref_pts, 1.0).unwrap();

    let x0 = q.to_vector();
    let h = hessian_xx(&corrs, &cur, &refs, &q);
    let e = 1e-5;
    let mut fd = DMatrix::zeros(3, 3);
    for a in 0..3 {
        for b in 0..3 {
            let f = |sa: f64, sb: f64| {
                let mut x = x0;
                x[a] += sa * e;
                x[b] += sb * e;
                cost_of_ranges(&corrs, &cur, &refs, &x, None)
            };
            fd[(a, b)] = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) / (4.0 * e * e);
        }
    }
    let err_xx = rel_frobenius(&DMatrix::from_fn(3, 3, |r, c| h[(r, c)]), &fd);

    let slots = correspondence_slots(cur.len(), &corrs);
    let z = MeasurementVector::new(&slots, &cur, &refs);
    let hxz = hessian_xz(&slots, &cur, &refs, &q, &z);
    let mut fd = DMatrix::zeros(3, 3 * cur.len());
    for c in &corrs {
        for which in 0..3 {
            for a in 0..3 {
                let f = |sx: f64, sz: f64| {
                    let mut x = x0;
                    x[a] += sx * e;
                    cost_of_ranges(&corrs, &cur, &refs, &x, Some((c.i, which, sz * e)))
                };
                fd[(a, 3 * c.i + which)] = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) / (4.0 * e * e);
            }
        }
    }
    let err_xz = rel_frobenius(&hxz, &fd);

    let cfg = MatcherConfig::default();
    let closed = match_scans(&c0, &r0, &q, &cfg).unwrap().covariance;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut samples = Vec::new();
    for _ in 0..1000 {
        let r = raycast(&world, &Pose2::identity(), &spec, 0.0, &mut rng);
        let c = raycast(&world, &q, &spec, 0.0, &mut rng);
        if let Ok(m) = match_scans(&c, &r, &q, &cfg) {
            samples.push(m.q.to_vector());
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Vector3::zeros(), |a, v| a + v) / n;
    let mc: Matrix3<f64> = samples.iter().fold(Matrix3::zeros(), |a, v| a + (v - mean) * (v - mean).transpose()) / (n - 1.0);
    let ratios: Vec<f64> = (0..3).map(|k| closed[(k, k)] / mc[(k, k)]).collect();
    let within = ratios.iter().all(|r| (0.5..=2.0).contains(r));
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        err_xx < 1e-4 && err_xz < 1e-3 && within && samples.len() == 1000 && secs < 60.0,
        format!(
            "hessian_xx rel err {err_xx:.1e}, hessian_xz rel err {err_xz:.1e}, closed/MC diagonal ratios {:.2} {:.2} {:.2}, {secs:.1} s",
            ratios[0], ratios[1], ratios[2]
        ),
    )
}

// ---- 4 ----

fn c4_kernel() -> Outcome {
    let closed: [(f64, fn(f64) -> f64); 4] = [
        (2.0, |x| 0.5 * x * x),
        (0.0, |x| (0.5 * x * x).ln_1p()),
        (-2.0, |x| 2.0 * x * x / (x * x + 4.0)),
        (f64::NEG_INFINITY, |x| 1.0 - (-0.5 * x * x).exp()),
    ];
    let mut worst_closed = 0.0f64;
    for c in [0.5, 1.0, 2.0] {
        for (alpha, f) in closed {
            let k = BarronKernel::new(alpha, c).unwrap();
            for i in 0..=10_000 {
                let r = i as f64 * 0.01;
                let expect = f(r / c);
                worst_closed = worst_closed.max((k.rho(r) - expect).abs() / expect.abs().max(1.0));
            }
        }
    }

    let alphas = [2.0, 1.5, 1.0, 0.5, 0.0, -0.5, -1.0, -2.0, -5.0, -20.0, f64::NEG_INFINITY];
    let (mut worst_fd, mut checked, mut flat) = (0.0f64, 0, 0);
    let mut monotone = true;
    for alpha in alphas {
        for c in [0.5, 1.0, 2.0] {
            let k = BarronKernel::new(alpha, c).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..=500 {
                // r from 1e-3 to 100, log-spaced
                let r = 1e-3 * 10f64.powf(5.0 * i as f64 / 500.0);
                let w = k.weight(r);
                if alpha < 2.0 && w > prev {
                    monotone = false;
                }
                prev = w;
                let h = 1e-4 * r;
                let d = w * r;
                // Deep in the saturated tail ρ moves by less than its own
                // rounding error over the step.
                if d * h <= 1e-7 * k.rho(r) {
                    flat += 1;
                    continue;
                }
                let fd = (k.rho(r + h) - k.rho(r - h)) / (2.0 * h);
                worst_fd = worst_fd.max((fd / r - w).abs() / w.abs());
                checked += 1;
            }
        }
    }
    outcome(
        worst_closed < 1e-9 && worst_fd < 1e-6 && monotone,
        format!(
            "closed forms max err {worst_closed:.1e}; weight vs ρ'/r max rel err {worst_fd:.1e} over {checked} points ({flat} saturated points skipped); monotone {monotone}"
        ),
    )
}

// ---- 5 ----

fn loop_graph(seed: u64) -> (PoseGraph, Vec<Pose2>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 30;
    let radius = 5.0;
    let gt: Vec<Pose2> = (0..n)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / n as f64 - 0.5 * PI;
            Pose2::new(radius * phi.cos(), radius * phi.sin(), phi + 0.5 * PI)
        })
        .collect();
    let (st, sr) = (0.05, 0.02);
    let nt = Normal::new(0.0, st).unwrap();
    let nr = Normal::new(0.0, sr).unwrap();
    let omega = Matrix3::from_diagonal(&Vector3::new(1.0 / (st * st), 1.0 / (st * st), 1.0 / (sr * sr)));
    let noisy = |z: Pose2, rng: &mut ChaCha8Rng| Pose2::new(z.x + nt.sample(rng), z.y + nt.sample(rng), z.theta + nr.sample(rng));

    let odometry: Vec<Pose2> = (0..n - 1).map(|k| noisy(gt[k].between(&gt[k + 1]), &mut rng)).collect();
    let mut g = PoseGraph::new(10);
    let mut pose = Pose2::identity();
    for k in 0..n {
        if k > 0 {
            pose = pose.compose(&odometry[k - 1]);
        }
        g.add_node(pose, k as f64, None);
    }
    for (k, z) in odometry.iter().enumerate() {
        g.add_constraint(Constraint::new(k, k + 1, *z, omega, ConstraintKind::Odometry).with_robustified(true)).unwrap();
    }

    // proximity edges two and three nodes apart, wrapping around the loop
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for k in 0..n {
        for gap in [2, 3] {
            let j = (k + gap) % n;
            pairs.push((k.min(j), k.max(j)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let outliers = (pairs.len() as f64 * 0.1).round() as usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for k in 0..outliers {
        let swap = rng.gen_range(k..order.len());
        order.swap(k, swap);
    }
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        let truth = gt[i].between(&gt[j]);
        let z = if order[..outliers].contains(&idx) {
            // gross error of 10 to 30 standard deviations
            let m = rng.gen_range(10.0..30.0);
            let dir = rng.gen_range(0.0..2.0 * PI);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Pose2::new(truth.x + m * st * dir.cos(), truth.y + m * st * dir.sin(), truth.theta + sign * m * sr)
        } else {
            noisy(truth, &mut rng)
        };
        g.add_constraint(Constraint::new(i, j, z, omega, ConstraintKind::Proximity).with_robustified(true)).unwrap();
    }
    (g, gt)
}

fn node_ate(g: &PoseGraph, gt: &[Pose2]) -> f64 {
    let est = Trajectory::new(g.poses().into_iter().enumerate().map(|(k, p)| (k as f64, p)).collect()).unwrap();
    let truth = Trajectory::new(gt.iter().enumerate().map(|(k, p)| (k as f64, *p)).collect()).unwrap();
    ate(&est, &truth).unwrap().rmse
}

fn c5_robustness() -> Outcome {
    let cfg = OptimizerConfig::default();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10 {
        let (g, gt) = loop_graph(seed);
        let mut robust = g.clone();
        optimize_full(&mut robust, &BarronKernel::cauchy(1.0), &cfg).unwrap();
        let mut plain = g;
        optimize_full(&mut plain, &BarronKernel::l2(1.0), &cfg).unwrap();
        let (a, b) = (node_ate(&robust, &gt), node_ate(&plain, &gt));
        wins += usize::from(a < b);
        detail.push(format!("{a:.3}/{b:.3}"));
    }
    outcome(wins >= 9, format!("Cauchy better in {wins}/10 seeds (Cauchy/L2 ATE m: {})", detail.join(" ")))
}

// ---- 6 ----

/// Chain of `n` nodes with odometry and skip-two proximity edges. Everything
/// about node `k` is seeded by `n - k`, so the newest window is the same
/// problem at every graph size.
fn chain(n: usize) -> PoseGraph {
    let truth = |k: usize| {
        let s = k as f64 - n as f64;
        Pose2::new(0.5 * s, (0.3 * s).sin(), 0.1 * (0.3 * s).cos())
    };
    let omega = Matrix3::from_diagonal(&Vector3::new(400.0, 400.0, 2500.0));
    let perturb = |p: Pose2, seed: u64, scale: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pose2::new(
            p.x + scale * rng.gen_range(-1.0..1.0),
            p.y + scale * rng.gen_range(-1.0..1.0),
            p.theta + 0.2 * scale * rng.gen_range(-1.0..1.0),
        )
    };
    let mut g = PoseGraph::new(10);
    for k in 0..n {
        g.add_node(perturb(truth(k), (n - k) as u64, 0.1), k as f64, None);
    }
    for k in 1..n {
        for (gap, kind) in [(1, ConstraintKind::Odometry), (2, ConstraintKind::Proximity)] {
            if k >= gap {
                let z = perturb(truth(k - gap).between(&truth(k)), 1_000_000 + ((n - k) * 3 + gap) as u64, 0.02);
                g.add_constraint(Constraint::new(k - gap, k, z, omega, kind).with_robustified(true)).unwrap();
            }
        }
    }
    g
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn c6_window() -> Outcome {
    let kernel = BarronKernel::cauchy(1.0);
    let cfg = OptimizerConfig::default();
    let mut g = chain(200);
    let before = g.poses();
    optimize_window(&mut g, &kernel, &cfg).unwrap();
    let after = g.poses();
    let w = g.window_size;
    let frozen = before[..200 - w]
        .iter()
        .zip(&after[..200 - w])
        .all(|(a, b)| a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits() && a.theta.to_bits() == b.theta.to_bits());
    let moved = before[200 - w..] != after[200 - w..];

    let sizes = [50, 100, 200, 500, 1000];
    let times: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let base = chain(n);
            let runs = (0..300)
                .map(|_| {
                    let mut g = base.clone();
                    let t = Instant::now();
                    optimize_window(&mut g, &kernel, &cfg).unwrap();
                    t.elapsed().as_secs_f64() * 1e6
                })
                .collect();
            median(runs)
        })
        .collect();
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let flat = times.iter().all(|t| (t / mean - 1.0).abs() <= 0.2);
    let shown: Vec<String> = sizes.iter().zip(&times).map(|(n, t)| format!("{n}:{t:.0}µs")).collect();
    outcome(
        frozen && moved && flat,
        format!("old poses bit-identical {frozen}, window moved {moved}, median time by size {}", shown.join(" ")),
    )
}

// ---- 7 ----

fn oracle_line(a: Cell, b: Cell) -> Vec<Cell> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let n = dx.abs().max(dy.abs());
    if n == 0 {
        return vec![a];
    }
    // i·d/n rounded half away from zero, in exact integer arithmetic
    let round = |num: i64| num.signum() * ((2 * num.abs() + n) / (2 * n));
    (0..=n).map(|i| (a.0 + round(i * dx), a.1 + round(i * dy))).collect()
}

fn random_scan(rng: &mut ChaCha8Rng, n: usize) -> LaserScan {
    LaserScan {
        timestamp: 0.0,
        angle_min: -2.0,
        angle_increment: 4.0 / n as f64,
        range_max: 10.0,
        ranges: (0..n).map(|_| rng.gen_range(0.3..3.0)).collect(),
    }
}

fn c7_occupancy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let bres = (0..10_000).all(|_| {
        let a = (rng.gen_range(-100..100), rng.gen_range(-100..100));
        let b = (rng.gen_range(-100..100), rng.gen_range(-100..100));
        bresenham(a, b) == oracle_line(a, b)
    });

    let wide = GridParams {
        l_min: -1e4,
        l_max: 1e4,
        ..GridParams::default()
    };
    let (mut inverse, mut order) = (true, true);
    for _ in 0..50 {
        let mut g = OccupancyGrid::centered(wide.clone(), Point2::default(), 20.0).unwrap();
        g.integrate_scan(&Pose2::new(0.2, -0.1, 0.4), &random_scan(&mut rng, 100), 1);
        let start = g.clone();
        let pose = Pose2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-PI..PI));
        let scan = random_scan(&mut rng, 150);
        g.integrate_scan(&pose, &scan, 1);
        g.integrate_scan(&pose, &scan, -1);
        inverse &= g == start;

        let (sa, sb) = (random_scan(&mut rng, 90), random_scan(&mut rng, 90));
        let (pa, pb) = (Pose2::new(0.5, -0.3, 0.2), Pose2::new(-1.0, 1.2, 2.0));
        let mut g1 = OccupancyGrid::centered(wide.clone(), Point2::default(), 20.0).unwrap();
        g1.integrate_scan(&pa, &sa, 1);
        g1.integrate_scan(&pb, &sb, 1);
        let mut g2 = OccupancyGrid::centered(wide.clone(), Point2::default(), 20.0).unwrap();
        g2.integrate_scan(&pb, &sb, 1);
        g2.integrate_scan(&pa, &sa, 1);
        order &= g1.raw_cells() == g2.raw_cells();
    }

    let (occ_ok, occ_n, free_ok, free_n) = box_room_classification();
    let occ_frac = occ_ok as f64 / occ_n as f64;
    let free_frac = free_ok as f64 / free_n as f64;
    outcome(
        bres && inverse && order && occ_frac >= 0.99 && free_frac >= 0.99,
        format!(
            "bresenham oracle {bres}, removal inverts insertion {inverse}, order independent {order}, wall cells occupied {occ_ok}/{occ_n} ({:.2}%), interior cells free {free_ok}/{free_n} ({:.2}%)",
            100.0 * occ_frac,
            100.0 * free_frac
        ),
    )
}

/// Noise-free scans from a 4×4 grid of poses in the 10 m box room. Walls run
/// through cell centers. Returns (occupied ok, wall cells hit by at least
/// three scans, free ok, interior cells crossed by at least three scans).
fn box_room_classification() -> (usize, usize, usize, usize) {
    let res = 0.1;
    let params = GridParams {
        resolution: res,
        ..GridParams::default()
    };
    let n = 104;
    let mut grid = OccupancyGrid::new(params, Point2::new(-0.2 - 0.5 * res, -0.2 - 0.5 * res), n, n).unwrap();
    let world = fixtures::box_room();
    let spec = LidarSpec::default();
    let mut hits = vec![0usize; n * n];
    let mut crossed = vec![0usize; n * n];
    for (i, j, h) in (0..4).flat_map(|i| (0..4).flat_map(move |j| (0..2).map(move |h| (i, j, h)))) {
        let pose = Pose2::new(2.0 + 2.0 * i as f64, 2.0 + 2.0 * j as f64, h as f64 * PI + 0.3 * (i + j) as f64);
        let scan = raycast_exact(&world, &pose, &spec, 0.0);
        grid.integrate_scan(&pose, &scan, 1);
        assert_eq!(grid.width(), n, "fixture grid must not grow");
        let s = grid.cell_of(&pose.translation());
        let mut ends = Vec::new();
        let mut line_cells = Vec::new();
        for k in 0..scan.len() {
            if !scan.is_valid(k) {
                continue;
            }
            let e = grid.cell_of(&pose.transform_point(&Point2::from_polar(scan.ranges[k], scan.ray_angle(k))));
            let line = bresenham(s, e);
            line_cells.extend_from_slice(&line[..line.len() - 1]);
            ends.push(e);
        }
        ends.sort_unstable();
        ends.dedup();
        line_cells.sort_unstable();
        line_cells.dedup();
        for (ix, iy) in ends {
            hits[iy as usize * n + ix as usize] += 1;
        }
        for (ix, iy) in line_cells {
            crossed[iy as usize * n + ix as usize] += 1;
        }
    }
    let (mut occ_ok, mut occ_n, mut free_ok, mut free_n) = (0, 0, 0, 0);
    for iy in 0..n {
        for ix in 0..n {
            let c = grid.cell_center(ix as i64, iy as i64);
            let to_wall = c.x.abs().min((c.x - 10.0).abs()).min(c.y.abs()).min((c.y - 10.0).abs());
            let inside = (0.0..=10.0).contains(&c.x) && (0.0..=10.0).contains(&c.y);
            let p = grid.probability(ix, iy);
            if to_wall < 0.5 * res && inside && hits[iy * n + ix] >= 3 {
                occ_n += 1;
                occ_ok += usize::from(p > 0.6);
            } else if inside && to_wall > 1.5 * res && crossed[iy * n + ix] >= 3 {
                free_n += 1;
                free_ok += usize::from(p < 0.4);
            }
        }
    }
    (occ_ok, occ_n, free_ok, free_n)
}

// ---- 8, 9 ----

struct ValleyRun {
    gt: Trajectory,
    scans: Vec<LaserScan>,
}

fn valley(seed: u64) -> ValleyRun {
    let gt = fixtures::valley_loop(40.0, 2.0, 1.1);
    let scans = generate_scans(&fixtures::valley(), &gt, &LidarSpec::default(), seed);
    ValleyRun { gt, scans }
}

fn path_length(t: &Trajectory) -> f64 {
    t.samples().windows(2).map(|w| w[0].1.translation().distance(&w[1].1.translation())).sum()
}

fn c8_end_to_end() -> Outcome {
    let run = valley(42);
    let t = Instant::now();
    let out = run_offline(&run.scans, &PipelineConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let distance = path_length(&run.gt);
    let final_ate = ate(&out.trajectory, &run.gt).unwrap().rmse;
    let final_rpe = rpe(&out.trajectory, &run.gt, RpeDelta::default()).unwrap().rmse;
    let Some(first) = out.loops.first() else {
        return outcome(false, "no loop detected".into());
    };
    let node_ate = |poses: &[(f64, Pose2)]| ate(&Trajectory::new(poses.to_vec()).unwrap(), &run.gt).unwrap().rmse;
    let (before, after) = (node_ate(&first.before), node_ate(&first.after));
    // the drive reaches its start again after one lap
    let lap_time = distance / 1.1 / 2.0;
    let at_revisit = first.timestamp > 0.8 * lap_time;
    let pct = 100.0 * final_ate / distance;
    outcome(
        at_revisit && after < before && pct < 1.0 && final_rpe < final_ate && secs < 300.0,
        format!(
            "first loop at t={:.1} s (lap {lap_time:.1} s), {} loop events; node ATE {before:.4} -> {after:.4} m; final ATE {final_ate:.4} m = {pct:.3}% of {distance:.1} m; RPE {final_rpe:.4} m; {secs:.1} s",
            first.timestamp,
            out.loops.len()
        ),
    )
}

fn c9_repeatability() -> Outcome {
    let cfg = PipelineConfig {
        mode: Mode::Online,
        ..PipelineConfig::default()
    };
    // The same log replayed; only thread scheduling differs between runs.
    let run = valley(42);
    let ates: Vec<f64> = (0..10)
        .map(|_| {
            let out = run_online(run.scans.clone(), &cfg).unwrap();
            ate(&out.trajectory, &run.gt).unwrap().rmse
        })
        .collect();
    let mean = ates.iter().sum::<f64>() / ates.len() as f64;
    let std = (ates.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (ates.len() - 1) as f64).sqrt();
    let shown: Vec<String> = ates.iter().map(|a| format!("{a:.4}")).collect();
    outcome(
        std < 0.1 * mean,
        format!("ATE mean {mean:.4} m, std {std:.4} m ({:.1}%), runs {}", 100.0 * std / mean, shown.join(" ")),
    )
}

// ---- 10 ----

fn c10_performance() -> Outcome {
    let run = valley(10);
    let cfg = MatcherConfig::default();
    let rays = run.scans[0].len();
    let mut total = 0.0;
    let pairs = 50;
    for k in 0..pairs {
        let (a, b) = (&run.scans[k * 30 + 10], &run.scans[k * 30]);
        let t = Instant::now();
        let m = match_scans(a, b, &Pose2::identity(), &cfg);
        total += t.elapsed().as_secs_f64() * 1e3;
        assert!(m.is_ok());
    }
    let avg = total / pairs as f64;

    // Online run with a node per scan around the same circle three times,
    // with loop closure disabled. Every lap sees the same scenes and does the
    // same matching work, so only the graph size differs between laps.
    let (radius, speed, rate) = (2.0, 1.5, 40.0);
    let gt = fixtures::circle(Point2::new(5.0, 5.0), radius, rate, speed, 3.0);
    let scans = generate_scans(&fixtures::box_room(), &gt, &LidarSpec::default(), 11);
    let cfg = PipelineConfig {
        mode: Mode::Online,
        tracker: TrackerConfig {
            keyframe_trans_thresh: 0.03,
            max_proximity_candidates: 2,
            loop_min_index_gap: usize::MAX,
            ..TrackerConfig::default()
        },
        ..PipelineConfig::default()
    };
    let out = run_online(scans, &cfg).unwrap();
    let per_lap = (2.0 * PI * radius / speed * rate).round() as usize;
    let (laps, flat) = latency_by_lap(&out, per_lap);
    outcome(
        rays == 1081 && avg < 50.0 && flat && out.graph.len() >= 1000,
        format!(
            "{rays}-ray match avg {avg:.1} ms; {} nodes online, median track ms per lap {}",
            out.graph.len(),
            laps.join(" ")
        ),
    )
}

fn latency_by_lap(out: &PipelineOutput, per_lap: usize) -> (Vec<String>, bool) {
    let track: Vec<(usize, f64)> = out
        .timings
        .iter()
        .filter(|r| r.worker == Worker::Tracking && r.event == EventKind::Track)
        .map(|r| (r.nodes, r.ms))
        .collect();
    let mut medians = Vec::new();
    let mut shown = Vec::new();
    for lap in 0..3 {
        // skip the start-up scans of the first lap
        let lo = (lap * per_lap).max(50);
        let v: Vec<f64> = track.iter().filter(|t| (lo..(lap + 1) * per_lap).contains(&t.0)).map(|t| t.1).collect();
        if v.len() < per_lap / 2 {
            continue;
        }
        let m = median(v);
        shown.push(format!("{lo}-{}:{m:.1}", (lap + 1) * per_lap));
        medians.push(m);
    }
    let mean = medians.iter().sum::<f64>() / medians.len().max(1) as f64;
    let flat = medians.len() == 3 && medians.iter().all(|m| (m / mean - 1.0).abs() <= 0.2);
    (shown, flat)
}

// ---- 11 ----

fn c11_determinism() -> Outcome {
    let run = valley(5);
    let scans = &run.scans[..600];
    let cfg = PipelineConfig::default();
    let a = run_offline(scans, &cfg).unwrap();
    let b = run_offline(scans, &cfg).unwrap();
    let same_run = a.trajectory == b.trajectory && a.grid == b.grid && a.graph.poses() == b.graph.poses();

    let gt = fixtures::valley_loop(40.0, 2.0, 0.05);
    let spec = LidarSpec::default();
    let read = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        generate_log(&fixtures::valley(), &gt, &spec, seed, dir.path()).unwrap();
        (
            std::fs::read(dir.path().join("scans.log")).unwrap(),
            std::fs::read(dir.path().join("ground_truth.txt")).unwrap(),
        )
    };
    let first = read(7);
    let same_log = first == read(7);
    let seed_matters = first.0 != read(8).0;
    outcome(
        same_run && same_log && seed_matters,
        format!("offline repeat bit-identical {same_run}, simulator log byte-identical {same_log}, other seed differs {seed_matters}"),
    )
}
