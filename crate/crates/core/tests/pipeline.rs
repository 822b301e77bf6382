use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use slam2d::eval::ate;
use slam2d::graph::ConstraintKind;
use slam2d::pipeline::{
    format_summary, matches_csv, rebuild_map, run_offline, run_online, run_online_until, summarize, timings_csv,
    Mode, PipelineConfig, PipelineError, PipelineOutput,
};
use slam2d::sim::{fixtures, generate_scans, LidarSpec};
use slam2d::{LaserScan, Point2, Pose2};

fn circle_log(seed: u64) -> (slam2d::eval::Trajectory, Vec<LaserScan>) {
    let gt = fixtures::circle(Point2::new(5.0, 5.0), 2.0, 40.0, 1.5, 1.25);
    let scans = generate_scans(&fixtures::box_room(), &gt, &LidarSpec::default(), seed);
    (gt, scans)
}

fn loop_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.tracker.loop_min_index_gap = 15;
    cfg
}

fn check_consistent(out: &PipelineOutput) {
    let g = &out.graph;
    for c in g.constraints() {
        assert!(c.i < g.len() && c.j < g.len());
    }
    let s = summarize(out);
    assert_eq!(s.nodes, g.len());
    assert_eq!(s.constraints, g.constraints().len());
    assert_eq!(s.odometry + s.proximity + s.loop_constraints, s.constraints);
    assert_eq!(s.odometry, g.len() - 1);
    assert_eq!(s.scans, out.scans);
}

#[test]
fn empty_log_is_an_error() {
    assert!(matches!(run_offline(&[], &PipelineConfig::default()), Err(PipelineError::EmptyLog)));
    assert!(matches!(run_online(Vec::new(), &PipelineConfig::default()), Err(PipelineError::EmptyLog)));
}

#[test]
fn offline_run_closes_the_loop_and_is_deterministic() {
    let (gt, scans) = circle_log(5);
    let cfg = loop_config();
    let a = run_offline(&scans, &cfg).unwrap();
    let b = run_offline(&scans, &cfg).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.grid, b.grid);
    assert_eq!(a.graph.poses(), b.graph.poses());
    assert_eq!(a.graph.constraints(), b.graph.constraints());

    assert!(!a.loops.is_empty());
    assert!(a.graph.count_kind(ConstraintKind::Loop) > 0);
    assert_eq!(a.trajectory.len(), scans.len());
    check_consistent(&a);
    let e = ate(&a.trajectory, &gt).unwrap();
    assert!(e.rmse < 0.05, "ATE {}", e.rmse);
}

#[test]
fn online_replay_is_within_twice_offline_ate() {
    let (gt, scans) = circle_log(9);
    let cfg = loop_config();
    let off = run_offline(&scans, &cfg).unwrap();
    let on = run_online(scans.clone(), &cfg).unwrap();
    check_consistent(&on);
    assert_eq!(on.scans, scans.len());
    assert!(on.graph.nodes().iter().all(|n| n.last_map_pose.is_some()));
    let e_off = ate(&off.trajectory, &gt).unwrap().rmse;
    let e_on = ate(&on.trajectory, &gt).unwrap().rmse;
    assert!(e_on < 2.0 * e_off.max(0.005), "online {e_on} offline {e_off}");
}

#[test]
fn online_stop_mid_run_flushes_partial_output() {
    let (_, scans) = circle_log(2);
    let stop = AtomicBool::new(false);
    let total = scans.len();
    let feed = scans.into_iter().enumerate().map(|(k, s)| {
        if k == 120 {
            stop.store(true, Ordering::Relaxed);
        }
        s
    });
    let out = run_online_until(feed, &loop_config(), &stop).unwrap();
    assert!(out.scans > 0 && out.scans < total);
    assert!(out.graph.len() >= 2);
    check_consistent(&out);
}

#[test]
fn straight_run_travelled_distance() {
    let gt = fixtures::straight(Pose2::new(2.0, 0.0, 0.0), 10.0, 40.0, 1.0);
    let scans = generate_scans(&fixtures::hall(), &gt, &LidarSpec::default(), 4);
    let out = run_offline(&scans, &PipelineConfig::default()).unwrap();
    let d = summarize(&out).travelled_distance;
    assert!((d - 10.0).abs() < 0.2, "{d}");
}

#[test]
fn instrumentation_formats() {
    assert_eq!(timings_csv(&[]), "timestamp,worker,event,ms,nodes\n");
    assert_eq!(matches_csv(&[]), "timestamp,purpose,residual_sum,num_valid,converged,ms\n");

    let (_, scans) = circle_log(1);
    let out = run_offline(&scans[..200], &loop_config()).unwrap();
    let csv = timings_csv(&out.timings);
    assert_eq!(csv.lines().count(), out.timings.len() + 1);
    assert_eq!(csv.lines().filter(|l| l.contains(",track,")).count(), 200);
    assert_eq!(matches_csv(&out.matches).lines().count(), out.matches.len() + 1);
    let text = format_summary(&summarize(&out));
    assert!(text.contains(&format!("nodes {}\n", out.graph.len())));
    assert!(out.timings.iter().all(|r| r.ms >= 0.0));

    let quiet = PipelineConfig {
        record_timings: false,
        record_matches: false,
        ..loop_config()
    };
    let out = run_offline(&scans[..50], &quiet).unwrap();
    assert!(out.timings.is_empty() && out.matches.is_empty());
}

#[test]
fn rebuilt_map_uses_final_poses() {
    let (_, scans) = circle_log(3);
    let out = run_offline(&scans[..100], &loop_config()).unwrap();
    let mut params = out.grid.params().clone();
    params.resolution = 0.1;
    let fine = rebuild_map(&out.graph, &params);
    assert_eq!(fine.resolution(), 0.1);
    let (lo, hi) = fine.probability_range();
    for iy in 0..fine.height() {
        for ix in 0..fine.width() {
            let p = fine.probability(ix, iy);
            assert!(p >= lo && p <= hi);
        }
    }
}

#[test]
fn config_keys() {
    let mut m = BTreeMap::new();
    for (k, v) in [
        ("pipeline.mode", "online"),
        ("kernel.alpha", "-2"),
        ("kernel.c", "0.5"),
        ("tracker.keyframe_trans_thresh", "0.75"),
        ("graph.window_size", "12"),
        ("map.resolution", "0.2"),
        ("tracker.verify_loops", "false"),
    ] {
        m.insert(k.to_string(), v.to_string());
    }
    let c = PipelineConfig::from_map(&m).unwrap();
    assert_eq!(c.mode, Mode::Online);
    assert_eq!(c.kernel.alpha(), -2.0);
    assert_eq!(c.kernel.scale(), 0.5);
    assert_eq!(c.tracker.keyframe_trans_thresh, 0.75);
    assert_eq!(c.window_size, 12);
    assert_eq!(c.grid.resolution, 0.2);
    assert_eq!(c.reintegrate_trans_tol, 0.2);
    assert!(!c.tracker.verify_loops);

    for (k, v) in [("nope", "1"), ("kernel.c", "0"), ("kernel.alpha", "3"), ("graph.window_size", "x"), ("map.prop_free", "0.6")] {
        let mut m = BTreeMap::new();
        m.insert(k.to_string(), v.to_string());
        assert!(PipelineConfig::from_map(&m).is_err(), "{k}={v}");
    }
}
