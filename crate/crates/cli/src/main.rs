use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use slam2d::eval::{ate, rpe, RpeDelta, Trajectory};
use slam2d::io;
use slam2d::pipeline::{self, Mode, PipelineConfig};
use slam2d::sim::{self, fixtures, LidarSpec, World};
use slam2d::{match_scans, LaserScan, Pose2};

#[derive(Parser)]
#[command(name = "slam2d", version, about = "Sliding-window 2D LiDAR graph SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run SLAM over a scan log and write trajectory, map, graph and timings.
    Slam(SlamArgs),
    /// Generate a scan log and ground truth from a world and a trajectory.
    Simulate(SimulateArgs),
    /// Print ATE and RPE of an estimated trajectory against ground truth.
    Eval(EvalArgs),
    /// Match the first scan of one log against the first scan of another.
    Match(MatchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

#[derive(Args)]
struct SlamArgs {
    #[arg(long)]
    scans: PathBuf,
    /// key = value file; see the README for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `pipeline.mode` from the config file.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// World segment file, or one of @valley, @box_room, @hall.
    #[arg(long)]
    world: String,
    /// Trajectory file, or @valley-loop for the bundled drive around the valley.
    #[arg(long)]
    trajectory: String,
    #[command(flatten)]
    spec: SpecArgs,
    /// Speed of the bundled valley drive, m/s.
    #[arg(long, default_value_t = 2.0)]
    speed: f64,
    /// Laps of the bundled valley drive.
    #[arg(long, default_value_t = 1.1)]
    laps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpecArgs {
    /// Field of view, degrees.
    #[arg(long, default_value_t = 270.0)]
    coverage_deg: f64,
    /// Angular resolution, degrees.
    #[arg(long, default_value_t = 0.25)]
    increment_deg: f64,
    #[arg(long, default_value_t = 60.0)]
    range_max: f64,
    #[arg(long, default_value_t = 40.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.03)]
    noise_sigma: f64,
}

impl SpecArgs {
    fn spec(&self) -> LidarSpec {
        LidarSpec {
            coverage: self.coverage_deg.to_radians(),
            increment: self.increment_deg.to_radians(),
            range_max: self.range_max,
            rate: self.rate,
            range_noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Pair offset for RPE: a frame count, or seconds with an `s` suffix.
    #[arg(long, default_value = "1", value_parser = parse_delta)]
    rpe_delta: RpeDelta,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    scan_a: PathBuf,
    #[arg(long)]
    scan_b: PathBuf,
    /// Initial guess of scan A in scan B's frame.
    #[arg(long, default_value = "0,0,0", value_parser = parse_pose, allow_hyphen_values = true)]
    guess: Pose2,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_delta(s: &str) -> Result<RpeDelta, String> {
    let bad = || format!("expected a frame count or seconds like 0.5s, got {s:?}");
    match s.strip_suffix('s') {
        Some(secs) => match secs.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(RpeDelta::Seconds(v)),
            _ => Err(bad()),
        },
        None => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(RpeDelta::Frames(n)),
            _ => Err(bad()),
        },
    }
}

fn parse_pose(s: &str) -> Result<Pose2, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("{s:?}: {e}"))?;
    match v[..] {
        [x, y, theta] if v.iter().all(|c| c.is_finite()) => Ok(Pose2::new(x, y, theta)),
        _ => Err(format!("expected x,y,theta, got {s:?}")),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let map = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            io::parse_config(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => BTreeMap::new(),
    };
    Ok(PipelineConfig::from_map(&map)?)
}

fn load_world(arg: &str) -> Result<World> {
    match arg {
        "@valley" => Ok(fixtures::valley()),
        "@box_room" => Ok(fixtures::box_room()),
        "@hall" => Ok(fixtures::hall()),
        _ if arg.starts_with('@') => bail!("unknown bundled world {arg}"),
        _ => {
            let text = fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
            let name = Path::new(arg).file_stem().map_or("world".into(), |s| s.to_string_lossy());
            Ok(sim::parse_world(&name, &text)?)
        }
    }
}

fn first_scan(path: &Path) -> Result<LaserScan> {
    io::read_scan_log(path)?
        .into_iter()
        .next()
        .with_context(|| format!("{} holds no scans", path.display()))
}

fn slam(args: SlamArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Online => Mode::Online,
            ModeArg::Offline => Mode::Offline,
        };
    }
    let scans = io::read_scan_log(&args.scans).with_context(|| format!("reading {}", args.scans.display()))?;
    info!("{} scans", scans.len());
    let out = pipeline::run(scans, &cfg)?;

    let dir = &args.out;
    fs::create_dir_all(dir)?;
    io::write_trajectory(dir.join("trajectory.txt"), &out.trajectory)?;
    let mut params = out.grid.params().clone();
    params.resolution = cfg.export_resolution;
    let grid = pipeline::rebuild_map(&out.graph, &params);
    io::export_map(&grid, dir.join("map.pgm"), dir.join("map.meta"))?;
    io::write_graph(dir.join("graph.txt"), &out.graph)?;
    fs::write(dir.join("timings.csv"), pipeline::timings_csv(&out.timings))?;
    fs::write(dir.join("matches.csv"), pipeline::matches_csv(&out.matches))?;
    let summary = pipeline::format_summary(&pipeline::summarize(&out));
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let world = load_world(&args.world)?;
    let spec = args.spec.spec();
    spec.validate()?;
    let trajectory: Trajectory = match args.trajectory.as_str() {
        "@valley-loop" => fixtures::valley_loop(spec.rate, args.speed, args.laps),
        t if t.starts_with('@') => bail!("unknown bundled trajectory {t}"),
        t => io::read_trajectory(t).with_context(|| format!("reading {t}"))?,
    };
    fs::create_dir_all(&args.out)?;
    let scans = sim::generate_log(&world, &trajectory, &spec, args.seed, &args.out)?;
    println!(
        "wrote {} scans to {}",
        scans.len(),
        args.out.join(sim::SCAN_LOG_FILE).display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let est = io::read_trajectory(&args.est).with_context(|| format!("reading {}", args.est.display()))?;
    let gt = io::read_trajectory(&args.gt).with_context(|| format!("reading {}", args.gt.display()))?;
    let a = ate(&est, &gt)?;
    let r = rpe(&est, &gt, args.rpe_delta)?;
    println!("ate_rmse {}", a.rmse);
    println!("ate_pairs {}", a.errors.len());
    println!("rpe_rmse {}", r.rmse);
    println!("rpe_pairs {}", r.errors.len());
    Ok(())
}

fn match_cmd(args: MatchArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let a = first_scan(&args.scan_a)?;
    let b = first_scan(&args.scan_b)?;
    let m = match_scans(&a, &b, &args.guess, &cfg.tracker.matcher)?;
    println!("x {}", m.q.x);
    println!("y {}", m.q.y);
    println!("theta {}", m.q.theta);
    println!("converged {}", m.converged);
    println!("iterations {}", m.iterations);
    println!("num_valid {}", m.num_valid);
    println!("residual_sum {}", m.residual_sum);
    println!("covariance_ok {}", m.covariance_ok);
    for i in 0..3 {
        let row = m.covariance.row(i);
        println!("covariance {} {} {}", row[0], row[1], row[2]);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Slam(a) => slam(a),
        Command::Simulate(a) => simulate(a),
        Command::Eval(a) => eval(a),
        Command::Match(a) => match_cmd(a),
    }
}
