//! Robust sliding-window graph SLAM for planar LiDAR.
//!
//! The crate is organized along the processing chain:
//!
//! - [`geometry`]: SE(2) poses and points.
//! - [`matching`]: point-to-line ICP with a closed-form step.
//! - [`covariance`]: closed-form uncertainty of a match.
//! - [`kernel`]: Barron's robust kernel and IRLS weights.
//! - [`graph`]: pose graph storage and robust optimization.
//! - [`frontend`]: keyframing, dense proximity edges and loop detection.
//! - [`occupancy`]: log-odds occupancy grid.
//! - [`pipeline`]: offline and threaded online drivers with instrumentation.
//! - [`sim`]: polygon-world LiDAR simulator.
//! - [`io`] and [`eval`]: file formats and trajectory metrics.

pub mod covariance;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod kernel;
pub mod matching;
pub mod occupancy;
pub mod pipeline;
pub mod sim;

pub use geometry::{Point2, Pose2};
pub use kernel::BarronKernel;
pub use matching::{match_scans, LaserScan, MatchResult, MatcherConfig};
