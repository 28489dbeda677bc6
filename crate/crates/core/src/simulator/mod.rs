//! Planar kinematic simulation of a robot following a walking person.
//!
//! The robot is a unicycle integrated with explicit Euler steps; the person
//! moves along a piecewise-linear path; obstacles are static circles.

mod suite;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{CompiledPolicy, DriveCommand, Policy, SensorFrame};

pub use suite::{builtin_suite, find_scenario, SuiteDefaults};

/// Half-width of the front sensor sector.
pub const FRONT_HALF_ANGLE: f64 = PI / 6.0;
/// Outer edge of the side sectors.
pub const SIDE_LIMIT: f64 = PI / 2.0;
/// Fraction of ticks excluded from the band metric at the start of a run.
pub const GRACE_FRACTION: f64 = 0.1;

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta: normalize_angle(theta) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// A target waypoint. `speed` is used on the segment leaving this waypoint;
/// the last waypoint's speed is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotLimits {
    pub radius: f64,
    pub v_max: f64,
    pub w_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub duration_s: f64,
    pub dt: f64,
    pub robot_start: Pose,
    pub target_path: Vec<Waypoint>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub desired_follow_dist: f64,
    pub band_tolerance: f64,
    pub lose_dist: f64,
    pub sensor_max: f64,
    pub robot: RobotLimits,
    /// Standard deviation of Gaussian noise on the range readings; zero disables it.
    #[serde(default)]
    pub sensor_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("scenario {scenario}: {detail}")]
    Invalid { scenario: String, detail: String },
    #[error("unknown scenario \"{0}\"")]
    Unknown(String),
    #[error("cannot read scenario file: {0}")]
    Io(String),
    #[error("malformed scenario file: {0}")]
    Format(String),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail =
            |detail: &str| Err(ScenarioError::Invalid { scenario: self.name.clone(), detail: detail.to_string() });
        let mut numbers = vec![
            self.duration_s,
            self.dt,
            self.robot_start.x,
            self.robot_start.y,
            self.robot_start.theta,
            self.desired_follow_dist,
            self.band_tolerance,
            self.lose_dist,
            self.sensor_max,
            self.robot.radius,
            self.robot.v_max,
            self.robot.w_max,
            self.sensor_noise_std,
        ];
        numbers.extend(self.target_path.iter().flat_map(|w| [w.x, w.y, w.speed]));
        numbers.extend(self.obstacles.iter().flat_map(|o| [o.x, o.y, o.radius]));
        if numbers.iter().any(|x| !x.is_finite()) {
            return fail("all quantities must be finite");
        }
        if self.dt <= 0.0 {
            return fail("dt must be > 0");
        }
        if self.duration_s < self.dt {
            return fail("duration_s must be >= dt");
        }
        if self.target_path.is_empty() {
            return fail("target_path must contain at least one waypoint");
        }
        if self.target_path.iter().any(|w| w.speed < 0.0) {
            return fail("waypoint speeds must be >= 0");
        }
        if self.robot.radius <= 0.0 || self.robot.v_max <= 0.0 || self.robot.w_max <= 0.0 {
            return fail("robot radius, v_max and w_max must be > 0");
        }
        if self.desired_follow_dist <= self.robot.radius {
            return fail("desired_follow_dist must exceed the robot radius");
        }
        if self.lose_dist <= self.desired_follow_dist {
            return fail("lose_dist must exceed desired_follow_dist");
        }
        if self.band_tolerance <= 0.0 {
            return fail("band_tolerance must be > 0");
        }
        if self.sensor_max <= 0.0 {
            return fail("sensor_max must be > 0");
        }
        if self.sensor_noise_std < 0.0 {
            return fail("sensor_noise_std must be >= 0");
        }
        if self.obstacles.iter().any(|o| o.radius <= 0.0) {
            return fail("obstacle radii must be > 0");
        }
        if !(self.robot_start.theta > -PI && self.robot_start.theta <= PI) {
            return fail("robot_start.theta must lie in (-pi, pi]");
        }
        Ok(())
    }

    /// Number of simulated ticks.
    pub fn ticks(&self) -> usize {
        // the small slack absorbs representation error in duration/dt
        (self.duration_s / self.dt + 1e-9).floor() as usize
    }

    pub fn grace_ticks(&self) -> usize {
        (self.ticks() as f64 * GRACE_FRACTION).floor() as usize
    }

    /// Person position at time `t`: piecewise-linear along the path, holding
    /// at the final waypoint (or at any waypoint whose outgoing speed is 0).
    pub fn target_at(&self, t: f64) -> Point {
        let path = &self.target_path;
        let mut elapsed = 0.0;
        for pair in path.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let len = (b.x - a.x).hypot(b.y - a.y);
            if a.speed <= 0.0 {
                return Point { x: a.x, y: a.y };
            }
            let span = len / a.speed;
            if t <= elapsed + span {
                let frac = if span > 0.0 { (t - elapsed) / span } else { 1.0 };
                return Point { x: a.x + (b.x - a.x) * frac, y: a.y + (b.y - a.y) * frac };
            }
            elapsed += span;
        }
        let last = path[path.len() - 1];
        Point { x: last.x, y: last.y }
    }

    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Format(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Scenario::from_toml(&text)
    }

    /// Copy with the robot's physical limits and sensor range replaced.
    pub fn with_robot(&self, robot: RobotLimits, sensor_max: f64) -> Scenario {
        Scenario { robot, sensor_max, ..self.clone() }
    }
}

/// Computes the sensor frame for a robot pose.
///
/// Obstacle ranges are clearances (center distance minus radius) per sector,
/// selected by the bearing of the obstacle center. Empty sectors read
/// `sensor_max`. `own_speed` is left at zero; the simulator fills it in.
pub fn sense(robot: &Pose, target: Point, obstacles: &[Obstacle], sensor_max: f64) -> SensorFrame {
    let dx = target.x - robot.x;
    let dy = target.y - robot.y;
    let mut front = sensor_max;
    let mut left = sensor_max;
    let mut right = sensor_max;
    for o in obstacles {
        let ox = o.x - robot.x;
        let oy = o.y - robot.y;
        let bearing = normalize_angle(oy.atan2(ox) - robot.theta);
        let range = ox.hypot(oy) - o.radius;
        let slot = if (-FRONT_HALF_ANGLE..=FRONT_HALF_ANGLE).contains(&bearing) {
            &mut front
        } else if bearing > FRONT_HALF_ANGLE && bearing <= SIDE_LIMIT {
            &mut left
        } else if (-SIDE_LIMIT..-FRONT_HALF_ANGLE).contains(&bearing) {
            &mut right
        } else {
            continue;
        };
        *slot = slot.min(range);
    }
    SensorFrame {
        dist_to_target: dx.hypot(dy),
        bearing_to_target: normalize_angle(dy.atan2(dx) - robot.theta),
        obst_front: front.clamp(0.0, sensor_max),
        obst_left: left.clamp(0.0, sensor_max),
        obst_right: right.clamp(0.0, sensor_max),
        own_speed: 0.0,
    }
}

/// One explicit Euler step of the unicycle model after clamping the command
/// to the robot's limits.
pub fn step_robot(pose: &Pose, cmd: DriveCommand, limits: &RobotLimits, dt: f64) -> Pose {
    let v = cmd.v.clamp(-limits.v_max, limits.v_max);
    let w = cmd.w.clamp(-limits.w_max, limits.w_max);
    Pose {
        x: pose.x + v * pose.theta.cos() * dt,
        y: pose.y + v * pose.theta.sin() * dt,
        theta: normalize_angle(pose.theta + w * dt),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub robot: Pose,
    pub target: Point,
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub ticks: usize,
    pub band_fraction: f64,
    pub rms_dist_error: f64,
    pub collisions: usize,
    pub target_lost: bool,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Smallest gap between the robot center and any obstacle surface.
pub fn min_clearance(pose: &Pose, obstacles: &[Obstacle]) -> f64 {
    obstacles.iter().map(|o| (o.x - pose.x).hypot(o.y - pose.y) - o.radius).fold(f64::INFINITY, f64::min)
}

/// Runs a policy through a scenario.
///
/// Each tick records the state at `t = k·dt`, then senses, evaluates the
/// policy and integrates one step. Metrics are accumulated while streaming.
/// `seed` only drives the optional range noise.
pub fn run_scenario(policy: &Policy, scenario: &Scenario, seed: u64) -> ScenarioResult {
    run_compiled(&CompiledPolicy::new(policy), scenario, seed)
}

pub fn run_compiled(policy: &CompiledPolicy, scenario: &Scenario, seed: u64) -> ScenarioResult {
    let ticks = scenario.ticks();
    let grace = scenario.grace_ticks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        (scenario.sensor_noise_std > 0.0).then(|| Normal::new(0.0, scenario.sensor_noise_std).expect("validated std"));

    let mut pose = scenario.robot_start;
    let mut own_speed = 0.0;
    let mut trajectory = Vec::with_capacity(ticks);
    let (mut in_band, mut counted, mut sq_err) = (0usize, 0usize, 0.0f64);
    let mut collisions = 0;
    let mut target_lost = false;

    for k in 0..ticks {
        let t = k as f64 * scenario.dt;
        let target = scenario.target_at(t);
        let dist = (target.x - pose.x).hypot(target.y - pose.y);
        trajectory.push(TrajectoryPoint { t, robot: pose, target, dist });

        if k >= grace {
            let err = dist - scenario.desired_follow_dist;
            counted += 1;
            sq_err += err * err;
            if err.abs() <= scenario.band_tolerance {
                in_band += 1;
            }
        }
        if min_clearance(&pose, &scenario.obstacles) < scenario.robot.radius {
            collisions += 1;
        }
        if dist > scenario.lose_dist {
            target_lost = true;
        }

        let mut frame = sense(&pose, target, &scenario.obstacles, scenario.sensor_max);
        frame.own_speed = own_speed;
        if let Some(noise) = &noise {
            for r in [&mut frame.obst_front, &mut frame.obst_left, &mut frame.obst_right] {
                *r = (*r + noise.sample(&mut rng)).clamp(0.0, scenario.sensor_max);
            }
        }
        let cmd = policy.evaluate(&frame);
        own_speed = cmd.v.clamp(-scenario.robot.v_max, scenario.robot.v_max);
        pose = step_robot(&pose, cmd, &scenario.robot, scenario.dt);
    }

    ScenarioResult {
        ticks,
        band_fraction: if counted == 0 { 1.0 } else { in_band as f64 / counted as f64 },
        rms_dist_error: if counted == 0 { 0.0 } else { (sq_err / counted as f64).sqrt() },
        collisions,
        target_lost,
        trajectory,
    }
}

impl ScenarioResult {
    /// Trajectory as a comma-separated table with a header row.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("t,x,y,theta,tx,ty,dist\n");
        for p in &self.trajectory {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.t, p.robot.x, p.robot.y, p.robot.theta, p.target.x, p.target.y, p.dist
            );
        }
        out
    }
}
