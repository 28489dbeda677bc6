use serde::{Deserialize, Serialize};

use super::{Obstacle, Pose, RobotLimits, Scenario, ScenarioError, Waypoint};

/// Shared settings applied to every builtin scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteDefaults {
    pub dt: f64,
    pub duration_s: f64,
    pub desired_follow_dist: f64,
    pub band_tolerance: f64,
    pub lose_dist: f64,
    pub sensor_max: f64,
    pub robot: RobotLimits,
}

impl Default for SuiteDefaults {
    fn default() -> Self {
        SuiteDefaults {
            dt: 0.05,
            duration_s: 60.0,
            desired_follow_dist: 1.5,
            band_tolerance: 0.5,
            lose_dist: 8.0,
            sensor_max: 5.0,
            robot: RobotLimits { radius: 0.3, v_max: 1.5, w_max: 2.0 },
        }
    }
}

fn wp(x: f64, y: f64, speed: f64) -> Waypoint {
    Waypoint { x, y, speed }
}

impl SuiteDefaults {
    fn scenario(&self, name: &str, target_path: Vec<Waypoint>, obstacles: Vec<Obstacle>) -> Scenario {
        Scenario {
            name: name.to_string(),
            duration_s: self.duration_s,
            dt: self.dt,
            robot_start: Pose { x: 0.0, y: 0.0, theta: 0.0 },
            target_path,
            obstacles,
            desired_follow_dist: self.desired_follow_dist,
            band_tolerance: self.band_tolerance,
            lose_dist: self.lose_dist,
            sensor_max: self.sensor_max,
            robot: self.robot,
            sensor_noise_std: 0.0,
        }
    }

    pub fn suite(&self) -> Vec<Scenario> {
        vec![
            // walks 16 m along x, then stands still
            self.scenario("straight_walk", vec![wp(3.0, 0.0, 0.8), wp(19.0, 0.0, 0.0)], vec![]),
            // leaves one area, turns the corner and settles in another
            self.scenario("l_shaped_walk", vec![wp(3.0, 0.0, 0.8), wp(12.0, 0.0, 0.8), wp(12.0, 9.0, 0.0)], vec![]),
            // the person sidesteps two pillars standing on the straight line
            self.scenario(
                "corridor",
                vec![
                    wp(3.0, 0.0, 0.7),
                    wp(6.0, 0.0, 0.7),
                    wp(7.5, 1.3, 0.7),
                    wp(9.0, 0.0, 0.7),
                    wp(13.0, 0.0, 0.7),
                    wp(14.5, -1.3, 0.7),
                    wp(16.0, 0.0, 0.7),
                    wp(24.0, 0.0, 0.0),
                ],
                vec![Obstacle { x: 7.5, y: 0.0, radius: 0.5 }, Obstacle { x: 14.5, y: 0.0, radius: 0.5 }],
            ),
            // slow walk, a burst of speed, then slow again
            self.scenario(
                "speed_burst",
                vec![wp(3.0, 0.0, 0.6), wp(10.0, 0.0, 1.3), wp(22.0, 0.0, 0.6), wp(30.0, 0.0, 0.0)],
                vec![],
            ),
        ]
    }
}

/// The four builtin scenarios with default settings.
pub fn builtin_suite() -> Vec<Scenario> {
    SuiteDefaults::default().suite()
}

pub fn find_scenario(suite: &[Scenario], name: &str) -> Result<Scenario, ScenarioError> {
    suite.iter().find(|s| s.name == name).cloned().ok_or_else(|| ScenarioError::Unknown(name.to_string()))
}
