use std::f64::consts::FRAC_PI_2;

use super::{DrivingIntent, Scenario, Trajectory, Waypoint};
use crate::geometry::Pose2;

/// Kinematic plan from `start` for frames `first_frame + 1 ..= first_frame + n`.
///
/// * `GoStraight`: constant velocity along the start heading.
/// * `TurnLeft` / `TurnRight`: constant speed on a constant-curvature arc whose
///   heading sweeps ±90° over the whole horizon.
/// * `Stop`: speed decays linearly from `speed` to 0 at the end of the horizon.
pub fn plan_motion(
    start: Pose2,
    speed: f64,
    intent: DrivingIntent,
    n: usize,
    dt: f64,
    first_frame: u32,
) -> Trajectory {
    let horizon = n as f64 * dt;
    let (h0, p0) = (start.heading, start.position());
    let waypoints = (1..=n)
        .map(|k| {
            let t = k as f64 * dt;
            let (pos, heading) = match intent {
                DrivingIntent::GoStraight => (
                    p0 + crate::geometry::Point2::from_angle(h0) * (speed * t),
                    h0,
                ),
                DrivingIntent::Stop => {
                    let s = speed * t - speed * t * t / (2.0 * horizon);
                    (p0 + crate::geometry::Point2::from_angle(h0) * s, h0)
                }
                DrivingIntent::TurnLeft | DrivingIntent::TurnRight => {
                    let sign = if intent == DrivingIntent::TurnLeft {
                        1.0
                    } else {
                        -1.0
                    };
                    let omega = sign * FRAC_PI_2 / horizon;
                    let h = h0 + omega * t;
                    let r = speed / omega;
                    let d = crate::geometry::Point2::new(
                        r * (h.sin() - h0.sin()),
                        r * (h0.cos() - h.cos()),
                    );
                    (p0 + d, h)
                }
            };
            Waypoint {
                frame: first_frame + k as u32,
                x: pos.x,
                y: pos.y,
                heading,
            }
        })
        .collect();
    Trajectory { dt, waypoints }
}

/// Plans `n` future waypoints for the ego from its frame-0 state.
pub fn plan_ego_trajectory(
    scenario: &Scenario,
    intent: DrivingIntent,
    n: usize,
    dt: f64,
) -> Trajectory {
    let ego = scenario.ego();
    plan_motion(ego.pose, ego.speed, intent, n, dt, 0)
}
