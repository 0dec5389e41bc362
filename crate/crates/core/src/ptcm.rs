//! Potential-field / trajectory correlation scoring of targets against the ego.
//!
//! Relevance combines two branches:
//! * a trajectory interaction score `T_S ∈ [0, λ_traj]`: proximity of the ego's
//!   planned positions to the target's over the next `N` frames, weighted by
//!   exponentially decaying frame weights;
//! * a risk score `R_S ∈ [0, 0.5]`: a repulsive potential `exp(v·cosθ) / r²`
//!   from the current relative kinematics, min–max normalized between fixed
//!   analytic bounds.
//!
//! The final relevance is `min(T_S + R_S, 1)`.

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, RigidTransform2D};
use crate::scalar::Scalar;
use crate::scenario::{Scenario, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtcmParams<S = f64> {
    /// Distance at or below which the proximity factor is 1 (m).
    pub d_l: S,
    /// Distance at or above which the proximity factor is 0 (m).
    pub d_u: S,
    pub lambda_traj: S,
    /// Prediction horizon in frames.
    pub horizon: usize,
    /// Seconds per frame.
    pub dt: S,
    pub v_max: S,
    pub r_min: S,
    pub r_max: S,
}

impl<S: Scalar> Default for PtcmParams<S> {
    fn default() -> Self {
        Self {
            d_l: S::lit(5.0),
            d_u: S::lit(20.0),
            lambda_traj: S::lit(0.5),
            horizon: 6,
            dt: S::lit(0.5),
            v_max: S::lit(15.0),
            r_min: S::lit(1.0),
            r_max: S::lit(60.0),
        }
    }
}

impl<S: Scalar> PtcmParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(S::zero() < self.d_l && self.d_l < self.d_u) {
            return Err(Error::param("d_l", "need 0 < d_l < d_u"));
        }
        if !(S::zero() < self.lambda_traj && self.lambda_traj <= S::one()) {
            return Err(Error::param("lambda_traj", "need 0 < lambda_traj <= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::param("horizon", "need at least one frame"));
        }
        if !(self.dt > S::zero()) {
            return Err(Error::param("dt", "must be positive"));
        }
        if !(self.v_max > S::zero()) {
            return Err(Error::param("v_max", "must be positive"));
        }
        if !(S::zero() < self.r_min && self.r_min < self.r_max) {
            return Err(Error::param("r_min", "need 0 < r_min < r_max"));
        }
        Ok(())
    }

    pub fn proximity(&self, d: S) -> S {
        proximity_factor(d, self.d_l, self.d_u)
    }

    /// `exp(-v_max) / r_max²`.
    pub fn energy_min(&self) -> S {
        (-self.v_max).exp() / (self.r_max * self.r_max)
    }

    /// `exp(v_max) / r_min²`.
    pub fn energy_max(&self) -> S {
        self.v_max.exp() / (self.r_min * self.r_min)
    }
}

/// Piecewise-linear distance factor: 1 up to `d_l`, 0 from `d_u`, linear between.
///
/// Generic over any ordered number type, so it can be evaluated exactly on rationals.
pub fn proximity_factor<T: Num + PartialOrd + Copy>(d: T, d_l: T, d_u: T) -> T {
    if d <= d_l {
        T::one()
    } else if d >= d_u {
        T::zero()
    } else {
        (d_u - d) / (d_u - d_l)
    }
}

/// `W(k) = e^{-k} / Σ_{j=1..n} e^{-j}` for `k = 1..=n`.
pub fn frame_weights<S: Scalar>(n: usize) -> Vec<S> {
    let raw: Vec<S> = (1..=n).map(|k| S::lit(-(k as f64)).exp()).collect();
    let total = raw.iter().fold(S::zero(), |acc, &w| acc + w);
    raw.into_iter().map(|w| w / total).collect()
}

/// `λ_traj · Σ_k W(k) · F(‖ego_k − tgt_k‖)` over the first `horizon` paired positions.
pub fn interaction_score<S: Scalar>(
    ego: &[Point2<S>],
    target: &[Point2<S>],
    params: &PtcmParams<S>,
) -> Result<S> {
    let n = params.horizon;
    let available = ego.len().min(target.len());
    if available < n {
        return Err(Error::HorizonTooShort {
            needed: n,
            available,
        });
    }
    let weights = frame_weights::<S>(n);
    let sum = weights
        .iter()
        .zip(ego.iter().zip(target))
        .fold(S::zero(), |acc, (&w, (&e, &t))| {
            acc + w * params.proximity(e.distance(t))
        });
    Ok(params.lambda_traj * sum)
}

fn future_positions(traj: &Trajectory, frame: usize, n: usize) -> Result<Vec<Point2>> {
    (frame + 1..=frame + n)
        .map(|f| {
            traj.position(f).ok_or(Error::HorizonTooShort {
                needed: frame + n,
                available: traj.last_frame().unwrap_or(0),
            })
        })
        .collect()
}

/// Trajectory interaction score over frames `frame+1 ..= frame+N` of both trajectories.
pub fn trajectory_interaction_score(
    ego: &Trajectory,
    target: &Trajectory,
    frame: usize,
    params: &PtcmParams,
) -> Result<f64> {
    let e = future_positions(ego, frame, params.horizon)?;
    let t = future_positions(target, frame, params.horizon)?;
    interaction_score(&e, &t, params)
}

/// Velocity in the current infrastructure frame from two infrastructure-frame fixes.
///
/// Both fixes are lifted to world coordinates with their frame's
/// infrastructure-to-world transform, differenced over `dt`, and the world
/// displacement rate is rotated back into the current infrastructure frame.
pub fn estimate_velocity<S: Scalar>(
    p_infra_prev: Point2<S>,
    p_infra_curr: Point2<S>,
    infra_to_world_prev: &RigidTransform2D<S>,
    infra_to_world_curr: &RigidTransform2D<S>,
    dt: S,
) -> Result<Point2<S>> {
    if !(dt > S::zero()) {
        return Err(Error::param("dt", "must be positive"));
    }
    let w_prev = infra_to_world_prev.transform_point(p_infra_prev);
    let w_curr = infra_to_world_curr.transform_point(p_infra_curr);
    let world_rate = (w_curr - w_prev) * (S::one() / dt);
    Ok(infra_to_world_curr.rotate_inverse(world_rate))
}

/// `exp(v_rel · cosθ) / r²`.
pub fn potential_energy<S: Scalar>(v_rel: S, cos_theta: S, r: S) -> Result<S> {
    if !(r > S::zero()) {
        return Err(Error::param("r", "distance must be positive"));
    }
    Ok((v_rel * cos_theta).exp() / (r * r))
}

/// `0.5 · (E − E_min) / (E_max − E_min)` with `E` clamped into the bounds.
pub fn risk_score<S: Scalar>(energy: S, params: &PtcmParams<S>) -> S {
    let (lo, hi) = (params.energy_min(), params.energy_max());
    let e = if energy.is_nan() {
        lo
    } else {
        energy.max(lo).min(hi)
    };
    S::lit(0.5) * (e - lo) / (hi - lo)
}

/// Approach speed and cosine of the angle between the relative velocity and the
/// target-to-ego direction. Zero relative motion or coincident positions give cosθ = 0.
pub fn relative_kinematics<S: Scalar>(
    ego_pos: Point2<S>,
    ego_vel: Point2<S>,
    target_pos: Point2<S>,
    target_vel: Point2<S>,
) -> (S, S, S) {
    let to_ego = ego_pos - target_pos;
    let r = to_ego.norm();
    let v_rel = target_vel - ego_vel;
    let speed = v_rel.norm();
    let tiny = S::epsilon();
    let cos = if speed <= tiny || r <= tiny {
        S::zero()
    } else {
        (v_rel.dot(to_ego) / (speed * r))
            .max(-S::one())
            .min(S::one())
    };
    (speed, cos, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub target_id: u32,
    /// Trajectory interaction score.
    pub t_s: f64,
    /// Risk score.
    pub r_s: f64,
    pub relevance: f64,
}

/// Which branches contribute; disabling one zeroes its score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub trajectory: bool,
    pub velocity: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            trajectory: true,
            velocity: true,
        }
    }
}

pub fn relevance(
    scenario: &Scenario,
    frame: usize,
    target_id: u32,
    params: &PtcmParams,
) -> Result<RelevanceReport> {
    relevance_with(scenario, frame, target_id, params, Branches::default())
}

pub fn relevance_with(
    scenario: &Scenario,
    frame: usize,
    target_id: u32,
    params: &PtcmParams,
    branches: Branches,
) -> Result<RelevanceReport> {
    params.validate()?;
    if target_id == scenario.ego_id {
        return Err(Error::InvalidInput(
            "relevance target must differ from the ego".into(),
        ));
    }
    scenario.check_frame(frame)?;
    let ego = scenario.ego();
    let target = scenario
        .agent(target_id)
        .ok_or(Error::AgentNotFound { id: target_id })?;
    let missing = || Error::AgentNotFound { id: target_id };

    let t_s = if branches.trajectory {
        trajectory_interaction_score(&ego.trajectory, &target.trajectory, frame, params)?
    } else {
        0.0
    };

    let r_s = if branches.velocity {
        let infra = scenario.infra_to_world();
        let to_infra = infra.inverse();
        let (f0, f1) = if frame == 0 {
            (0, 1)
        } else {
            (frame - 1, frame)
        };
        let tp0 = target.position_at(f0).ok_or_else(missing)?;
        let tp1 = target.position_at(f1).ok_or_else(missing)?;
        let tgt_now = to_infra.transform_point(target.position_at(frame).ok_or_else(missing)?);
        let tgt_vel = estimate_velocity(
            to_infra.transform_point(tp0),
            to_infra.transform_point(tp1),
            &infra,
            &infra,
            target.trajectory.dt,
        )?;
        let ego_now_w = ego
            .position_at(frame)
            .ok_or(Error::AgentNotFound { id: ego.id })?;
        let ego_next_w = ego.position_at(frame + 1).ok_or(Error::HorizonTooShort {
            needed: frame + 1,
            available: ego.trajectory.last_frame().unwrap_or(0),
        })?;
        let ego_vel = infra.rotate_inverse((ego_next_w - ego_now_w) * (1.0 / ego.trajectory.dt));
        let ego_now = to_infra.transform_point(ego_now_w);
        let (speed, cos, r) = relative_kinematics(ego_now, ego_vel, tgt_now, tgt_vel);
        risk_score(potential_energy(speed, cos, r.max(params.r_min))?, params)
    } else {
        0.0
    };

    Ok(RelevanceReport {
        target_id,
        t_s,
        r_s,
        relevance: (t_s + r_s).min(1.0),
    })
}

/// Relevance of every non-ego agent at `frame`, in agent order.
pub fn relevance_all(
    scenario: &Scenario,
    frame: usize,
    params: &PtcmParams,
    branches: Branches,
) -> Result<Vec<RelevanceReport>> {
    scenario
        .others()
        .map(|a| relevance_with(scenario, frame, a.id, params, branches))
        .collect()
}
