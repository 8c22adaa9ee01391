//! Kinematic bicycle stepping in track coordinates and the pure-pursuit
//! expert with scripted overtaking.

use super::{ManeuverCommand, Track, WorldState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub speed: f64,
    pub wheelbase: f64,
    pub dt: f64,
    pub max_steer_deg: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            speed: 15.0,
            wheelbase: 2.5,
            dt: 0.05,
            max_steer_deg: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertParams {
    pub lookahead_m: f64,
    /// A slower car closer than this (in the base lane, ahead) triggers an
    /// overtake.
    pub overtake_trigger_m: f64,
    /// The overtaken car must fall this far behind before returning to the
    /// base lane.
    pub pass_clear_m: f64,
    pub base_lane: usize,
    pub passing_lane: usize,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            lookahead_m: 12.0,
            overtake_trigger_m: 28.0,
            pass_clear_m: 9.0,
            base_lane: 0,
            passing_lane: 1,
        }
    }
}

/// The traffic car currently forcing an overtake, if any: the nearest
/// base-lane car in the window [s - pass_clear, s + trigger] that is slower
/// than the ego.
pub fn overtake_target(state: &WorldState, params: &ExpertParams) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, car) in state.traffic.iter().enumerate() {
        if car.lane != params.base_lane || car.speed >= state.speed {
            continue;
        }
        let rel = car.s - state.s;
        if rel < -params.pass_clear_m || rel > params.overtake_trigger_m {
            continue;
        }
        if best.map_or(true, |(_, r)| rel < r) {
            best = Some((i, rel));
        }
    }
    best.map(|(i, _)| i)
}

/// Pure-pursuit steering toward a lookahead point on the target lane center,
/// plus the scripted maneuver command. Stateless in the policy sense: the
/// command is a function of the world state alone.
pub fn expert_policy(
    track: &Track,
    state: &WorldState,
    params: &ExpertParams,
    sim: &SimParams,
) -> (f32, ManeuverCommand) {
    let command = if track.lane_count > params.passing_lane && overtake_target(state, params).is_some()
    {
        ManeuverCommand::Overtake
    } else {
        ManeuverCommand::Follow
    };
    let lane = match command {
        ManeuverCommand::Follow => params.base_lane,
        ManeuverCommand::Overtake => params.passing_lane,
    };
    let d_target = track.lane_center(lane);
    let (px, py) = track.offset_point(state.s + params.lookahead_m, d_target);
    let (x_e, y_e) = state.to_ego(track, px, py);
    let dist = (x_e * x_e + y_e * y_e).sqrt().max(1e-6);
    let alpha = y_e.atan2(x_e);
    let delta = (2.0 * sim.wheelbase * alpha.sin() / dist).atan();
    let deg = (delta.to_degrees()).clamp(-sim.max_steer_deg, sim.max_steer_deg);
    (deg as f32, command)
}

/// One kinematic bicycle step in track coordinates (RK4), traffic advancing
/// at constant speed. The commanded steering is clamped to the actuator
/// range; speed is constant.
pub fn step(track: &Track, state: &WorldState, steering_deg: f32, sim: &SimParams) -> WorldState {
    let delta = (steering_deg as f64)
        .clamp(-sim.max_steer_deg, sim.max_steer_deg)
        .to_radians();
    let v = state.speed;
    let yaw_rate = v * delta.tan() / sim.wheelbase;

    // d/dt [s, offset, heading_err]
    let deriv = |s: f64, d: f64, psi: f64| -> (f64, f64, f64) {
        let k = track.curvature_at(s);
        let denom = (1.0 - k * d).max(0.2);
        let ds = v * psi.cos() / denom;
        (ds, v * psi.sin(), yaw_rate - k * ds)
    };

    let h = sim.dt;
    let (s0, d0, p0) = (state.s, state.offset, state.heading_err);
    let k1 = deriv(s0, d0, p0);
    let k2 = deriv(s0 + 0.5 * h * k1.0, d0 + 0.5 * h * k1.1, p0 + 0.5 * h * k1.2);
    let k3 = deriv(s0 + 0.5 * h * k2.0, d0 + 0.5 * h * k2.1, p0 + 0.5 * h * k2.2);
    let k4 = deriv(s0 + h * k3.0, d0 + h * k3.1, p0 + h * k3.2);

    let mut next = state.clone();
    next.s = s0 + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
    next.offset = d0 + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    next.heading_err = p0 + h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
    for car in &mut next.traffic {
        car.s += car.speed * sim.dt;
    }
    next
}
