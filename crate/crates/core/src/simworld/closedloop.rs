//! Closed-loop episodes: render, build the gaze map, forward through the
//! command-selected network, step physics, and account infractions. On an
//! infraction the ego resets to its target lane center (standing in for the
//! human takeover) and accounting resumes.

use super::{
    expert_overtake_target, expert_policy, step, CameraConfig, ExpertParams, ManeuverCommand,
    SimParams, Track, TrafficCar, WorldState,
};
use crate::dropout::{DropoutMode, DropoutSpec, Phase};
use crate::error::{Error, Result};
use crate::gazefield::{gaze_oracle, gaze_oracle_estimated, GazeOracleConfig};
use crate::net::{GazeInput, PilotNetMini};
use crate::simworld::render::render_view_bytes;
use crate::tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const TAG_CL_TRAFFIC: u64 = 0x636c_7472; // "cltr"
const TAG_CL_GAZE: u64 = 0x636c_677a; // "clgz"
const CAR_COLLISION_DS: f64 = 4.0;
const CAR_COLLISION_DD: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeSource {
    Oracle,
    JitteredOracle,
    CenterBlob,
    None,
}

impl GazeSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            GazeSource::Oracle => "oracle",
            GazeSource::JitteredOracle => "jittered_oracle",
            GazeSource::CenterBlob => "center_blob",
            GazeSource::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub episode_length_m: f64,
    pub infraction_margin_m: f64,
    pub with_traffic: bool,
    pub traffic_spacing_m: (f64, f64),
    pub traffic_speed: (f64, f64),
    pub sim: SimParams,
    pub expert: ExpertParams,
    pub camera: CameraConfig,
    pub gaze: GazeOracleConfig,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            episode_length_m: 2000.0,
            infraction_margin_m: 0.3,
            with_traffic: true,
            traffic_spacing_m: (210.0, 330.0),
            traffic_speed: (6.0, 8.0),
            sim: SimParams::default(),
            expert: ExpertParams::default(),
            camera: CameraConfig::default(),
            gaze: GazeOracleConfig::default(),
        }
    }
}

/// Steering source for an episode.
pub enum Controller<'a> {
    /// The trained pair of imitation networks, selected by command.
    Nets {
        follow: &'a PilotNetMini,
        overtake: &'a PilotNetMini,
        spec: DropoutSpec,
        gaze_source: GazeSource,
    },
    /// The scripted expert (self-consistency oracle).
    Expert,
    /// A constant steering angle in degrees.
    Fixed(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub s: f64,
    /// Offset from the nearest lane center, meters.
    pub lane_offset: f64,
    pub steering_deg: f32,
    pub command: ManeuverCommand,
    pub infraction: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub track: String,
    pub start_s: f64,
    pub end_s: f64,
    pub steps: Vec<StepRecord>,
    pub infraction_positions: Vec<f64>,
    pub overtake_attempts: usize,
    pub overtake_successes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub track: String,
    pub episode_km: f64,
    pub infractions: usize,
    pub dist_before_first_km: f64,
    pub dist_between_km: f64,
    pub overtake_attempts: usize,
    pub overtake_successes: usize,
}

impl EpisodeLog {
    pub fn episode_km(&self) -> f64 {
        (self.end_s - self.start_s) / 1000.0
    }

    pub fn infractions(&self) -> usize {
        self.infraction_positions.len()
    }

    pub fn distance_before_first_km(&self) -> f64 {
        match self.infraction_positions.first() {
            Some(&s) => (s - self.start_s) / 1000.0,
            None => self.episode_km(),
        }
    }

    /// Episode length over (infractions + 1): the mean of the inter-infraction
    /// segments including the head and tail.
    pub fn mean_distance_between_km(&self) -> f64 {
        self.episode_km() / (self.infractions() + 1) as f64
    }

    /// Segment lengths cut by the infractions, head and tail included.
    pub fn segments_km(&self) -> Vec<f64> {
        let mut cuts = vec![self.start_s];
        cuts.extend_from_slice(&self.infraction_positions);
        cuts.push(self.end_s);
        cuts.windows(2).map(|w| (w[1] - w[0]) / 1000.0).collect()
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            track: self.track.clone(),
            episode_km: self.episode_km(),
            infractions: self.infractions(),
            dist_before_first_km: self.distance_before_first_km(),
            dist_between_km: self.mean_distance_between_km(),
            overtake_attempts: self.overtake_attempts,
            overtake_successes: self.overtake_successes,
        }
    }

    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("s_m,lane_offset_m,steering_deg,command,infraction\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{:.3},{:.4},{:.4},{},{}\n",
                r.s,
                r.lane_offset,
                r.steering_deg,
                r.command.as_str(),
                r.infraction as u8
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn check_compat(spec: &DropoutSpec, source: GazeSource) -> Result<()> {
    if spec.phase != Phase::Test {
        return Err(Error::Config(
            "closed-loop runs use the test-phase dropout spec".into(),
        ));
    }
    let ok = matches!(
        (spec.mode, source),
        (DropoutMode::Gaze, GazeSource::Oracle)
            | (DropoutMode::Gaze, GazeSource::JitteredOracle)
            | (DropoutMode::CenterBlob, GazeSource::CenterBlob)
            | (DropoutMode::Uniform, GazeSource::None)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dropout mode {:?} is incompatible with gaze source {:?}",
            spec.mode, source
        )))
    }
}

/// Deviation from the nearest lane center. Equals |offset| - 0 centerline
/// deviation on single-lane tracks.
fn nearest_lane_deviation(track: &Track, offset: f64) -> f64 {
    (0..track.lane_count)
        .map(|l| (offset - track.lane_center(l)).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Run one episode under the given controller. Deterministic in
/// (track, controller checkpoint, config, seed).
pub fn run_episode(
    controller: &Controller,
    track: &Track,
    cfg: &ClosedLoopConfig,
    seed: u64,
) -> Result<EpisodeLog> {
    if let Controller::Nets {
        spec, gaze_source, ..
    } = controller
    {
        check_compat(spec, *gaze_source)?;
    }
    let start_s = 10.0;
    let end_s = start_s + cfg.episode_length_m;
    if end_s + 60.0 > track.total_length() {
        return Err(Error::Config(format!(
            "track {} is {:.0} m, too short for a {:.0} m episode",
            track.id,
            track.total_length(),
            cfg.episode_length_m
        )));
    }

    let root = RngStream::new(seed, 0);
    let mut state = WorldState::centered(track, start_s, cfg.sim.speed);
    if cfg.with_traffic {
        let mut rng = root.derive(TAG_CL_TRAFFIC);
        let mut s = start_s + 120.0;
        while s < end_s - 100.0 {
            state.traffic.push(TrafficCar {
                lane: 0,
                s,
                speed: rng.range_f32(cfg.traffic_speed.0 as f32, cfg.traffic_speed.1 as f32)
                    as f64,
            });
            s += rng.range_f32(cfg.traffic_spacing_m.0 as f32, cfg.traffic_spacing_m.1 as f32)
                as f64;
        }
    }
    // Stable identities for overtake accounting across removals.
    let mut car_keys: Vec<usize> = (0..state.traffic.len()).collect();

    let mut log = EpisodeLog {
        track: track.id.clone(),
        start_s,
        end_s: start_s,
        steps: Vec::new(),
        infraction_positions: Vec::new(),
        overtake_attempts: 0,
        overtake_successes: 0,
    };
    let gaze_rng = root.derive(TAG_CL_GAZE);
    let mut window: Option<(usize, bool)> = None; // (car key, clean so far)
    let mut step_idx = 0u64;

    while state.s < end_s {
        let (expert_steer, command) = expert_policy(track, &state, &cfg.expert, &cfg.sim);
        state.command = command;
        state.target_lane = match command {
            ManeuverCommand::Follow => cfg.expert.base_lane,
            ManeuverCommand::Overtake => cfg.expert.passing_lane,
        };

        // Overtake window bookkeeping keyed by the designated car.
        let target_key = expert_overtake_target(&state, &cfg.expert).map(|i| car_keys[i]);
        match (window, target_key) {
            (None, Some(key)) => {
                log.overtake_attempts += 1;
                window = Some((key, true));
            }
            (Some((key, clean)), tk) if tk != Some(key) => {
                // Window closed: success when no infraction happened inside
                // it and the car is genuinely behind (not removed early).
                let passed = car_keys
                    .iter()
                    .position(|&k| k == key)
                    .map(|i| state.traffic[i].s + cfg.expert.pass_clear_m <= state.s)
                    .unwrap_or(false);
                if clean && passed {
                    log.overtake_successes += 1;
                }
                window = match tk {
                    Some(new_key) => {
                        log.overtake_attempts += 1;
                        Some((new_key, true))
                    }
                    None => None,
                };
            }
            _ => {}
        }

        let steering = match controller {
            Controller::Expert => expert_steer,
            Controller::Fixed(deg) => *deg,
            Controller::Nets {
                follow,
                overtake,
                spec,
                gaze_source,
            } => {
                let frame = render_view_bytes(track, &state, &cfg.camera);
                let input: Vec<f32> = frame.iter().map(|&b| b as f32 / 255.0 - 0.5).collect();
                let frames =
                    Tensor::from_vec(&[1, cfg.camera.image_h, cfg.camera.image_w, 1], input)?;
                let net = match command {
                    ManeuverCommand::Follow => follow,
                    ManeuverCommand::Overtake => overtake,
                };
                let gaze = match gaze_source {
                    GazeSource::Oracle => Some(gaze_oracle(
                        track, &state, &cfg.camera, command, &cfg.expert, &cfg.gaze,
                    )),
                    GazeSource::JitteredOracle => {
                        let mut rng = gaze_rng.derive(step_idx);
                        Some(gaze_oracle_estimated(
                            track, &state, &cfg.camera, command, &cfg.expert, &cfg.gaze, &mut rng,
                        ))
                    }
                    GazeSource::CenterBlob | GazeSource::None => None,
                };
                let gaze_input = match &gaze {
                    Some(g) => GazeInput::Shared(g),
                    None => GazeInput::None,
                };
                let mut fwd_rng = root.derive(step_idx);
                let out = net.forward(&frames, spec, gaze_input, &mut fwd_rng)?;
                out[0].clamp(-cfg.sim.max_steer_deg as f32, cfg.sim.max_steer_deg as f32)
            }
        };

        state = step(track, &state, steering, &cfg.sim);
        step_idx += 1;

        let lane_dev = nearest_lane_deviation(track, state.offset);
        let mut infraction = lane_dev > track.lane_width / 2.0 + cfg.infraction_margin_m;
        let mut collided: Option<usize> = None;
        for (i, car) in state.traffic.iter().enumerate() {
            if (car.s - state.s).abs() < CAR_COLLISION_DS
                && (state.offset - track.lane_center(car.lane)).abs() < CAR_COLLISION_DD
            {
                collided = Some(i);
                infraction = true;
                break;
            }
        }

        if infraction {
            log.infraction_positions.push(state.s);
            if let Some((_, clean)) = window.as_mut() {
                *clean = false;
            }
            state.offset = track.lane_center(state.target_lane);
            state.heading_err = 0.0;
            if let Some(i) = collided {
                state.traffic.remove(i);
                car_keys.remove(i);
            }
        }

        log.steps.push(StepRecord {
            s: state.s,
            lane_offset: nearest_lane_deviation(track, state.offset),
            steering_deg: steering,
            command,
            infraction,
        });
    }
    // Resolve a window still open at episode end.
    if let Some((key, clean)) = window {
        let passed = car_keys
            .iter()
            .position(|&k| k == key)
            .map(|i| state.traffic[i].s + cfg.expert.pass_clear_m <= state.s)
            .unwrap_or(false);
        if clean && passed {
            log.overtake_successes += 1;
        }
    }
    log.end_s = state.s;
    Ok(log)
}

/// Episode with the command-selected imitation networks.
pub fn run_closed_loop(
    follow_net: &PilotNetMini,
    overtake_net: &PilotNetMini,
    track: &Track,
    cfg: &ClosedLoopConfig,
    spec: &DropoutSpec,
    gaze_source: GazeSource,
    seed: u64,
) -> Result<EpisodeLog> {
    run_episode(
        &Controller::Nets {
            follow: follow_net,
            overtake: overtake_net,
            spec: *spec,
            gaze_source,
        },
        track,
        cfg,
        seed,
    )
}
