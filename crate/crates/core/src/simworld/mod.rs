//! Procedural multi-lane driving world: track generation, driver-view
//! rendering, a pure-pursuit expert with overtaking, kinematic stepping,
//! dataset emission, and closed-loop evaluation with infraction accounting.

mod closedloop;
mod dataset;
mod expert;
mod render;
mod track;

pub use closedloop::{
    run_closed_loop, run_episode, ClosedLoopConfig, Controller, EpisodeLog, EpisodeSummary,
    GazeSource, StepRecord,
};
pub use dataset::{
    gen_dataset, load_samples, write_jsonl, DatasetConfig, DatasetIndex, LoadedSample,
    SampleRecord,
};
pub use expert::{expert_policy, overtake_target as expert_overtake_target, step, ExpertParams, SimParams};
pub use render::{render_view, render_view_bytes};
pub use track::{
    generate_track, style_for, Segment, StyleFamily, Track, TrackParams, TrackStyle,
};

use serde::{Deserialize, Serialize};

/// High-level maneuver selecting which imitation network drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverCommand {
    Follow,
    Overtake,
}

impl ManeuverCommand {
    pub fn as_str(&self) -> &'static str {
        match self {
            ManeuverCommand::Follow => "follow",
            ManeuverCommand::Overtake => "overtake",
        }
    }

    pub fn branch(&self) -> crate::net::Branch {
        match self {
            ManeuverCommand::Follow => crate::net::Branch::Follow,
            ManeuverCommand::Overtake => crate::net::Branch::Overtake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficCar {
    pub lane: usize,
    pub s: f64,
    pub speed: f64,
}

/// Ego and traffic state in track coordinates. `offset` is lateral distance
/// from the track centerline, positive to the left; `heading_err` is the ego
/// heading minus the local track tangent.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub s: f64,
    pub offset: f64,
    pub heading_err: f64,
    pub speed: f64,
    pub traffic: Vec<TrafficCar>,
    pub command: ManeuverCommand,
    pub target_lane: usize,
}

impl WorldState {
    pub fn centered(track: &Track, s: f64, speed: f64) -> WorldState {
        WorldState {
            s,
            offset: track.lane_center(0),
            heading_err: 0.0,
            speed,
            traffic: Vec::new(),
            command: ManeuverCommand::Follow,
            target_lane: 0,
        }
    }

    /// Ego pose in the world frame: (x, y, heading).
    pub fn ego_pose(&self, track: &Track) -> (f64, f64, f64) {
        let (x, y, h) = track.point_at(self.s);
        (
            x - self.offset * h.sin(),
            y + self.offset * h.cos(),
            h + self.heading_err,
        )
    }

    /// World point -> ego frame (x forward, y left).
    pub fn to_ego(&self, track: &Track, px: f64, py: f64) -> (f64, f64) {
        let (ex, ey, eh) = self.ego_pose(track);
        let (dx, dy) = (px - ex, py - ey);
        (
            dx * eh.cos() + dy * eh.sin(),
            -dx * eh.sin() + dy * eh.cos(),
        )
    }
}

/// Pinhole camera fixed to the ego vehicle, pitched slightly down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub focal_px: f64,
    pub height_m: f64,
    pub pitch_rad: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            image_h: 48,
            image_w: 128,
            focal_px: 54.0,
            height_m: 1.3,
            pitch_rad: 0.105,
        }
    }
}

impl CameraConfig {
    pub fn cx(&self) -> f64 {
        (self.image_w as f64 - 1.0) / 2.0
    }

    pub fn cy(&self) -> f64 {
        (self.image_h as f64 - 1.0) / 2.0
    }

    /// First image row strictly below the horizon.
    pub fn horizon_row(&self) -> f64 {
        self.cy() - self.focal_px * self.pitch_rad.tan()
    }

    /// Project an ego-frame point (x forward, y left, z up) to (row, col).
    /// Returns None for points at or behind the image plane.
    pub fn project(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
        let (sin_p, cos_p) = self.pitch_rad.sin_cos();
        let rel_z = z - self.height_m;
        let pf = x * cos_p - rel_z * sin_p;
        if pf < 0.5 {
            return None;
        }
        let pu = x * sin_p + rel_z * cos_p;
        let row = self.cy() - self.focal_px * pu / pf;
        let col = self.cx() - self.focal_px * y / pf;
        Some((row, col))
    }

    /// Ground distance x and camera depth pf for an image row, when the ray
    /// through that row hits the ground plane ahead of the camera.
    pub fn ground_for_row(&self, row: usize) -> Option<(f64, f64)> {
        let beta = (self.cy() - row as f64) / self.focal_px;
        let (sin_p, cos_p) = self.pitch_rad.sin_cos();
        let den = sin_p - beta * cos_p;
        if den <= 1e-6 {
            return None;
        }
        let x = self.height_m * (cos_p + beta * sin_p) / den;
        let pf = x * cos_p + self.height_m * sin_p;
        Some((x, pf))
    }
}
