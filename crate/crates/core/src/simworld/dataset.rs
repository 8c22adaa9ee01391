//! Dataset emission: expert demonstrations sampled into PGM frames plus
//! real and estimated gaze maps, indexed by a JSON-lines file. A fixed
//! fraction of samples comes from drift-recovery episodes that start
//! off-center with the expert steering back.

use super::{
    expert_policy, step, CameraConfig, ExpertParams, ManeuverCommand, SimParams, Track,
    TrafficCar, WorldState,
};
use crate::error::{Error, Result};
use crate::gazefield::{
    gaze_oracle, gaze_oracle_estimated, load_pgm, load_pgm_bytes, save_pgm, save_pgm_bytes,
    GazeMap, GazeOracleConfig,
};
use crate::simworld::render::render_view_bytes;
use crate::simworld::track::StyleFamily;
use crate::tensor::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

const TAG_TRAFFIC: u64 = 0x74_72_61_66; // "traf"
const TAG_GAZE_EST: u64 = 0x67_65_73_74; // "gest"
const TAG_RECOVERY: u64 = 0x72_65_63_76; // "recv"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub trials_per_track: usize,
    pub trial_length_m: f64,
    /// Every k-th control step becomes a sample.
    pub sample_stride: usize,
    /// Fraction of samples coming from drift-recovery episodes.
    pub drift_fraction: f64,
    /// Trial indices that carry slower traffic (and therefore overtakes).
    pub traffic_trials: Vec<usize>,
    pub traffic_spacing_m: (f64, f64),
    pub traffic_speed: (f64, f64),
    pub sim: SimParams,
    pub expert: ExpertParams,
    pub camera: CameraConfig,
    pub gaze: GazeOracleConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            trials_per_track: 4,
            trial_length_m: 900.0,
            sample_stride: 5,
            drift_fraction: 0.10,
            traffic_trials: vec![1, 3],
            traffic_spacing_m: (210.0, 330.0),
            traffic_speed: (6.0, 8.0),
            sim: SimParams::default(),
            expert: ExpertParams::default(),
            camera: CameraConfig::default(),
            gaze: GazeOracleConfig::default(),
        }
    }
}

/// One line of the dataset index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub frame: String,
    pub gaze_real: String,
    pub gaze_est: String,
    pub steering_deg: f32,
    pub command: String,
    pub track: String,
    pub split: String,
    pub trial: usize,
    pub recovery: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn index_path(root: &Path) -> PathBuf {
        root.join("index.jsonl")
    }

    pub fn write(&self) -> Result<()> {
        let path = Self::index_path(&self.root);
        let mut out = Vec::new();
        for rec in &self.records {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Dataset(format!("index encoding failed: {e}")))?;
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<DatasetIndex> {
        let path = Self::index_path(root);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Dataset(format!("bad index record at line {}: {e}", lineno + 1))
            })?;
            records.push(rec);
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            records,
        })
    }
}

/// A fully decoded sample.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub frame: Vec<u8>,
    pub gaze_real: GazeMap,
    pub gaze_est: GazeMap,
    pub steering_deg: f32,
    pub command: ManeuverCommand,
    pub track: String,
    pub split: StyleFamily,
    pub recovery: bool,
}

/// Decode the referenced files for a set of index records; errors name the
/// offending record.
pub fn load_samples(index: &DatasetIndex, records: &[SampleRecord]) -> Result<Vec<LoadedSample>> {
    records
        .iter()
        .map(|rec| {
            let fail = |what: &str, e: Error| {
                Error::Dataset(format!("sample {}: {what}: {e}", rec.frame))
            };
            let (_, _, frame) = load_pgm_bytes(&index.root.join(&rec.frame))
                .map_err(|e| fail("frame unreadable", e))?;
            let gaze_real = load_pgm(&index.root.join(&rec.gaze_real))
                .map_err(|e| fail("real gaze unreadable", e))?;
            let gaze_est = load_pgm(&index.root.join(&rec.gaze_est))
                .map_err(|e| fail("estimated gaze unreadable", e))?;
            let command = match rec.command.as_str() {
                "follow" => ManeuverCommand::Follow,
                "overtake" => ManeuverCommand::Overtake,
                other => {
                    return Err(Error::Dataset(format!(
                        "sample {}: unknown command {other:?}",
                        rec.frame
                    )))
                }
            };
            let split = match rec.split.as_str() {
                "seen" => StyleFamily::Seen,
                "unseen" => StyleFamily::Unseen,
                other => {
                    return Err(Error::Dataset(format!(
                        "sample {}: unknown split {other:?}",
                        rec.frame
                    )))
                }
            };
            Ok(LoadedSample {
                frame,
                gaze_real,
                gaze_est,
                steering_deg: rec.steering_deg,
                command,
                track: rec.track.clone(),
                split,
                recovery: rec.recovery,
            })
        })
        .collect()
}

struct Emitter<'a> {
    root: &'a Path,
    cfg: &'a DatasetConfig,
    records: Vec<SampleRecord>,
}

impl<'a> Emitter<'a> {
    fn emit(
        &mut self,
        track: &Track,
        state: &WorldState,
        steering: f32,
        command: ManeuverCommand,
        trial: usize,
        recovery: bool,
        name: &str,
        est_rng: &mut RngStream,
    ) -> Result<()> {
        let cam = &self.cfg.camera;
        let frame = render_view_bytes(track, state, cam);
        let real = gaze_oracle(track, state, cam, command, &self.cfg.expert, &self.cfg.gaze);
        let est = gaze_oracle_estimated(
            track,
            state,
            cam,
            command,
            &self.cfg.expert,
            &self.cfg.gaze,
            est_rng,
        );

        let frame_rel = format!("frames/{name}.pgm");
        let real_rel = format!("gaze_real/{name}.pgm");
        let est_rel = format!("gaze_est/{name}.pgm");
        save_pgm_bytes(
            &self.root.join(&frame_rel),
            cam.image_h,
            cam.image_w,
            &frame,
        )?;
        save_pgm(&real, &self.root.join(&real_rel))?;
        save_pgm(&est, &self.root.join(&est_rel))?;
        self.records.push(SampleRecord {
            frame: frame_rel,
            gaze_real: real_rel,
            gaze_est: est_rel,
            steering_deg: steering,
            command: command.as_str().to_string(),
            track: track.id.clone(),
            split: track.style.family.as_str().to_string(),
            trial,
            recovery,
        });
        Ok(())
    }
}

fn spawn_traffic(
    cfg: &DatasetConfig,
    start_s: f64,
    end_s: f64,
    rng: &mut RngStream,
) -> Vec<TrafficCar> {
    let mut cars = Vec::new();
    let mut s = start_s + 110.0;
    while s < end_s - 80.0 {
        cars.push(TrafficCar {
            lane: 0,
            s,
            speed: rng.range_f32(cfg.traffic_speed.0 as f32, cfg.traffic_speed.1 as f32) as f64,
        });
        s += rng.range_f32(cfg.traffic_spacing_m.0 as f32, cfg.traffic_spacing_m.1 as f32) as f64;
    }
    cars
}

/// Generate the dataset directory for a list of tracks: per-sample frame
/// PGM, real and estimated gaze PGMs, and a JSON-lines index.
pub fn gen_dataset(
    tracks: &[Track],
    cfg: &DatasetConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetIndex> {
    if tracks.is_empty() {
        return Err(Error::Dataset("no tracks given".into()));
    }
    let mut ids = BTreeSet::new();
    for t in tracks {
        if !ids.insert(t.id.clone()) {
            return Err(Error::Dataset(format!("duplicate track id {:?}", t.id)));
        }
        let needed = 10.0 + cfg.trials_per_track as f64 * 15.0 + cfg.trial_length_m + 60.0;
        if t.total_length() < needed {
            return Err(Error::Dataset(format!(
                "track {} is {:.0} m, need {:.0} m for {} trials",
                t.id,
                t.total_length(),
                needed,
                cfg.trials_per_track
            )));
        }
    }
    for sub in ["frames", "gaze_real", "gaze_est"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let root_rng = RngStream::new(seed, 0);
    let mut emitter = Emitter {
        root: out_dir,
        cfg,
        records: Vec::new(),
    };

    for (track_idx, track) in tracks.iter().enumerate() {
        for trial in 0..cfg.trials_per_track {
            let trial_tag = (track_idx * 100 + trial) as u64;
            let mut traffic_rng = root_rng.derive_many(&[TAG_TRAFFIC, trial_tag]);
            let mut est_rng = root_rng.derive_many(&[TAG_GAZE_EST, trial_tag]);

            let start_s = 10.0 + trial as f64 * 15.0;
            let end_s = start_s + cfg.trial_length_m;
            let mut state = WorldState::centered(track, start_s, cfg.sim.speed);
            if cfg.traffic_trials.contains(&trial) {
                state.traffic = spawn_traffic(cfg, start_s, end_s, &mut traffic_rng);
            }

            let mut main_count = 0usize;
            let mut tick = 0usize;
            while state.s < end_s {
                let (steer, command) = expert_policy(track, &state, &cfg.expert, &cfg.sim);
                state.command = command;
                if tick % cfg.sample_stride == 0 {
                    let name = format!("{}_t{}_{:05}", track.id, trial, main_count);
                    emitter.emit(track, &state, steer, command, trial, false, &name, &mut est_rng)?;
                    main_count += 1;
                }
                state = step(track, &state, steer, &cfg.sim);
                tick += 1;
            }

            // Drift recovery: enough episodes to hit the configured fraction
            // exactly (rounded) for this trial.
            let f = cfg.drift_fraction;
            let want = if f > 0.0 {
                ((main_count as f64) * f / (1.0 - f)).round() as usize
            } else {
                0
            };
            let mut rec_rng = root_rng.derive_many(&[TAG_RECOVERY, trial_tag]);
            let mut got = 0usize;
            while got < want {
                let s0 = start_s + 40.0 + rec_rng.next_f32() as f64 * (cfg.trial_length_m - 120.0);
                let side = if rec_rng.next_f32() < 0.5 { 1.0 } else { -1.0 };
                let mut st = WorldState::centered(track, s0, cfg.sim.speed);
                st.offset += side * rec_rng.range_f32(0.7, 1.4) as f64;
                st.heading_err = -side * rec_rng.range_f32(0.03, 0.15) as f64;
                let mut tick = 0usize;
                while got < want && tick < 60 {
                    let (steer, command) = expert_policy(track, &st, &cfg.expert, &cfg.sim);
                    if tick % cfg.sample_stride == 0 {
                        let name = format!("{}_r{}_{:05}", track.id, trial, got + want * trial);
                        emitter.emit(track, &st, steer, command, trial, true, &name, &mut est_rng)?;
                        got += 1;
                    }
                    st = step(track, &st, steer, &cfg.sim);
                    tick += 1;
                }
            }
        }
    }

    let index = DatasetIndex {
        root: out_dir.to_path_buf(),
        records: emitter.records,
    };
    index.write()?;
    Ok(index)
}

/// Convenience writer for the split of an episode log, used by the CLI.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Dataset(format!("encoding failed: {e}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{generate_track, TrackParams};

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            trials_per_track: 2,
            trial_length_m: 150.0,
            sample_stride: 6,
            traffic_trials: vec![1],
            ..DatasetConfig::default()
        }
    }

    fn tiny_tracks() -> Vec<Track> {
        let seen = TrackParams {
            length_m: 400.0,
            ..TrackParams::pool_default(StyleFamily::Seen)
        };
        let unseen = TrackParams {
            length_m: 400.0,
            ..TrackParams::pool_default(StyleFamily::Unseen)
        };
        vec![
            generate_track(1, &seen).unwrap(),
            generate_track(3, &unseen).unwrap(),
        ]
    }

    #[test]
    fn dataset_files_exist_and_index_is_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let index = gen_dataset(&tiny_tracks(), &small_cfg(), dir.path(), 5).unwrap();
        assert!(!index.records.is_empty());
        for rec in &index.records {
            assert!(dir.path().join(&rec.frame).exists(), "{}", rec.frame);
            assert!(dir.path().join(&rec.gaze_real).exists());
            assert!(dir.path().join(&rec.gaze_est).exists());
        }
        let reloaded = DatasetIndex::load(dir.path()).unwrap();
        assert_eq!(reloaded.records.len(), index.records.len());

        let samples = load_samples(&index, &index.records[..4]).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0].frame.len(), 48 * 128);
    }

    #[test]
    fn recovery_fraction_close_to_target() {
        let dir = tempfile::tempdir().unwrap();
        let index = gen_dataset(&tiny_tracks(), &small_cfg(), dir.path(), 6).unwrap();
        let total = index.records.len() as f64;
        let recovery = index.records.iter().filter(|r| r.recovery).count() as f64;
        let frac = recovery / total;
        assert!((frac - 0.10).abs() <= 0.01, "recovery fraction {frac}");
    }

    #[test]
    fn steering_concentrates_near_zero_on_straight_tracks() {
        let p = TrackParams {
            length_m: 400.0,
            curvature_max: 0.0,
            ..TrackParams::pool_default(StyleFamily::Seen)
        };
        let track = generate_track(2, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.traffic_trials.clear();
        let index = gen_dataset(&[track], &cfg, dir.path(), 7).unwrap();
        let mut mags: Vec<f32> = index
            .records
            .iter()
            .map(|r| r.steering_deg.abs())
            .collect();
        mags.sort_by(f32::total_cmp);
        let median = mags[mags.len() / 2];
        assert!(median < 1.0, "median |steering| {median}");
    }

    #[test]
    fn traffic_trials_contain_overtake_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.trial_length_m = 320.0;
        let index = gen_dataset(&tiny_tracks(), &cfg, dir.path(), 8).unwrap();
        assert!(
            index.records.iter().any(|r| r.command == "overtake"),
            "no overtake samples generated"
        );
    }

    #[test]
    fn duplicate_track_ids_are_rejected() {
        let t = tiny_tracks();
        let dup = vec![t[0].clone(), t[0].clone()];
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            gen_dataset(&dup, &small_cfg(), dir.path(), 1),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn rerun_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = gen_dataset(&tiny_tracks(), &small_cfg(), dir_a.path(), 9).unwrap();
        let _ = gen_dataset(&tiny_tracks(), &small_cfg(), dir_b.path(), 9).unwrap();
        for rec in &a.records {
            let fa = fs::read(dir_a.path().join(&rec.frame)).unwrap();
            let fb = fs::read(dir_b.path().join(&rec.frame)).unwrap();
            assert_eq!(fa, fb);
        }
        let ia = fs::read(DatasetIndex::index_path(dir_a.path())).unwrap();
        let ib = fs::read(DatasetIndex::index_path(dir_b.path())).unwrap();
        assert_eq!(ia, ib);
    }
}
