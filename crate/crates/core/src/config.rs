//! Experiment configuration: one JSON document drives dataset generation,
//! training, evaluation, uncertainty sweeps, and closed-loop benchmarks.
//! Unknown keys are rejected; all randomness flows from `seed`.

use crate::dropout::{DropoutMode, DropoutSpec, Phase};
use crate::error::{Error, Result};
use crate::net::{ArchConfig, AugmentConfig, Optimizer};
use crate::simworld::{ClosedLoopConfig, DatasetConfig, GazeSource, TrackParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// The four dropout conditions compared throughout, plus the
/// matched-average-drop uniform control used by the uncertainty protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Uniform,
    UniformMatched,
    GazeReal,
    GazeEst,
    CenterBlob,
}

pub const COMPARED_VARIANTS: [Variant; 4] = [
    Variant::Uniform,
    Variant::GazeReal,
    Variant::GazeEst,
    Variant::CenterBlob,
];

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Uniform => "uniform",
            Variant::UniformMatched => "uniform_matched",
            Variant::GazeReal => "gaze_real",
            Variant::GazeEst => "gaze_est",
            Variant::CenterBlob => "center_blob",
        }
    }

    /// Stable numeric tag for rng stream derivation.
    pub fn ordinal(&self) -> u64 {
        match self {
            Variant::Uniform => 0,
            Variant::UniformMatched => 1,
            Variant::GazeReal => 2,
            Variant::GazeEst => 3,
            Variant::CenterBlob => 4,
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "uniform" => Ok(Variant::Uniform),
            "uniform_matched" => Ok(Variant::UniformMatched),
            "gaze_real" => Ok(Variant::GazeReal),
            "gaze_est" => Ok(Variant::GazeEst),
            "center_blob" => Ok(Variant::CenterBlob),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn mode(&self) -> DropoutMode {
        match self {
            Variant::Uniform | Variant::UniformMatched => DropoutMode::Uniform,
            Variant::GazeReal | Variant::GazeEst => DropoutMode::Gaze,
            Variant::CenterBlob => DropoutMode::CenterBlob,
        }
    }

    /// Gaze source feeding the networks in closed loop.
    pub fn gaze_source(&self) -> GazeSource {
        match self {
            Variant::Uniform | Variant::UniformMatched => GazeSource::None,
            Variant::GazeReal => GazeSource::Oracle,
            Variant::GazeEst => GazeSource::JitteredOracle,
            Variant::CenterBlob => GazeSource::CenterBlob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seen_track_seeds: Vec<u64>,
    pub unseen_track_seeds: Vec<u64>,
    pub seen: TrackParams,
    pub unseen: TrackParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub optimizer: Optimizer,
    pub augment: AugmentConfig,
    pub arch: ArchConfig,
    /// Deterministic stride-subsampling caps per branch.
    pub max_follow_samples: usize,
    pub max_overtake_samples: usize,
    /// Lighter recipe for the dp-sweep checkpoints.
    pub sweep_epochs: usize,
    pub sweep_max_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on MAE evaluation samples per split (stride-subsampled).
    pub max_eval_samples: usize,
    /// Frames per split used for MC-dropout uncertainty.
    pub uncertainty_frames: usize,
    /// Stochastic passes per frame (T).
    pub t_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopPlan {
    /// Variants benchmarked in closed loop.
    pub variants: Vec<Variant>,
    /// Episodes per (variant, traffic case, training seed).
    pub episodes_per_seed: usize,
    pub episode: ClosedLoopConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub train: TrainRecipe,
    /// Variants trained and compared by eval/uncertainty/closed-loop.
    pub variants: Vec<Variant>,
    /// dp for the modulated variants (the maximum drop probability).
    pub gaze_dp: f32,
    /// dp for the plain uniform baseline.
    pub uniform_dp: f32,
    /// Training seeds; medians are taken across them.
    pub train_seeds: Vec<u64>,
    /// dp values for the error/uncertainty sweep (both dropout families).
    pub dp_list: Vec<f32>,
    pub eval: EvalConfig,
    pub closed_loop: ClosedLoopPlan,
}

impl ExperimentConfig {
    /// Built-in experiment sized for a desktop CPU run.
    pub fn default_experiment(out_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            seed: 20240915,
            out_dir,
            world: WorldConfig {
                seen_track_seeds: vec![1, 2],
                unseen_track_seeds: vec![3, 4, 5],
                seen: TrackParams::pool_default(crate::simworld::StyleFamily::Seen),
                unseen: TrackParams::pool_default(crate::simworld::StyleFamily::Unseen),
            },
            dataset: DatasetConfig::default(),
            train: TrainRecipe {
                epochs: 5,
                batch_size: 64,
                learning_rate: 1e-3,
                momentum: 0.9,
                optimizer: Optimizer::SgdMomentum,
                augment: AugmentConfig::default(),
                arch: ArchConfig::default(),
                max_follow_samples: 1500,
                max_overtake_samples: 400,
                sweep_epochs: 4,
                sweep_max_samples: 900,
            },
            variants: COMPARED_VARIANTS.to_vec(),
            gaze_dp: 0.7,
            uniform_dp: 0.1,
            train_seeds: vec![11, 12, 13, 14, 15],
            dp_list: vec![0.1, 0.3, 0.5, 0.65, 0.8],
            eval: EvalConfig {
                max_eval_samples: 600,
                uncertainty_frames: 32,
                t_passes: 50,
            },
            closed_loop: ClosedLoopPlan {
                variants: vec![Variant::GazeEst, Variant::Uniform],
                episodes_per_seed: 2,
                episode: ClosedLoopConfig::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.seen.validate()?;
        self.world.unseen.validate()?;
        self.train.arch.validate()?;
        if self.world.seen_track_seeds.is_empty() || self.world.unseen_track_seeds.is_empty() {
            return Err(Error::Config("both track pools need seeds".into()));
        }
        if self.train_seeds.is_empty() {
            return Err(Error::Config("train_seeds must not be empty".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variants must not be empty".into()));
        }
        for dp in self.dp_list.iter().chain([&self.gaze_dp, &self.uniform_dp]) {
            if !(0.0..=1.0).contains(dp) {
                return Err(Error::Config(format!("dp {dp} outside [0, 1]")));
            }
        }
        if self.eval.t_passes < 1 {
            return Err(Error::Config("t_passes must be >= 1".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.dataset.trials_per_track < 2 {
            return Err(Error::Config(
                "need at least 2 trials per track (the last is the seen holdout)".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config encoding failed: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Test-phase dropout spec a variant uses at evaluation time;
    /// `matched_dp` is the measured average drop probability for the
    /// matched-uniform control.
    pub fn eval_spec(&self, variant: Variant, matched_dp: f32) -> DropoutSpec {
        self.train_spec(variant, matched_dp).with_phase(Phase::Test)
    }

    /// Train-phase dropout spec for a variant.
    pub fn train_spec(&self, variant: Variant, matched_dp: f32) -> DropoutSpec {
        match variant {
            Variant::Uniform => DropoutSpec::uniform(self.uniform_dp, Phase::Train),
            Variant::UniformMatched => DropoutSpec::uniform(matched_dp, Phase::Train),
            Variant::GazeReal | Variant::GazeEst => DropoutSpec::gaze(self.gaze_dp, Phase::Train),
            Variant::CenterBlob => DropoutSpec::center_blob(self.gaze_dp, None, Phase::Train),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default_experiment(dir.path().join("out"));
        cfg.validate().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default_experiment(dir.path().join("out"));
        let path = dir.path().join("config.json");
        let mut text = serde_json::to_string_pretty(&cfg).unwrap();
        text = text.replacen("\"seed\"", "\"sead_typo\": 4,\n  \"seed\"", 1);
        std::fs::write(&path, text).unwrap();
        match ExperimentConfig::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("sead_typo"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_dp_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default_experiment(dir.path().join("out"));
        cfg.gaze_dp = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::Uniform,
            Variant::UniformMatched,
            Variant::GazeReal,
            Variant::GazeEst,
            Variant::CenterBlob,
        ] {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("bogus").is_err());
    }
}
