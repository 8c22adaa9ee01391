//! Experiment orchestration behind the CLI: dataset generation with a hashed
//! manifest, per-variant training, offline MAE evaluation, MC-dropout
//! uncertainty sweeps, closed-loop benchmarks, gaze-map similarity reports,
//! and the chained reproduction run with claim checks.
//!
//! Every output file has deterministic bytes for a given config; wall-clock
//! information goes only to the sidecar `run.log`.

use crate::config::{ExperimentConfig, Variant, COMPARED_VARIANTS};
use crate::dropout::{DropoutMode, DropoutSpec, Phase};
use crate::error::{Error, Result};
use crate::gazefield::{center_blob, load_pgm, GazeMap};
use crate::metrics;
use crate::net::{
    frame_to_input, load_checkpoint, save_checkpoint, train, Branch, GazeInput, PilotNetMini,
    TrainConfig, TrainSample,
};
use crate::simworld::{
    gen_dataset, load_samples, run_closed_loop, DatasetIndex, EpisodeLog, LoadedSample,
    ManeuverCommand, SampleRecord, Track,
};
use crate::tensor::{stream_id, RngStream, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const TAG_MC: u64 = 0x6d63_6d63;
const TAG_EPISODE: u64 = 0x6570_6973;

pub struct Experiment {
    pub cfg: ExperimentConfig,
}

/// Record-level dataset partition; files are loaded on demand.
pub struct Partition {
    pub train_follow: Vec<SampleRecord>,
    pub train_overtake: Vec<SampleRecord>,
    pub eval_seen: Vec<SampleRecord>,
    pub eval_unseen: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClaimResult {
    pub name: String,
    pub pass: bool,
    pub details: String,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Experiment> {
        cfg.validate()?;
        Ok(Experiment { cfg })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("dataset")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("reports")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("traces")
    }

    fn ensure_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    pub fn log(&self, line: &str) {
        // Timestamps live only here, never in reports.
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = self.cfg.out_dir.join("run.log");
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(path) {
            use std::io::Write;
            let _ = writeln!(f, "[{stamp}] {line}");
        }
    }

    pub fn tracks(&self) -> Result<(Vec<Track>, Vec<Track>)> {
        let mut seen = Vec::new();
        for &s in &self.cfg.world.seen_track_seeds {
            seen.push(crate::simworld::generate_track(s, &self.cfg.world.seen)?);
        }
        let mut unseen = Vec::new();
        for &s in &self.cfg.world.unseen_track_seeds {
            unseen.push(crate::simworld::generate_track(s, &self.cfg.world.unseen)?);
        }
        Ok((seen, unseen))
    }

    // ----- gen-data -------------------------------------------------------

    /// Generate the dataset and write a manifest with per-trial-group
    /// content hashes.
    pub fn gen_data(&self) -> Result<DatasetIndex> {
        self.ensure_dir(&self.cfg.out_dir)?;
        let (seen, unseen) = self.tracks()?;
        let mut all = seen;
        all.extend(unseen);
        let dir = self.dataset_dir();
        self.ensure_dir(&dir)?;
        let index = gen_dataset(&all, &self.cfg.dataset, &dir, self.cfg.seed)?;
        self.write_manifest(&index)?;
        Ok(index)
    }

    fn write_manifest(&self, index: &DatasetIndex) -> Result<()> {
        #[derive(Serialize)]
        struct TrialGroup {
            track: String,
            trial: usize,
            samples: usize,
            sha256: String,
        }
        #[derive(Serialize)]
        struct Manifest {
            total_samples: usize,
            trial_groups: Vec<TrialGroup>,
        }

        let mut groups: BTreeMap<(String, usize), Vec<&SampleRecord>> = BTreeMap::new();
        for rec in &index.records {
            groups
                .entry((rec.track.clone(), rec.trial))
                .or_default()
                .push(rec);
        }
        let mut trial_groups = Vec::new();
        for ((track, trial), recs) in groups {
            let mut hasher = Sha256::new();
            for rec in &recs {
                for rel in [&rec.frame, &rec.gaze_real, &rec.gaze_est] {
                    let path = index.root.join(rel);
                    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    hasher.update(&bytes);
                }
                hasher.update(rec.steering_deg.to_le_bytes());
            }
            trial_groups.push(TrialGroup {
                track,
                trial,
                samples: recs.len(),
                sha256: hex(&hasher.finalize()),
            });
        }
        let manifest = Manifest {
            total_samples: index.records.len(),
            trial_groups,
        };
        let path = self.dataset_dir().join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Dataset(format!("manifest encoding failed: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load_index(&self) -> Result<DatasetIndex> {
        let dir = self.dataset_dir();
        if !dir.join("manifest.json").exists() {
            return Err(Error::Dataset(format!(
                "dataset manifest missing under {}; run gen-data first",
                dir.display()
            )));
        }
        DatasetIndex::load(&dir)
    }

    // ----- partition ------------------------------------------------------

    /// Training trials are all seen-pool trials except the last, which is the
    /// seen evaluation holdout; every unseen-pool sample is evaluation.
    /// Recovery samples train but are excluded from evaluation.
    pub fn partition(&self, index: &DatasetIndex) -> Result<Partition> {
        let holdout = self.cfg.dataset.trials_per_track - 1;
        let mut train_follow = Vec::new();
        let mut train_overtake = Vec::new();
        let mut eval_seen = Vec::new();
        let mut eval_unseen = Vec::new();
        for rec in &index.records {
            match rec.split.as_str() {
                "seen" if rec.trial < holdout => {
                    if rec.command == "overtake" {
                        train_overtake.push(rec.clone());
                    } else {
                        train_follow.push(rec.clone());
                    }
                }
                "seen" => {
                    if !rec.recovery {
                        eval_seen.push(rec.clone());
                    }
                }
                "unseen" => {
                    if !rec.recovery {
                        eval_unseen.push(rec.clone());
                    }
                }
                other => {
                    return Err(Error::Dataset(format!("unknown split tag {other:?}")));
                }
            }
        }
        Ok(Partition {
            train_follow: subsample(train_follow, self.cfg.train.max_follow_samples),
            train_overtake: subsample(train_overtake, self.cfg.train.max_overtake_samples),
            eval_seen: subsample(eval_seen, self.cfg.eval.max_eval_samples),
            eval_unseen: subsample(eval_unseen, self.cfg.eval.max_eval_samples),
        })
    }

    /// Measured average drop probability of the estimated-gaze condition at
    /// the first dropout slot, over the evaluation gaze maps. This is the dp
    /// given to the matched-uniform control.
    pub fn matched_dp(&self, index: &DatasetIndex, part: &Partition) -> Result<f32> {
        let net = PilotNetMini::zeroed(self.cfg.train.arch.clone())?;
        let (h, w) = net.slot_dims()[0];
        let spec = DropoutSpec::gaze(self.cfg.gaze_dp, Phase::Train);
        let mut maps = Vec::new();
        for rec in part.eval_seen.iter().chain(&part.eval_unseen) {
            maps.push(load_pgm(&index.root.join(&rec.gaze_est))?);
        }
        let adp = metrics::average_drop_probability(&spec, &maps, (h, w))?;
        Ok(adp as f32)
    }

    // ----- training -------------------------------------------------------

    pub fn checkpoint_path(&self, variant: Variant, seed: u64, branch: Branch) -> PathBuf {
        self.checkpoints_dir().join(format!(
            "{}_s{}_{}.ckpt",
            variant.as_str(),
            seed,
            branch.as_str()
        ))
    }

    pub fn sweep_checkpoint_path(&self, mode: DropoutMode, dp: f32) -> PathBuf {
        let mode = match mode {
            DropoutMode::Uniform => "uniform",
            DropoutMode::Gaze => "gaze",
            DropoutMode::CenterBlob => "center_blob",
        };
        self.checkpoints_dir()
            .join(format!("sweep_{mode}_dp{dp:.2}_follow.ckpt"))
    }

    fn to_train_samples(
        &self,
        loaded: &[LoadedSample],
        variant: Variant,
    ) -> Vec<TrainSample> {
        loaded
            .iter()
            .map(|s| TrainSample {
                frame: s.frame.clone(),
                gaze: match variant {
                    Variant::GazeReal => Some(s.gaze_real.clone()),
                    Variant::GazeEst => Some(s.gaze_est.clone()),
                    _ => None,
                },
                steering_deg: s.steering_deg,
            })
            .collect()
    }

    fn train_one(
        &self,
        samples: &[TrainSample],
        branch: Branch,
        dropout: DropoutSpec,
        seed: u64,
        epochs: usize,
        out_path: &Path,
        trace_name: &str,
    ) -> Result<()> {
        let cfg = TrainConfig {
            branch,
            dropout,
            epochs,
            batch_size: self.cfg.train.batch_size,
            learning_rate: self.cfg.train.learning_rate,
            momentum: self.cfg.train.momentum,
            optimizer: self.cfg.train.optimizer,
            seed: stream_id(&[self.cfg.seed, seed]),
            augment: self.cfg.train.augment,
            arch: self.cfg.train.arch.clone(),
        };
        let (cp, trace) = train(samples, &cfg)?;
        save_checkpoint(&cp, out_path)?;
        let mut csv = String::from("epoch,split,mse,mae\n");
        for row in &trace {
            let _ = writeln!(csv, "{},train,{:.6},{:.6}", row.epoch, row.mse, row.mae);
        }
        let path = self.traces_dir().join(format!("{trace_name}.csv"));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }

    /// Train both branches of one variant for one seed.
    pub fn train_variant(
        &self,
        index: &DatasetIndex,
        part: &Partition,
        variant: Variant,
        seed: u64,
        matched: f32,
    ) -> Result<()> {
        self.ensure_dir(&self.checkpoints_dir())?;
        self.ensure_dir(&self.traces_dir())?;
        let spec = self.cfg.train_spec(variant, matched);
        for (branch, records) in [
            (Branch::Follow, &part.train_follow),
            (Branch::Overtake, &part.train_overtake),
        ] {
            let loaded = load_samples(index, records)?;
            let samples = self.to_train_samples(&loaded, variant);
            let name = format!("{}_s{}_{}", variant.as_str(), seed, branch.as_str());
            self.train_one(
                &samples,
                branch,
                spec,
                seed,
                self.cfg.train.epochs,
                &self.checkpoint_path(variant, seed, branch),
                &name,
            )?;
            self.log(&format!("trained {name}"));
        }
        Ok(())
    }

    /// Follow-branch checkpoints across the dp sweep, both dropout families,
    /// with the lighter sweep recipe.
    pub fn train_sweep(&self, index: &DatasetIndex, part: &Partition) -> Result<()> {
        self.ensure_dir(&self.checkpoints_dir())?;
        self.ensure_dir(&self.traces_dir())?;
        let records = subsample(part.train_follow.clone(), self.cfg.train.sweep_max_samples);
        let loaded = load_samples(index, &records)?;
        let seed = self.cfg.train_seeds[0];
        for &dp in &self.cfg.dp_list {
            for mode in [DropoutMode::Uniform, DropoutMode::Gaze] {
                let (variant, spec) = match mode {
                    DropoutMode::Uniform => {
                        (Variant::Uniform, DropoutSpec::uniform(dp, Phase::Train))
                    }
                    _ => (Variant::GazeEst, DropoutSpec::gaze(dp, Phase::Train)),
                };
                let samples = self.to_train_samples(&loaded, variant);
                let path = self.sweep_checkpoint_path(mode, dp);
                let name = format!("sweep_{}_dp{dp:.2}", variant.as_str());
                self.train_one(
                    &samples,
                    Branch::Follow,
                    spec,
                    seed,
                    self.cfg.train.sweep_epochs,
                    &path,
                    &name,
                )?;
                self.log(&format!("trained {name}"));
            }
        }
        Ok(())
    }

    /// All variants x seeds, the matched-uniform control, and the dp sweep.
    pub fn train_all(&self, index: &DatasetIndex) -> Result<()> {
        let part = self.partition(index)?;
        let matched = self.matched_dp(index, &part)?;
        let mut variants = self.cfg.variants.clone();
        if !variants.contains(&Variant::UniformMatched) {
            variants.push(Variant::UniformMatched);
        }
        for &variant in &variants {
            for &seed in &self.cfg.train_seeds {
                self.train_variant(index, &part, variant, seed, matched)?;
            }
        }
        self.train_sweep(index, &part)?;
        Ok(())
    }

    fn load_net(&self, variant: Variant, seed: u64, branch: Branch) -> Result<PilotNetMini> {
        let path = self.checkpoint_path(variant, seed, branch);
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "missing checkpoint {}; run train first",
                path.display()
            )));
        }
        load_checkpoint(&path)?.to_net()
    }

    // ----- offline evaluation ---------------------------------------------

    /// Batched test-phase predictions for a set of samples. The variant
    /// picks which gaze map feeds the mask; the caller supplies the spec.
    fn predict(
        &self,
        follow: &PilotNetMini,
        overtake: &PilotNetMini,
        samples: &[LoadedSample],
        variant: Variant,
        spec: &DropoutSpec,
    ) -> Result<Vec<f64>> {
        let spec = spec.with_phase(Phase::Test);
        let (h, w) = (self.cfg.train.arch.input_h, self.cfg.train.arch.input_w);
        let mut preds = vec![0.0f64; samples.len()];
        let mut rng = RngStream::new(self.cfg.seed, 1); // unused at test phase
        for branch in [ManeuverCommand::Follow, ManeuverCommand::Overtake] {
            let idx: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].command == branch)
                .collect();
            let net = match branch {
                ManeuverCommand::Follow => follow,
                ManeuverCommand::Overtake => overtake,
            };
            for chunk in idx.chunks(64) {
                let mut data = Vec::with_capacity(chunk.len() * h * w);
                for &i in chunk {
                    data.extend(frame_to_input(&samples[i].frame));
                }
                let frames = Tensor::from_vec(&[chunk.len(), h, w, 1], data)?;
                let gaze_refs: Vec<&GazeMap> = chunk
                    .iter()
                    .map(|&i| match variant {
                        Variant::GazeReal => &samples[i].gaze_real,
                        _ => &samples[i].gaze_est,
                    })
                    .collect();
                let gaze = match variant {
                    Variant::GazeReal | Variant::GazeEst => GazeInput::PerSample(&gaze_refs),
                    _ => GazeInput::None,
                };
                let out = net.forward(&frames, &spec, gaze, &mut rng)?;
                for (k, &i) in chunk.iter().enumerate() {
                    preds[i] = out[k] as f64;
                }
            }
        }
        Ok(preds)
    }

    /// MAE per (variant, seed, split) plus per-(variant, split) medians.
    pub fn eval_report(&self) -> Result<()> {
        let index = self.load_index()?;
        let part = self.partition(&index)?;
        let matched = self.matched_dp(&index, &part)?;
        self.ensure_dir(&self.reports_dir())?;
        let splits = [
            ("seen", load_samples(&index, &part.eval_seen)?),
            ("unseen", load_samples(&index, &part.eval_unseen)?),
        ];

        let mut rows = String::from("variant,split,seed,n,mae_deg\n");
        let mut medians: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for &variant in &self.cfg.variants {
            for &seed in &self.cfg.train_seeds {
                let follow = self.load_net(variant, seed, Branch::Follow)?;
                let overtake = self.load_net(variant, seed, Branch::Overtake)?;
                for (split, samples) in &splits {
                    if samples.is_empty() {
                        return Err(Error::Dataset(format!("split {split} has no samples")));
                    }
                    let spec = self.cfg.eval_spec(variant, matched);
                    let preds = self.predict(&follow, &overtake, samples, variant, &spec)?;
                    let targets: Vec<f64> =
                        samples.iter().map(|s| s.steering_deg as f64).collect();
                    let mae = metrics::mae_steering(&preds, &targets)?;
                    let _ = writeln!(
                        rows,
                        "{},{},{},{},{:.6}",
                        variant.as_str(),
                        split,
                        seed,
                        samples.len(),
                        mae
                    );
                    medians
                        .entry((variant.as_str().to_string(), split.to_string()))
                        .or_default()
                        .push(mae);
                }
            }
        }
        write_report(&self.reports_dir().join("eval_report.csv"), &rows)?;

        let mut summary = String::from("variant,split,median_mae_deg\n");
        for ((variant, split), maes) in &medians {
            let _ = writeln!(summary, "{},{},{:.6}", variant, split, median(maes));
        }
        write_report(&self.reports_dir().join("eval_summary.csv"), &summary)
    }

    // ----- uncertainty ------------------------------------------------------

    /// Frames for MC uncertainty: follow-command samples, stride-subsampled.
    fn uncertainty_records(&self, part: &Partition) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
        let follow_only = |recs: &[SampleRecord]| -> Vec<SampleRecord> {
            recs.iter()
                .filter(|r| r.command == "follow")
                .cloned()
                .collect()
        };
        (
            subsample(follow_only(&part.eval_seen), self.cfg.eval.uncertainty_frames),
            subsample(
                follow_only(&part.eval_unseen),
                self.cfg.eval.uncertainty_frames,
            ),
        )
    }

    /// Dataset-average MC variance of one follow net over a set of frames.
    fn avg_variance(
        &self,
        net: &PilotNetMini,
        samples: &[LoadedSample],
        spec: &DropoutSpec,
        use_gaze: Option<Variant>,
        rng_tag: u64,
    ) -> Result<f64> {
        let (h, w) = (self.cfg.train.arch.input_h, self.cfg.train.arch.input_w);
        let t = self.cfg.eval.t_passes;
        let variances: Result<Vec<f64>> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let frame = Tensor::from_vec(&[1, h, w, 1], frame_to_input(&s.frame))?;
                let gaze = match use_gaze {
                    Some(Variant::GazeReal) => Some(&s.gaze_real),
                    Some(Variant::GazeEst) => Some(&s.gaze_est),
                    _ => None,
                };
                let mut rng =
                    RngStream::new(self.cfg.seed, stream_id(&[TAG_MC, rng_tag, i as u64]));
                let (_, var) = metrics::mc_dropout_stats(net, &frame, spec, gaze, t, &mut rng)?;
                Ok(var)
            })
            .collect();
        let variances = variances?;
        Ok(variances.iter().sum::<f64>() / variances.len().max(1) as f64)
    }

    /// Per-variant dataset-average variance at matched average drop
    /// probability, plus the dp sweep (MAE and variance per dp and split).
    pub fn uncertainty_report(&self) -> Result<()> {
        let index = self.load_index()?;
        let part = self.partition(&index)?;
        let matched = self.matched_dp(&index, &part)?;
        self.ensure_dir(&self.reports_dir())?;

        let (rec_seen, rec_unseen) = self.uncertainty_records(&part);
        let frames = [
            ("seen", load_samples(&index, &rec_seen)?),
            ("unseen", load_samples(&index, &rec_unseen)?),
        ];
        let slot0 = PilotNetMini::zeroed(self.cfg.train.arch.clone())?.slot_dims()[0];

        // Matched comparison across variants.
        let mut variants = self.cfg.variants.clone();
        if !variants.contains(&Variant::UniformMatched) {
            variants.push(Variant::UniformMatched);
        }
        let mut rows = String::from("variant,split,seed,t,avg_var_deg2,avg_drop_prob\n");
        let mut med: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for &variant in &variants {
            let spec = self.cfg.train_spec(variant, matched);
            for &seed in &self.cfg.train_seeds {
                let net = self.load_net(variant, seed, Branch::Follow)?;
                for (split, samples) in &frames {
                    let tag = stream_id(&[variant.ordinal(), seed, (*split == "unseen") as u64]);
                    let avg_var =
                        self.avg_variance(&net, samples, &spec, Some(variant), tag)?;
                    let maps: Vec<GazeMap> = samples
                        .iter()
                        .map(|s| match variant {
                            Variant::GazeReal => s.gaze_real.clone(),
                            _ => s.gaze_est.clone(),
                        })
                        .collect();
                    let adp = metrics::average_drop_probability(&spec, &maps, slot0)?;
                    let _ = writeln!(
                        rows,
                        "{},{},{},{},{:.6},{:.6}",
                        variant.as_str(),
                        split,
                        seed,
                        self.cfg.eval.t_passes,
                        avg_var,
                        adp
                    );
                    med.entry((variant.as_str().into(), (*split).into()))
                        .or_default()
                        .push(avg_var);
                }
            }
        }
        write_report(&self.reports_dir().join("uncertainty_report.csv"), &rows)?;

        let mut summary = String::from("variant,split,median_avg_var_deg2\n");
        for ((variant, split), vars) in &med {
            let _ = writeln!(summary, "{},{},{:.6}", variant, split, median(vars));
        }
        write_report(
            &self.reports_dir().join("uncertainty_summary.csv"),
            &summary,
        )?;

        // Matched-dp pairing is computed, not hardcoded.
        let pairing = format!(
            "{{\n  \"gaze_dp\": {:.6},\n  \"matched_uniform_dp\": {:.6}\n}}\n",
            self.cfg.gaze_dp, matched
        );
        write_report(&self.reports_dir().join("matched_dp.json"), &pairing)?;

        self.dp_sweep_report(&index, &part, &frames)
    }

    /// The Fig. 3/4 analog: per-dp MAE and average variance for both dropout
    /// families on both splits.
    fn dp_sweep_report(
        &self,
        index: &DatasetIndex,
        part: &Partition,
        frames: &[(&str, Vec<LoadedSample>); 2],
    ) -> Result<()> {
        let eval_samples = [
            ("seen", load_samples(index, &part.eval_seen)?),
            ("unseen", load_samples(index, &part.eval_unseen)?),
        ];
        let slot0 = PilotNetMini::zeroed(self.cfg.train.arch.clone())?.slot_dims()[0];
        let mut rows = String::from("dp,mode,split,mae_deg,avg_var_deg2,avg_drop_prob\n");
        for &dp in &self.cfg.dp_list {
            for mode in [DropoutMode::Uniform, DropoutMode::Gaze] {
                let path = self.sweep_checkpoint_path(mode, dp);
                if !path.exists() {
                    return Err(Error::Checkpoint(format!(
                        "missing sweep checkpoint {}",
                        path.display()
                    )));
                }
                let net = load_checkpoint(&path)?.to_net()?;
                let (variant, train_spec, mode_name) = match mode {
                    DropoutMode::Uniform => (
                        Variant::Uniform,
                        DropoutSpec::uniform(dp, Phase::Train),
                        "uniform",
                    ),
                    _ => (Variant::GazeEst, DropoutSpec::gaze(dp, Phase::Train), "gaze"),
                };
                for (split, samples) in &eval_samples {
                    let preds = self.predict(&net, &net, samples, variant, &train_spec)?;
                    let targets: Vec<f64> =
                        samples.iter().map(|s| s.steering_deg as f64).collect();
                    let mae = metrics::mae_steering(&preds, &targets)?;
                    let mc_samples = &frames[(*split == "unseen") as usize].1;
                    let tag = stream_id(&[0x5357, dp.to_bits() as u64, (*split == "unseen") as u64]);
                    let avg_var =
                        self.avg_variance(&net, mc_samples, &train_spec, Some(variant), tag)?;
                    let maps: Vec<GazeMap> =
                        mc_samples.iter().map(|s| s.gaze_est.clone()).collect();
                    let adp = metrics::average_drop_probability(&train_spec, &maps, slot0)?;
                    let _ = writeln!(
                        rows,
                        "{:.2},{},{},{:.6},{:.6},{:.6}",
                        dp, mode_name, split, mae, avg_var, adp
                    );
                }
            }
        }
        write_report(&self.reports_dir().join("dp_sweep.csv"), &rows)
    }

    // ----- closed loop ------------------------------------------------------

    pub fn closed_loop_report(&self) -> Result<()> {
        let (_, unseen) = self.tracks()?;
        self.ensure_dir(&self.reports_dir())?;
        let episodes_dir = self.reports_dir().join("episodes");
        self.ensure_dir(&episodes_dir)?;
        let index = self.load_index()?;
        let part = self.partition(&index)?;
        let matched = self.matched_dp(&index, &part)?;

        struct Job {
            variant: Variant,
            with_cars: bool,
            seed: u64,
            episode: usize,
            track_idx: usize,
            ep_seed: u64,
        }
        let mut jobs = Vec::new();
        for &variant in &self.cfg.closed_loop.variants {
            for with_cars in [true, false] {
                for (si, &seed) in self.cfg.train_seeds.iter().enumerate() {
                    for e in 0..self.cfg.closed_loop.episodes_per_seed {
                        let ordinal = si * self.cfg.closed_loop.episodes_per_seed + e;
                        jobs.push(Job {
                            variant,
                            with_cars,
                            seed,
                            episode: e,
                            track_idx: ordinal % unseen.len(),
                            ep_seed: stream_id(&[TAG_EPISODE, self.cfg.seed, ordinal as u64]),
                        });
                    }
                }
            }
        }

        // Nets are shared across episodes of the same (variant, seed).
        let mut nets: BTreeMap<(String, u64), (PilotNetMini, PilotNetMini)> = BTreeMap::new();
        for job in &jobs {
            let key = (job.variant.as_str().to_string(), job.seed);
            if !nets.contains_key(&key) {
                nets.insert(
                    key,
                    (
                        self.load_net(job.variant, job.seed, Branch::Follow)?,
                        self.load_net(job.variant, job.seed, Branch::Overtake)?,
                    ),
                );
            }
        }

        let logs: Result<Vec<EpisodeLog>> = jobs
            .par_iter()
            .map(|job| {
                let (follow, overtake) = &nets[&(job.variant.as_str().to_string(), job.seed)];
                let mut cfg = self.cfg.closed_loop.episode.clone();
                cfg.with_traffic = job.with_cars;
                let spec = self.cfg.eval_spec(job.variant, matched);
                run_closed_loop(
                    follow,
                    overtake,
                    &unseen[job.track_idx],
                    &cfg,
                    &spec,
                    job.variant.gaze_source(),
                    job.ep_seed,
                )
            })
            .collect();
        let logs = logs?;

        let mut rows = String::from(
            "variant,case,seed,episode,track,episode_km,infractions,dist_before_first_km,dist_between_km,overtake_attempts,overtake_successes\n",
        );
        let mut agg: BTreeMap<(String, String), Vec<&EpisodeLog>> = BTreeMap::new();
        for (job, log) in jobs.iter().zip(&logs) {
            let case = if job.with_cars { "with_cars" } else { "no_cars" };
            let _ = writeln!(
                rows,
                "{},{},{},{},{},{:.6},{},{:.6},{:.6},{},{}",
                job.variant.as_str(),
                case,
                job.seed,
                job.episode,
                log.track,
                log.episode_km(),
                log.infractions(),
                log.distance_before_first_km(),
                log.mean_distance_between_km(),
                log.overtake_attempts,
                log.overtake_successes
            );
            agg.entry((job.variant.as_str().to_string(), case.to_string()))
                .or_default()
                .push(log);
            let step_path = episodes_dir.join(format!(
                "{}_{}_s{}_e{}.csv",
                job.variant.as_str(),
                case,
                job.seed,
                job.episode
            ));
            log.write_step_csv(&step_path)?;
        }
        write_report(&self.reports_dir().join("closed_loop_episodes.csv"), &rows)?;

        #[derive(Serialize)]
        struct CaseSummary {
            variant: String,
            case: String,
            episodes: usize,
            success_rate: Option<f64>,
            median_dist_before_first_km: f64,
            median_dist_between_km: f64,
        }
        let mut summaries = Vec::new();
        for ((variant, case), eps) in &agg {
            let (mut att, mut succ) = (0usize, 0usize);
            for log in eps {
                att += log.overtake_attempts;
                succ += log.overtake_successes;
            }
            let success_rate = if *case == "with_cars" && att > 0 {
                Some(succ as f64 / att as f64)
            } else {
                None
            };
            let firsts: Vec<f64> = eps.iter().map(|l| l.distance_before_first_km()).collect();
            let betweens: Vec<f64> = eps.iter().map(|l| l.mean_distance_between_km()).collect();
            summaries.push(CaseSummary {
                variant: variant.clone(),
                case: case.clone(),
                episodes: eps.len(),
                success_rate,
                median_dist_before_first_km: median(&firsts),
                median_dist_between_km: median(&betweens),
            });
        }
        let text = serde_json::to_string_pretty(&summaries)
            .map_err(|e| Error::Config(format!("summary encoding failed: {e}")))?;
        write_report(
            &self.reports_dir().join("closed_loop_summary.json"),
            &(text + "\n"),
        )
    }

    // ----- gaze metrics -----------------------------------------------------

    /// Table-style saliency similarity per track: estimated map and center
    /// blob, each against the oracle map.
    pub fn gaze_metrics_report(&self) -> Result<()> {
        let index = self.load_index()?;
        let part = self.partition(&index)?;
        self.ensure_dir(&self.reports_dir())?;
        let mut by_track: BTreeMap<String, Vec<&SampleRecord>> = BTreeMap::new();
        for rec in part.eval_seen.iter().chain(&part.eval_unseen) {
            by_track.entry(rec.track.clone()).or_default().push(rec);
        }
        let mut rows = String::from("track,split,comparison,kl_nats,cc\n");
        for (track, recs) in &by_track {
            let capped: Vec<SampleRecord> =
                subsample(recs.iter().map(|r| (*r).clone()).collect(), 40);
            let mut center: Option<GazeMap> = None;
            let (mut kl_est, mut cc_est, mut kl_cb, mut cc_cb) = (0.0, 0.0, 0.0, 0.0);
            let mut n = 0usize;
            for rec in &capped {
                let real = load_pgm(&index.root.join(&rec.gaze_real))?;
                let est = load_pgm(&index.root.join(&rec.gaze_est))?;
                let cb = center.get_or_insert_with(|| {
                    center_blob(
                        real.height(),
                        real.width(),
                        self.cfg.dataset.gaze.sigma_frac * real.width() as f64,
                    )
                    .expect("positive sigma")
                });
                kl_est += metrics::kl_divergence(&real, &est)?;
                cc_est += metrics::correlation_coefficient(&real, &est)?;
                kl_cb += metrics::kl_divergence(&real, cb)?;
                cc_cb += metrics::correlation_coefficient(&real, cb)?;
                n += 1;
            }
            let split = &recs[0].split;
            let nf = n as f64;
            let _ = writeln!(
                rows,
                "{},{},estimated,{:.6},{:.6}",
                track,
                split,
                kl_est / nf,
                cc_est / nf
            );
            let _ = writeln!(
                rows,
                "{},{},center_blob,{:.6},{:.6}",
                track,
                split,
                kl_cb / nf,
                cc_cb / nf
            );
        }
        write_report(&self.reports_dir().join("gaze_metrics.csv"), &rows)
    }

    // ----- reproduce --------------------------------------------------------

    /// Full pipeline; with `check`, evaluate the comparative claims and
    /// return them (all must pass for exit code 0).
    pub fn reproduce(&self, check: bool) -> Result<Vec<ClaimResult>> {
        let index = self.gen_data()?;
        self.log("dataset generated");
        self.train_all(&index)?;
        self.log("training complete");
        self.eval_report()?;
        self.log("eval report written");
        self.uncertainty_report()?;
        self.log("uncertainty report written");
        self.closed_loop_report()?;
        self.log("closed-loop report written");
        self.gaze_metrics_report()?;
        self.log("gaze metrics written");
        if !check {
            return Ok(Vec::new());
        }
        let claims = self.check_claims()?;
        let text = serde_json::to_string_pretty(&claims)
            .map_err(|e| Error::Config(format!("claims encoding failed: {e}")))?;
        write_report(&self.reports_dir().join("claims.json"), &(text + "\n"))?;
        Ok(claims)
    }

    /// Directional claims over the written reports.
    pub fn check_claims(&self) -> Result<Vec<ClaimResult>> {
        let mut claims = Vec::new();
        let eval = read_csv(&self.reports_dir().join("eval_summary.csv"))?;
        let get_mae = |variant: &str, split: &str| -> Result<f64> {
            csv_lookup(&eval, &[("variant", variant), ("split", split)], "median_mae_deg")
        };
        let mae_gaze_est = get_mae("gaze_est", "unseen")?;
        let mae_gaze_real = get_mae("gaze_real", "unseen")?;
        let mae_uniform = get_mae("uniform", "unseen")?;
        claims.push(ClaimResult {
            name: "unseen_mae_gaze_est_at_most_0.9x_uniform".into(),
            pass: mae_gaze_est <= 0.9 * mae_uniform,
            details: format!("gaze_est {mae_gaze_est:.4} deg vs uniform {mae_uniform:.4} deg"),
        });
        claims.push(ClaimResult {
            name: "unseen_mae_gaze_real_at_most_gaze_est".into(),
            pass: mae_gaze_real <= mae_gaze_est,
            details: format!("gaze_real {mae_gaze_real:.4} deg vs gaze_est {mae_gaze_est:.4} deg"),
        });

        let unc = read_csv(&self.reports_dir().join("uncertainty_summary.csv"))?;
        let get_var = |variant: &str, split: &str| -> Result<f64> {
            csv_lookup(
                &unc,
                &[("variant", variant), ("split", split)],
                "median_avg_var_deg2",
            )
        };
        let v_real_unseen = get_var("gaze_real", "unseen")?;
        let v_est_unseen = get_var("gaze_est", "unseen")?;
        let v_matched_unseen = get_var("uniform_matched", "unseen")?;
        claims.push(ClaimResult {
            name: "unseen_variance_gaze_below_matched_uniform".into(),
            pass: v_real_unseen < v_matched_unseen && v_est_unseen < v_matched_unseen,
            details: format!(
                "gaze_real {v_real_unseen:.4}, gaze_est {v_est_unseen:.4}, uniform_matched {v_matched_unseen:.4} deg^2"
            ),
        });
        let mut seen_lt_unseen = true;
        let mut details = String::new();
        for variant in COMPARED_VARIANTS {
            let vs = get_var(variant.as_str(), "seen")?;
            let vu = get_var(variant.as_str(), "unseen")?;
            seen_lt_unseen &= vs < vu;
            let _ = write!(details, "{}: {:.4} vs {:.4}; ", variant.as_str(), vs, vu);
        }
        claims.push(ClaimResult {
            name: "variance_seen_below_unseen_per_variant".into(),
            pass: seen_lt_unseen,
            details,
        });

        let sweep = read_csv(&self.reports_dir().join("dp_sweep.csv"))?;
        let mut rho_ok = true;
        let mut rho_details = String::new();
        for mode in ["uniform", "gaze"] {
            for split in ["seen", "unseen"] {
                let mut dps = Vec::new();
                let mut vars = Vec::new();
                for row in sweep.rows_matching(&[("mode", mode), ("split", split)]) {
                    dps.push(sweep.get(row, "dp")?);
                    vars.push(sweep.get(row, "avg_var_deg2")?);
                }
                let rho = metrics::spearman_rank_correlation(&dps, &vars)?;
                rho_ok &= rho > 0.8;
                let _ = write!(rho_details, "{mode}/{split}: {rho:.3}; ");
            }
        }
        claims.push(ClaimResult {
            name: "variance_rises_with_dp_spearman_above_0.8".into(),
            pass: rho_ok,
            details: rho_details,
        });

        let text = fs::read_to_string(self.reports_dir().join("closed_loop_summary.json"))
            .map_err(|e| Error::io(self.reports_dir().join("closed_loop_summary.json"), e))?;
        let summaries: Vec<serde_json::Value> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad closed-loop summary: {e}")))?;
        let field = |variant: &str, case: &str, key: &str| -> Result<f64> {
            summaries
                .iter()
                .find(|s| s["variant"] == variant && s["case"] == case)
                .and_then(|s| s[key].as_f64())
                .ok_or_else(|| {
                    Error::Config(format!("missing closed-loop field {variant}/{case}/{key}"))
                })
        };
        let mut cl_ok = true;
        let mut cl_details = String::new();
        for case in ["with_cars", "no_cars"] {
            let g = field("gaze_est", case, "median_dist_between_km")?;
            let u = field("uniform", case, "median_dist_between_km")?;
            cl_ok &= g >= 1.2 * u;
            let _ = write!(cl_details, "{case}: gaze_est {g:.3} km vs uniform {u:.3} km; ");
        }
        claims.push(ClaimResult {
            name: "closed_loop_dist_between_gaze_est_at_least_1.2x_uniform".into(),
            pass: cl_ok,
            details: cl_details,
        });
        let sr_gaze = field("gaze_est", "with_cars", "success_rate")?;
        let sr_uniform = field("uniform", "with_cars", "success_rate")?;
        claims.push(ClaimResult {
            name: "overtake_success_rate_gaze_est_above_uniform".into(),
            pass: sr_gaze > sr_uniform,
            details: format!("gaze_est {sr_gaze:.3} vs uniform {sr_uniform:.3}"),
        });
        Ok(claims)
    }
}

/// Deterministic stride subsampling preserving order.
pub fn subsample<T: Clone>(items: Vec<T>, cap: usize) -> Vec<T> {
    if items.len() <= cap || cap == 0 {
        return items;
    }
    (0..cap)
        .map(|i| items[i * items.len() / cap].clone())
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_report(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Tiny CSV reader for our own reports (no quoting in any of them).
pub struct CsvTable {
    header: Vec<String>,
    data: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn rows_matching(&self, filters: &[(&str, &str)]) -> Vec<usize> {
        (0..self.data.len())
            .filter(|&r| {
                filters.iter().all(|(col, want)| {
                    self.header
                        .iter()
                        .position(|h| h == col)
                        .map(|c| self.data[r][c] == *want)
                        .unwrap_or(false)
                })
            })
            .collect()
    }

    pub fn get(&self, row: usize, col: &str) -> Result<f64> {
        let c = self
            .header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Config(format!("missing column {col}")))?;
        self.data[row][c]
            .parse()
            .map_err(|_| Error::Config(format!("bad float in column {col}")))
    }
}

fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let data = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok(CsvTable { header, data })
}

fn csv_lookup(table: &CsvTable, filters: &[(&str, &str)], col: &str) -> Result<f64> {
    let rows = table.rows_matching(filters);
    match rows.as_slice() {
        [row] => table.get(*row, col),
        [] => Err(Error::Config(format!("no row matching {filters:?}"))),
        _ => Err(Error::Config(format!("ambiguous rows for {filters:?}"))),
    }
}
