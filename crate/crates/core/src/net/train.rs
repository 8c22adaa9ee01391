//! Minibatch training with online photometric augmentation.
//!
//! All randomness flows from `TrainConfig.seed` through fixed stream tags:
//! 1 = weight init, 2 = epoch shuffling, 3 = per-sample augmentation keyed
//! (epoch, sample index), 4 = dropout masks keyed (epoch, step). Training is
//! therefore bit-reproducible for a given (dataset order, config) pair.

use super::{ArchConfig, Checkpoint, GazeInput, Grads, PilotNetMini};
use crate::dropout::{DropoutMode, DropoutSpec, Phase};
use crate::error::{Error, Result};
use crate::gazefield::GazeMap;
use crate::tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_DROPOUT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Follow,
    Overtake,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Follow => "follow",
            Branch::Overtake => "overtake",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub contrast: (f32, f32),
    pub brightness: (f32, f32),
    pub gamma: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            contrast: (0.8, 1.2),
            brightness: (-0.08, 0.08),
            gamma: (0.8, 1.25),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub branch: Branch,
    pub dropout: DropoutSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub arch: ArchConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.dropout.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One training record: an 8-bit grayscale frame (row-major), the gaze map
/// used for modulated dropout, and the steering label.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub frame: Vec<u8>,
    pub gaze: Option<GazeMap>,
    pub steering_deg: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Photometric lookup table for one image: contrast and brightness around
/// mid-gray, then gamma, then mean-centering to [-0.5, 0.5]. Frames arrive
/// 8-bit, so a 256-entry table is exact.
fn augment_lut(cfg: &AugmentConfig, rng: &mut RngStream) -> [f32; 256] {
    let (c, b, g) = if cfg.enabled {
        (
            rng.range_f32(cfg.contrast.0, cfg.contrast.1),
            rng.range_f32(cfg.brightness.0, cfg.brightness.1),
            rng.range_f32(cfg.gamma.0, cfg.gamma.1),
        )
    } else {
        (1.0, 0.0, 1.0)
    };
    let mut lut = [0.0f32; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        let x = i as f32 / 255.0;
        let adjusted = ((x - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        *v = adjusted.powf(g) - 0.5;
    }
    lut
}

struct SgdState {
    velocity: Vec<f32>,
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

enum OptState {
    Sgd(SgdState),
    Adam(AdamState),
}

impl OptState {
    fn new(opt: Optimizer, len: usize) -> OptState {
        match opt {
            Optimizer::SgdMomentum => OptState::Sgd(SgdState {
                velocity: vec![0.0; len],
            }),
            Optimizer::Adam => OptState::Adam(AdamState {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            }),
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &Grads, lr: f32, momentum: f32) {
        match self {
            OptState::Sgd(s) => {
                for ((p, v), &g) in params.iter_mut().zip(&mut s.velocity).zip(&grads.0) {
                    *v = momentum * *v - lr * g;
                    *p += *v;
                }
            }
            OptState::Adam(s) => {
                s.t += 1;
                let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                let bc1 = 1.0 - b1.powi(s.t as i32);
                let bc2 = 1.0 - b2.powi(s.t as i32);
                for (((p, m), v), &g) in params
                    .iter_mut()
                    .zip(&mut s.m)
                    .zip(&mut s.v)
                    .zip(&grads.0)
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Assemble a mean-centered batch tensor from 8-bit frames.
fn assemble_batch(
    samples: &[TrainSample],
    order: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    root: &RngStream,
    h: usize,
    w: usize,
) -> Tensor {
    let n = order.len();
    let mut data = vec![0.0f32; n * h * w];
    for (bi, &si) in order.iter().enumerate() {
        let mut rng = root.derive_many(&[TAG_AUGMENT, epoch as u64, si as u64]);
        let lut = augment_lut(&cfg.augment, &mut rng);
        let dst = &mut data[bi * h * w..(bi + 1) * h * w];
        for (d, &b) in dst.iter_mut().zip(&samples[si].frame) {
            *d = lut[b as usize];
        }
    }
    Tensor::from_vec(&[n, h, w, 1], data).expect("batch shape consistent")
}

/// Behavioral-cloning training loop. Returns the final checkpoint and the
/// per-epoch loss trace; bit-reproducible given (samples order, config).
pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochStats>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (h, w) = (cfg.arch.input_h, cfg.arch.input_w);
    for (i, s) in samples.iter().enumerate() {
        if s.frame.len() != h * w {
            return Err(Error::Dataset(format!(
                "sample {} frame holds {} pixels, expected {}x{}",
                i,
                s.frame.len(),
                h,
                w
            )));
        }
        if cfg.dropout.mode == DropoutMode::Gaze && s.gaze.is_none() {
            return Err(Error::Dataset(format!(
                "sample {i} lacks a gaze map but dropout mode is gaze"
            )));
        }
        if !s.steering_deg.is_finite() {
            return Err(Error::Dataset(format!(
                "sample {i} steering label is not finite"
            )));
        }
    }

    let root = RngStream::new(cfg.seed, 0);
    let mut net = PilotNetMini::new(cfg.arch.clone(), &mut root.derive(TAG_INIT))?;
    let mut opt = OptState::new(cfg.optimizer, net.param_count());
    let train_spec = cfg.dropout.with_phase(Phase::Train);
    let mut trace = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        root.derive_many(&[TAG_SHUFFLE, epoch as u64])
            .shuffle(&mut order);

        let (mut sq_sum, mut abs_sum, mut count) = (0.0f64, 0.0f64, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frames = assemble_batch(samples, batch, cfg, epoch, &root, h, w);
            let targets: Vec<f32> = batch.iter().map(|&si| samples[si].steering_deg).collect();
            let gaze_refs: Vec<&GazeMap> = batch
                .iter()
                .filter_map(|&si| samples[si].gaze.as_ref())
                .collect();
            let gaze = if gaze_refs.len() == batch.len() {
                GazeInput::PerSample(&gaze_refs)
            } else {
                GazeInput::None
            };

            let mut drop_rng = root.derive_many(&[TAG_DROPOUT, epoch as u64, step as u64]);
            let (_, grads, outputs) =
                net.backward_with_outputs(&frames, &targets, &train_spec, gaze, &mut drop_rng)?;

            for (y, t) in outputs.iter().zip(&targets) {
                let e = *y as f64 - *t as f64;
                sq_sum += e * e;
                abs_sum += e.abs();
            }
            count += batch.len();

            opt.step(
                net.params_mut(),
                &grads,
                cfg.learning_rate,
                cfg.momentum,
            );
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Config(format!(
                    "training diverged at epoch {epoch} step {step}; lower the learning rate"
                )));
            }
        }
        trace.push(EpochStats {
            epoch,
            mse: sq_sum / count as f64,
            mae: abs_sum / count as f64,
        });
    }

    let cp = Checkpoint::from_net(&net, cfg.branch, cfg.dropout, cfg.seed, cfg.epochs);
    Ok((cp, trace))
}

/// Deterministic frame decode for evaluation: no augmentation, mean-centered.
pub fn frame_to_input(frame: &[u8]) -> Vec<f32> {
    frame.iter().map(|&b| b as f32 / 255.0 - 0.5).collect()
}
