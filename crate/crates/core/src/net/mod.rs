//! Steering regression network: five convolution layers and four
//! fully-connected layers, ReLU activations, dropout slots after the first
//! two convolutions, one scalar output in degrees. Parameters live in a
//! single flat buffer so checkpoints, optimizers, and gradient checks all
//! see the same layout.

mod checkpoint;
mod layers;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use train::{
    frame_to_input, train, AugmentConfig, Branch, EpochStats, Optimizer, TrainConfig,
    TrainSample,
};

use crate::dropout::{keep_mask_for, sample_binary_mask, DropoutMode, DropoutSpec, Phase};
use crate::error::{Error, Result};
use crate::gazefield::GazeMap;
use crate::tensor::{RngStream, Tensor};
use layers::ConvShape;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub conv_filters: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub fc_sizes: Vec<usize>,
    /// Indices of conv layers whose (post-ReLU) output gets a dropout mask.
    pub dropout_slots: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_h: 48,
            input_w: 128,
            conv_filters: vec![24, 36, 48, 64, 64],
            conv_kernels: vec![5, 5, 5, 3, 3],
            conv_strides: vec![2, 2, 2, 1, 1],
            fc_sizes: vec![100, 50, 10, 1],
            dropout_slots: vec![0, 1],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config("input resolution must be positive".into()));
        }
        if self.conv_filters.is_empty()
            || self.conv_filters.len() != self.conv_kernels.len()
            || self.conv_filters.len() != self.conv_strides.len()
        {
            return Err(Error::Config(
                "conv filter/kernel/stride lists must be equal-length and nonempty".into(),
            ));
        }
        if self.conv_filters.iter().any(|&f| f == 0)
            || self.conv_kernels.iter().any(|&k| k == 0)
            || self.conv_strides.iter().any(|&s| s == 0)
        {
            return Err(Error::Config("conv extents must be positive".into()));
        }
        if self.fc_sizes.is_empty() || *self.fc_sizes.last().unwrap() != 1 {
            return Err(Error::Config(
                "fc_sizes must end in a single scalar output unit".into(),
            ));
        }
        if self
            .dropout_slots
            .iter()
            .any(|&i| i >= self.conv_filters.len())
        {
            return Err(Error::Config("dropout slot index out of range".into()));
        }
        Ok(())
    }

    fn conv_shapes(&self) -> Vec<ConvShape> {
        let mut shapes = Vec::with_capacity(self.conv_filters.len());
        let (mut h, mut w, mut c) = (self.input_h, self.input_w, 1);
        for i in 0..self.conv_filters.len() {
            let s = ConvShape::same(
                h,
                w,
                c,
                self.conv_filters[i],
                self.conv_kernels[i],
                self.conv_strides[i],
            );
            h = s.oh;
            w = s.ow;
            c = s.oc;
            shapes.push(s);
        }
        shapes
    }
}

/// (offset, len) views into the flat parameter buffer, conv then fc,
/// weights before biases within each layer.
#[derive(Debug, Clone)]
struct ParamLayout {
    segments: Vec<(usize, usize)>,
}

impl ParamLayout {
    fn segment(&self, idx: usize) -> (usize, usize) {
        self.segments[idx]
    }
}

/// Gaze maps attached to a forward pass: none, one shared map, or one map
/// per sample.
#[derive(Debug, Clone, Copy)]
pub enum GazeInput<'a> {
    None,
    Shared(&'a GazeMap),
    PerSample(&'a [&'a GazeMap]),
}

impl<'a> GazeInput<'a> {
    fn get(&self, i: usize) -> Option<&'a GazeMap> {
        match self {
            GazeInput::None => None,
            GazeInput::Shared(g) => Some(g),
            GazeInput::PerSample(gs) => gs.get(i).copied(),
        }
    }
}

/// Gradient buffer with the same layout as the parameter buffer.
#[derive(Debug, Clone)]
pub struct Grads(pub Vec<f32>);

pub struct PilotNetMini {
    arch: ArchConfig,
    conv_shapes: Vec<ConvShape>,
    fc_dims: Vec<(usize, usize)>,
    layout: ParamLayout,
    params: Vec<f32>,
}

impl PilotNetMini {
    /// He-uniform initialization, biases zero.
    pub fn new(arch: ArchConfig, rng: &mut RngStream) -> Result<PilotNetMini> {
        let mut net = Self::zeroed(arch)?;
        let n_conv = net.conv_shapes.len();
        for i in 0..n_conv {
            let fan_in = net.conv_shapes[i].k * net.conv_shapes[i].k * net.conv_shapes[i].ic;
            let limit = (6.0 / fan_in as f32).sqrt();
            let (off, len) = net.layout.segment(2 * i);
            for v in &mut net.params[off..off + len] {
                *v = rng.range_f32(-limit, limit);
            }
        }
        for j in 0..net.fc_dims.len() {
            let limit = (6.0 / net.fc_dims[j].0 as f32).sqrt();
            let (off, len) = net.layout.segment(2 * n_conv + 2 * j);
            for v in &mut net.params[off..off + len] {
                *v = rng.range_f32(-limit, limit);
            }
        }
        Ok(net)
    }

    /// All-zero parameters (useful for tests and as a checkpoint shell).
    pub fn zeroed(arch: ArchConfig) -> Result<PilotNetMini> {
        arch.validate()?;
        let conv_shapes = arch.conv_shapes();
        let last = conv_shapes.last().expect("validated nonempty");
        let mut fc_dims = Vec::with_capacity(arch.fc_sizes.len());
        let mut in_dim = last.oh * last.ow * last.oc;
        for &out_dim in &arch.fc_sizes {
            fc_dims.push((in_dim, out_dim));
            in_dim = out_dim;
        }

        let mut segments = Vec::new();
        let mut off = 0usize;
        for s in &conv_shapes {
            segments.push((off, s.weight_len()));
            off += s.weight_len();
            segments.push((off, s.oc));
            off += s.oc;
        }
        for &(i, o) in &fc_dims {
            segments.push((off, i * o));
            off += i * o;
            segments.push((off, o));
            off += o;
        }

        Ok(PilotNetMini {
            arch,
            conv_shapes,
            fc_dims,
            layout: ParamLayout { segments },
            params: vec![0.0; off],
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter blob holds {} floats, architecture needs {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Named parameter tensors in buffer order, for checkpoint headers.
    pub fn tensor_sizes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, s) in self.conv_shapes.iter().enumerate() {
            out.push((format!("conv{i}.w"), s.weight_len()));
            out.push((format!("conv{i}.b"), s.oc));
        }
        for (j, &(i, o)) in self.fc_dims.iter().enumerate() {
            out.push((format!("fc{j}.w"), i * o));
            out.push((format!("fc{j}.b"), o));
        }
        out
    }

    /// (height, width) of each dropout slot's feature map.
    pub fn slot_dims(&self) -> Vec<(usize, usize)> {
        self.arch
            .dropout_slots
            .iter()
            .map(|&i| (self.conv_shapes[i].oh, self.conv_shapes[i].ow))
            .collect()
    }

    #[cfg(any(test, feature = "testsupport"))]
    pub(crate) fn conv_shapes_ref(&self) -> &[ConvShape] {
        &self.conv_shapes
    }

    #[cfg(any(test, feature = "testsupport"))]
    pub(crate) fn fc_dims_ref(&self) -> &[(usize, usize)] {
        &self.fc_dims
    }

    #[cfg(any(test, feature = "testsupport"))]
    pub(crate) fn param_segments(&self) -> &[(usize, usize)] {
        &self.layout.segments
    }

    fn conv_segments(&self, i: usize) -> (&[f32], &[f32]) {
        let (wo, wl) = self.layout.segment(2 * i);
        let (bo, bl) = self.layout.segment(2 * i + 1);
        (&self.params[wo..wo + wl], &self.params[bo..bo + bl])
    }

    fn fc_segments(&self, j: usize) -> (&[f32], &[f32]) {
        let base = 2 * self.conv_shapes.len();
        let (wo, wl) = self.layout.segment(base + 2 * j);
        let (bo, bl) = self.layout.segment(base + 2 * j + 1);
        (&self.params[wo..wo + wl], &self.params[bo..bo + bl])
    }

    fn check_frames(&self, frames: &Tensor) -> Result<usize> {
        let shape = frames.shape();
        if shape.len() != 4
            || shape[1] != self.arch.input_h
            || shape[2] != self.arch.input_w
            || shape[3] != 1
        {
            return Err(Error::InvalidShape(format!(
                "expected frames (N, {}, {}, 1), got {:?}",
                self.arch.input_h, self.arch.input_w, shape
            )));
        }
        Ok(shape[0])
    }

    /// Multiplicative per-pixel factors for each dropout slot, one buffer of
    /// n * oh * ow values per slot, or None for an identity slot. Train phase
    /// draws one binary mask per sample (row-major, sample-major order); test
    /// phase uses the keep mask itself for the modulated modes and identity
    /// (or a constant 1 - dp when calibrated) for uniform mode.
    pub fn slot_factors(
        &self,
        spec: &DropoutSpec,
        gaze: GazeInput,
        n: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<Option<Vec<f32>>>> {
        spec.validate()?;
        if spec.mode == DropoutMode::Gaze {
            match gaze {
                GazeInput::None => {
                    return Err(Error::Config(
                        "gaze dropout mode requires gaze maps at forward time".into(),
                    ))
                }
                GazeInput::PerSample(gs) if gs.len() != n => {
                    return Err(Error::Config(format!(
                        "{} gaze maps supplied for a batch of {}",
                        gs.len(),
                        n
                    )))
                }
                _ => {}
            }
        }
        let dims = self.slot_dims();
        let mut out: Vec<Option<Vec<f32>>> = Vec::with_capacity(dims.len());

        match spec.phase {
            Phase::Train => {
                let mut bufs: Vec<Vec<f32>> =
                    dims.iter().map(|&(h, w)| vec![1.0; n * h * w]).collect();
                for ni in 0..n {
                    for (si, &(h, w)) in dims.iter().enumerate() {
                        let keep = keep_mask_for(spec, gaze.get(ni), h, w)?;
                        let mask = sample_binary_mask(&keep, rng);
                        bufs[si][ni * h * w..(ni + 1) * h * w].copy_from_slice(mask.values());
                    }
                }
                out.extend(bufs.into_iter().map(Some));
            }
            Phase::Test => match spec.mode {
                DropoutMode::Uniform => {
                    for &(h, w) in &dims {
                        if spec.calibrated_uniform_test {
                            out.push(Some(vec![1.0 - spec.dp; n * h * w]));
                        } else {
                            let _ = (h, w);
                            out.push(None);
                        }
                    }
                }
                DropoutMode::Gaze | DropoutMode::CenterBlob => {
                    for &(h, w) in &dims {
                        let mut buf = vec![1.0; n * h * w];
                        for ni in 0..n {
                            let keep = keep_mask_for(spec, gaze.get(ni), h, w)?;
                            buf[ni * h * w..(ni + 1) * h * w].copy_from_slice(keep.values());
                        }
                        out.push(Some(buf));
                    }
                }
            },
        }
        Ok(out)
    }

    /// Steering predictions in degrees, one per sample.
    pub fn forward(
        &self,
        frames: &Tensor,
        spec: &DropoutSpec,
        gaze: GazeInput,
        rng: &mut RngStream,
    ) -> Result<Vec<f32>> {
        let n = self.check_frames(frames)?;
        let factors = self.slot_factors(spec, gaze, n, rng)?;
        let acts = self.run_forward(frames.data(), n, &factors);
        Ok(acts.last().expect("at least one fc layer").clone())
    }

    /// Mean-squared-error loss (deg^2) and parameter gradients for a batch.
    /// Dropout masks are drawn once and shared between the forward and
    /// backward passes.
    pub fn backward(
        &self,
        frames: &Tensor,
        targets: &[f32],
        spec: &DropoutSpec,
        gaze: GazeInput,
        rng: &mut RngStream,
    ) -> Result<(f64, Grads)> {
        let (loss, grads, _) = self.backward_with_outputs(frames, targets, spec, gaze, rng)?;
        Ok((loss, grads))
    }

    pub(crate) fn backward_with_outputs(
        &self,
        frames: &Tensor,
        targets: &[f32],
        spec: &DropoutSpec,
        gaze: GazeInput,
        rng: &mut RngStream,
    ) -> Result<(f64, Grads, Vec<f32>)> {
        let n = self.check_frames(frames)?;
        if targets.len() != n {
            return Err(Error::InvalidShape(format!(
                "{} targets for a batch of {}",
                targets.len(),
                n
            )));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("targets must be finite".into()));
        }
        let factors = self.slot_factors(spec, gaze, n, rng)?;
        let mut acts = self.run_forward(frames.data(), n, &factors);
        let outputs = acts.last().expect("nonempty").clone();

        let mut loss = 0.0f64;
        let mut dout = vec![0.0f32; n];
        for i in 0..n {
            let err = outputs[i] as f64 - targets[i] as f64;
            loss += err * err;
            dout[i] = (2.0 * err / n as f64) as f32;
        }
        loss /= n as f64;

        let grads = self.run_backward(frames.data(), n, &factors, &acts, dout);
        acts.clear();
        Ok((loss, grads, outputs))
    }

    /// Forward pass returning every layer activation (after ReLU and any
    /// dropout factor). Index 0 is the first conv output; the final entry is
    /// the scalar output layer.
    fn run_forward(&self, frames: &[f32], n: usize, factors: &[Option<Vec<f32>>]) -> Vec<Vec<f32>> {
        let n_conv = self.conv_shapes.len();
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(n_conv + self.fc_dims.len());

        let mut input = frames;
        for (i, shape) in self.conv_shapes.iter().enumerate() {
            let (w, b) = self.conv_segments(i);
            let mut out = vec![0.0f32; n * shape.out_len()];
            layers::conv_forward(shape, w, b, input, n, &mut out);
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            if let Some(slot) = self.arch.dropout_slots.iter().position(|&s| s == i) {
                if let Some(f) = &factors[slot] {
                    apply_slot_factors(&mut out, f, n, shape.oh * shape.ow, shape.oc);
                }
            }
            acts.push(out);
            input = acts.last().unwrap();
        }

        for (j, &(in_dim, out_dim)) in self.fc_dims.iter().enumerate() {
            let (w, b) = self.fc_segments(j);
            let mut out = vec![0.0f32; n * out_dim];
            layers::fc_forward(w, b, input, n, in_dim, out_dim, &mut out);
            if j + 1 < self.fc_dims.len() {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(out);
            input = acts.last().unwrap();
        }
        acts
    }

    fn run_backward(
        &self,
        frames: &[f32],
        n: usize,
        factors: &[Option<Vec<f32>>],
        acts: &[Vec<f32>],
        dout_last: Vec<f32>,
    ) -> Grads {
        let n_conv = self.conv_shapes.len();
        let n_fc = self.fc_dims.len();
        let mut grads = Grads(vec![0.0f32; self.params.len()]);
        let mut d = dout_last;

        for j in (0..n_fc).rev() {
            let (in_dim, out_dim) = self.fc_dims[j];
            if j + 1 < n_fc {
                // ReLU gate on this layer's stored output.
                let stored = &acts[n_conv + j];
                for (dv, &a) in d.iter_mut().zip(stored) {
                    if a <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let input = if j == 0 {
                &acts[n_conv - 1]
            } else {
                &acts[n_conv + j - 1]
            };
            let base = 2 * n_conv;
            let (wo, wl) = self.layout.segment(base + 2 * j);
            let (bo, bl) = self.layout.segment(base + 2 * j + 1);
            {
                let (head, tail) = grads.0.split_at_mut(bo);
                layers::fc_backward_params(
                    input,
                    &d,
                    n,
                    in_dim,
                    out_dim,
                    &mut head[wo..wo + wl],
                    &mut tail[..bl],
                );
            }
            let (w, _) = self.fc_segments(j);
            let mut din = vec![0.0f32; n * in_dim];
            layers::fc_backward_input(w, &d, n, in_dim, out_dim, &mut din);
            d = din;
        }

        for i in (0..n_conv).rev() {
            let shape = self.conv_shapes[i];
            let stored = &acts[i];
            if let Some(slot) = self.arch.dropout_slots.iter().position(|&s| s == i) {
                if let Some(f) = &factors[slot] {
                    mul_slot_factors(&mut d, f, n, shape.oh * shape.ow, shape.oc);
                }
            }
            for (dv, &a) in d.iter_mut().zip(stored) {
                if a <= 0.0 {
                    *dv = 0.0;
                }
            }
            let input: &[f32] = if i == 0 { frames } else { &acts[i - 1] };
            let (wo, wl) = self.layout.segment(2 * i);
            let (bo, bl) = self.layout.segment(2 * i + 1);
            {
                let (head, tail) = grads.0.split_at_mut(bo);
                layers::conv_backward_params(
                    &shape,
                    input,
                    &d,
                    n,
                    &mut head[wo..wo + wl],
                    &mut tail[..bl],
                );
            }
            if i > 0 {
                let (w, _) = self.conv_segments(i);
                let mut din = vec![0.0f32; n * shape.in_len()];
                layers::conv_backward_input(&shape, w, &d, n, &mut din);
                d = din;
            }
        }
        grads
    }
}

fn apply_slot_factors(out: &mut [f32], factors: &[f32], n: usize, hw: usize, c: usize) {
    debug_assert_eq!(factors.len(), n * hw);
    debug_assert_eq!(out.len(), n * hw * c);
    for (px, &f) in factors.iter().enumerate() {
        if f != 1.0 {
            for v in &mut out[px * c..(px + 1) * c] {
                *v *= f;
            }
        }
    }
}

fn mul_slot_factors(d: &mut [f32], factors: &[f32], n: usize, hw: usize, c: usize) {
    apply_slot_factors(d, factors, n, hw, c)
}

#[cfg(test)]
mod tests;
