//! Spatially modulated dropout. A gaze map is resized to the feature map,
//! max-normalized, and rescaled into a keep-probability mask K in [1-dp, 1];
//! binary masks are drawn as M = (K > A) with A ~ Uniform(0,1). Uniform
//! dropout is the constant-K special case. At test time the binary mask is
//! replaced by K itself (gaze modes) or dropped entirely (uniform mode).

use crate::error::{Error, Result};
use crate::gazefield::{center_blob, normalize_max, GazeMap};
use crate::tensor::{bilinear_resize, RngStream, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Uniform,
    Gaze,
    CenterBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

/// Dropout configuration. `dp` is the drop probability for uniform mode and
/// the maximum drop probability (attained where the gaze map is zero) for the
/// modulated modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub mode: DropoutMode,
    pub dp: f32,
    pub phase: Phase,
    /// Blob sigma in pixels of the target mask; center_blob mode only.
    /// Defaults to 6% of the mask width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob_sigma: Option<f32>,
    /// Ablation flag: multiply features by (1 - dp) at test time in uniform
    /// mode instead of leaving them untouched.
    #[serde(default)]
    pub calibrated_uniform_test: bool,
}

impl DropoutSpec {
    pub fn uniform(dp: f32, phase: Phase) -> DropoutSpec {
        DropoutSpec {
            mode: DropoutMode::Uniform,
            dp,
            phase,
            blob_sigma: None,
            calibrated_uniform_test: false,
        }
    }

    pub fn gaze(dp: f32, phase: Phase) -> DropoutSpec {
        DropoutSpec {
            mode: DropoutMode::Gaze,
            dp,
            phase,
            blob_sigma: None,
            calibrated_uniform_test: false,
        }
    }

    pub fn center_blob(dp: f32, blob_sigma: Option<f32>, phase: Phase) -> DropoutSpec {
        DropoutSpec {
            mode: DropoutMode::CenterBlob,
            dp,
            phase,
            blob_sigma,
            calibrated_uniform_test: false,
        }
    }

    pub fn with_phase(mut self, phase: Phase) -> DropoutSpec {
        self.phase = phase;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dp) || !self.dp.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "dp must lie in [0, 1], got {}",
                self.dp
            )));
        }
        if let Some(s) = self.blob_sigma {
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "blob_sigma must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel keep probabilities in [1-dp, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct KeepMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl KeepMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.height, self.width], self.values.clone()).expect("valid 2D")
    }

    /// Mean drop probability, mean(1 - K), with 64-bit accumulation.
    pub fn mean_drop(&self) -> f64 {
        self.values
            .iter()
            .map(|&k| 1.0 - k as f64)
            .sum::<f64>()
            / self.values.len() as f64
    }
}

/// A {0,1} realization of a keep mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl BinaryMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.height, self.width], self.values.clone()).expect("valid 2D")
    }
}

/// Build K = 1 - dp * (1 - G_hat) where G_hat is the max-normalized gaze map
/// resized to (h, w). K is 1 where the gaze peaks and 1-dp where it is zero;
/// an all-zero map yields the uniform mask.
pub fn make_keep_mask(g: &GazeMap, dp: f32, h: usize, w: usize) -> Result<KeepMask> {
    if !(0.0..=1.0).contains(&dp) {
        return Err(Error::InvalidParameter(format!(
            "dp must lie in [0, 1], got {dp}"
        )));
    }
    let resized = bilinear_resize(&normalize_max(g).to_tensor(), h, w)?;
    let lo = 1.0 - dp;
    let values = resized
        .data()
        .iter()
        .map(|&ghat| (1.0 - dp * (1.0 - ghat)).clamp(lo, 1.0))
        .collect();
    Ok(KeepMask {
        height: h,
        width: w,
        values,
    })
}

/// Constant mask K = 1 - dp.
pub fn uniform_keep_mask(dp: f32, h: usize, w: usize) -> Result<KeepMask> {
    if !(0.0..=1.0).contains(&dp) {
        return Err(Error::InvalidParameter(format!(
            "dp must lie in [0, 1], got {dp}"
        )));
    }
    Ok(KeepMask {
        height: h,
        width: w,
        values: vec![1.0 - dp; h * w],
    })
}

/// Keep mask for a spec at a target feature-map size. Gaze mode requires a
/// map; center_blob synthesizes its own blob at the target size.
pub fn keep_mask_for(
    spec: &DropoutSpec,
    g: Option<&GazeMap>,
    h: usize,
    w: usize,
) -> Result<KeepMask> {
    spec.validate()?;
    match spec.mode {
        DropoutMode::Uniform => uniform_keep_mask(spec.dp, h, w),
        DropoutMode::Gaze => {
            let g = g.ok_or_else(|| {
                Error::Config("gaze mode requires a gaze map at application time".into())
            })?;
            make_keep_mask(g, spec.dp, h, w)
        }
        DropoutMode::CenterBlob => {
            let sigma = spec.blob_sigma.unwrap_or(0.06 * w as f32) as f64;
            let blob = center_blob(h, w, sigma)?;
            make_keep_mask(&blob, spec.dp, h, w)
        }
    }
}

/// Draw M = (K > A), A ~ Uniform(0,1) iid, strict inequality; P[M=1] = K.
/// Draws consume `rng` in row-major order.
pub fn sample_binary_mask(k: &KeepMask, rng: &mut RngStream) -> BinaryMask {
    let values = k
        .values
        .iter()
        .map(|&kp| if kp > rng.next_f32() { 1.0 } else { 0.0 })
        .collect();
    BinaryMask {
        height: k.height,
        width: k.width,
        values,
    }
}

/// Apply dropout to a (N, H, W, C) feature tensor.
///
/// Train phase: one independent binary mask per sample, shared across
/// channels, with no inverse scaling. Test phase: deterministic K-multiply
/// for the modulated modes, identity for uniform mode (or a (1-dp) rescale
/// when `calibrated_uniform_test` is set).
pub fn apply_dropout(
    f: &Tensor,
    spec: &DropoutSpec,
    g: Option<&GazeMap>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    spec.validate()?;
    if f.shape().len() != 4 {
        return Err(Error::InvalidShape(format!(
            "apply_dropout expects (N, H, W, C), got {:?}",
            f.shape()
        )));
    }
    let (n, h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);

    match spec.phase {
        Phase::Train => {
            let keep = keep_mask_for(spec, g, h, w)?;
            let mut out = f.clone();
            for ni in 0..n {
                let mask = sample_binary_mask(&keep, rng);
                let sample = &mut out.data_mut()[ni * h * w * c..(ni + 1) * h * w * c];
                for (px, &m) in mask.values.iter().enumerate() {
                    if m == 0.0 {
                        for v in &mut sample[px * c..(px + 1) * c] {
                            *v = 0.0;
                        }
                    }
                }
            }
            Ok(out)
        }
        Phase::Test => match spec.mode {
            DropoutMode::Uniform => {
                if spec.calibrated_uniform_test {
                    Ok(f.scale(1.0 - spec.dp))
                } else {
                    Ok(f.clone())
                }
            }
            DropoutMode::Gaze | DropoutMode::CenterBlob => {
                let keep = keep_mask_for(spec, g, h, w)?;
                f.mul(&keep.to_tensor())
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example_gaze() -> GazeMap {
        GazeMap::new(2, 2, vec![0.0, 2.0, 4.0, 0.0]).unwrap()
    }

    #[test]
    fn keep_mask_dp_zero_is_all_ones() {
        let k = make_keep_mask(&example_gaze(), 0.0, 2, 2).unwrap();
        assert!(k.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn keep_mask_hand_oracle() {
        // G_hat = [[0, 0.5], [1, 0]], K = 1 - 0.5 (1 - G_hat).
        let k = make_keep_mask(&example_gaze(), 0.5, 2, 2).unwrap();
        assert_eq!(k.values(), &[0.5, 0.75, 1.0, 0.5]);
    }

    #[test]
    fn keep_mask_constant_gaze_normalizes_to_ones() {
        let g = GazeMap::new(3, 3, vec![0.4; 9]).unwrap();
        let k = make_keep_mask(&g, 0.7, 3, 3).unwrap();
        assert!(k.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn keep_mask_zero_gaze_is_uniform() {
        let k = make_keep_mask(&GazeMap::zeros(2, 3), 0.7, 4, 6).unwrap();
        for &v in k.values() {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_mask_values() {
        for (dp, want) in [(0.1f32, 0.9f32), (0.0, 1.0), (1.0, 0.0)] {
            let k = uniform_keep_mask(dp, 3, 4).unwrap();
            assert!(k.values().iter().all(|&v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn binary_mask_degenerate_cases() {
        let mut rng = RngStream::from_seed(2);
        let ones = uniform_keep_mask(0.0, 8, 8).unwrap();
        assert!(sample_binary_mask(&ones, &mut rng)
            .values()
            .iter()
            .all(|&v| v == 1.0));
        let zeros = uniform_keep_mask(1.0, 8, 8).unwrap();
        assert!(sample_binary_mask(&zeros, &mut rng)
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn binary_mask_keep_frequency() {
        let k = uniform_keep_mask(0.7, 1, 1).unwrap(); // keep prob 0.3
        let mut rng = RngStream::from_seed(5);
        let mut kept = 0u64;
        let draws = 100_000;
        for _ in 0..draws {
            kept += sample_binary_mask(&k, &mut rng).values()[0] as u64;
        }
        let freq = kept as f64 / draws as f64;
        assert!((freq - 0.3).abs() < 0.005, "freq {freq}");
    }

    #[test]
    fn train_dp_zero_is_identity() {
        let mut rng = RngStream::from_seed(1);
        let f = crate::tensor::sample_uniform(&[2, 3, 4, 2], &mut rng).unwrap();
        let spec = DropoutSpec::uniform(0.0, Phase::Train);
        let out = apply_dropout(&f, &spec, None, &mut rng).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn test_phase_gaze_multiplies_by_k() {
        let f = Tensor::filled(&[1, 2, 2, 3], 1.0);
        let spec = DropoutSpec::gaze(0.5, Phase::Test);
        let mut rng = RngStream::from_seed(1);
        let out = apply_dropout(&f, &spec, Some(&example_gaze()), &mut rng).unwrap();
        for c in 0..3 {
            assert_eq!(out.at4(0, 0, 0, c), 0.5);
            assert_eq!(out.at4(0, 0, 1, c), 0.75);
            assert_eq!(out.at4(0, 1, 0, c), 1.0);
            assert_eq!(out.at4(0, 1, 1, c), 0.5);
        }
    }

    #[test]
    fn test_phase_uniform_is_identity_unless_calibrated() {
        let mut rng = RngStream::from_seed(4);
        let f = crate::tensor::sample_uniform(&[1, 2, 2, 1], &mut rng).unwrap();
        let spec = DropoutSpec::uniform(0.4, Phase::Test);
        assert_eq!(apply_dropout(&f, &spec, None, &mut rng).unwrap(), f);

        let calibrated = DropoutSpec {
            calibrated_uniform_test: true,
            ..spec
        };
        let out = apply_dropout(&f, &calibrated, None, &mut rng).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - i * 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn train_uniform_mean_matches_keep_probability() {
        let f = Tensor::filled(&[1, 2, 2, 1], 1.0);
        let spec = DropoutSpec::uniform(0.5, Phase::Train);
        let mut rng = RngStream::from_seed(6);
        let trials = 100_000;
        let mut sums = [0.0f64; 4];
        for _ in 0..trials {
            let out = apply_dropout(&f, &spec, None, &mut rng).unwrap();
            for (s, &v) in sums.iter_mut().zip(out.data()) {
                *s += v as f64;
            }
        }
        for s in sums {
            let mean = s / trials as f64;
            assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
        }
    }

    #[test]
    fn train_masks_shared_across_channels() {
        let mut rng = RngStream::from_seed(8);
        let f = Tensor::filled(&[3, 4, 5, 6], 1.0);
        let spec = DropoutSpec::gaze(0.6, Phase::Train);
        let g = GazeMap::new(4, 5, (0..20).map(|v| v as f32).collect()).unwrap();
        let out = apply_dropout(&f, &spec, Some(&g), &mut rng).unwrap();
        for n in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let first = out.at4(n, i, j, 0);
                    for c in 1..6 {
                        assert_eq!(out.at4(n, i, j, c), first);
                    }
                }
            }
        }
    }

    #[test]
    fn train_masks_independent_across_samples() {
        let mut rng = RngStream::from_seed(9);
        let f = Tensor::filled(&[2, 16, 16, 1], 1.0);
        let spec = DropoutSpec::uniform(0.5, Phase::Train);
        let out = apply_dropout(&f, &spec, None, &mut rng).unwrap();
        let a = &out.data()[..256];
        let b = &out.data()[256..];
        assert_ne!(a, b);
    }

    #[test]
    fn missing_gaze_map_is_config_error() {
        let f = Tensor::filled(&[1, 2, 2, 1], 1.0);
        let spec = DropoutSpec::gaze(0.5, Phase::Train);
        let mut rng = RngStream::from_seed(1);
        assert!(matches!(
            apply_dropout(&f, &spec, None, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn expectation_identity_quick() {
        // Elementwise mean of F o M_t approaches F o K.
        let g = example_gaze();
        let keep = make_keep_mask(&g, 0.7, 2, 2).unwrap();
        let f = Tensor::filled(&[1, 2, 2, 1], 2.0);
        let spec = DropoutSpec::gaze(0.7, Phase::Train);
        let mut rng = RngStream::from_seed(10);
        let trials = 20_000;
        let mut sums = [0.0f64; 4];
        for _ in 0..trials {
            let out = apply_dropout(&f, &spec, Some(&g), &mut rng).unwrap();
            for (s, &v) in sums.iter_mut().zip(out.data()) {
                *s += v as f64;
            }
        }
        for (px, s) in sums.iter().enumerate() {
            let mean = s / trials as f64;
            let want = 2.0 * keep.values()[px] as f64;
            assert!((mean - want).abs() < 0.04, "pixel {px}: {mean} vs {want}");
        }
    }

    #[test]
    fn average_drop_probability_bounded_by_dp() {
        let g = example_gaze();
        let k = make_keep_mask(&g, 0.7, 4, 4).unwrap();
        let ghat_mean = 1.0 - k.mean_drop() / 0.7;
        assert!(k.mean_drop() <= 0.7 + 1e-9);
        assert!((k.mean_drop() - 0.7 * (1.0 - ghat_mean)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn raising_a_gaze_pixel_never_lowers_its_keep_probability(
            vals in proptest::collection::vec(0.0f32..0.8, 9),
            idx in 0usize..9,
            bump in 0.01f32..0.19,
        ) {
            // Keep the perturbed pixel below the max so normalization is stable.
            let mut vals = vals;
            vals[4] = 1.0; // fixed max pixel
            let g = GazeMap::new(3, 3, vals.clone()).unwrap();
            let before = make_keep_mask(&g, 0.7, 3, 3).unwrap().values()[idx];
            if idx != 4 {
                vals[idx] += bump;
                let g2 = GazeMap::new(3, 3, vals).unwrap();
                let after = make_keep_mask(&g2, 0.7, 3, 3).unwrap().values()[idx];
                prop_assert!(after >= before - 1e-6);
            }
        }

        #[test]
        fn binary_masks_are_zero_one(seed in 0u64..1000) {
            let mut rng = RngStream::from_seed(seed);
            let g = GazeMap::new(2, 2, vec![0.0, 1.0, 0.3, 0.6]).unwrap();
            let k = make_keep_mask(&g, 0.5, 4, 4).unwrap();
            let m = sample_binary_mask(&k, &mut rng);
            prop_assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
