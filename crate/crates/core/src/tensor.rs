//! Dense float arrays, seeded random streams, and the bilinear resize used by
//! the mask-construction path. Shapes follow the (N, H, W, C) convention with
//! row-major storage, channel fastest.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random stream keyed by (seed, stream id).
///
/// Backed by a counter-based generator, so two streams with the same seed but
/// different ids never share state, and a stream replays identically for an
/// identical call sequence. Hierarchies of independent streams are built with
/// [`RngStream::derive`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to spread structured stream tags.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a list of tag components into one stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        acc = mix64(acc ^ p);
    }
    acc
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    /// Independent child stream; does not consume state from `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, stream_id(&[self.stream, tag]))
    }

    pub fn derive_many(&self, tags: &[u64]) -> RngStream {
        let mut parts = vec![self.stream];
        parts.extend_from_slice(tags);
        RngStream::new(self.seed, stream_id(&parts))
    }

    /// Uniform draw in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        self.rng.gen::<f32>()
    }

    /// Uniform draw in [lo, hi).
    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    pub fn range_usize(&mut self, upper: usize) -> usize {
        if upper == 0 {
            0
        } else {
            (self.next_u64() % upper as u64) as usize
        }
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f32 {
        let u1 = (1.0 - self.next_f32()).max(f32::MIN_POSITIVE); // (0, 1]
        let u2 = self.next_f32();
        (-2.0 * (u1 as f64).ln()).sqrt() as f32 * (std::f32::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, data: &mut [T]) {
        for i in (1..data.len()).rev() {
            let j = self.range_usize(i + 1);
            data.swap(i, j);
        }
    }
}

/// Dense row-major float array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value at (row, col) of a 2D tensor.
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Value at (n, i, j, c) of a 4D tensor.
    pub fn at4(&self, n: usize, i: usize, j: usize, c: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 4);
        let (h, w, ch) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * h + i) * w + j) * ch + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean with 64-bit accumulation.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn add_scalar(&self, term: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v + term).collect(),
        }
    }

    /// Elementwise max(v, 0).
    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Combine with `other`, which must either match shapes exactly or be a
    /// 2D (H, W) mask applied across the batch and channel axes of a 4D
    /// (N, H, W, C) tensor.
    fn zip_with(&self, other: &Tensor, op: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if self.shape.len() == 4
            && other.shape.len() == 2
            && self.shape[1] == other.shape[0]
            && self.shape[2] == other.shape[1]
        {
            let (n, h, w, c) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
            let mut out = self.clone();
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let m = other.data[i * w + j];
                        let base = ((ni * h + i) * w + j) * c;
                        for v in &mut out.data[base..base + c] {
                            *v = op(*v, m);
                        }
                    }
                }
            }
            return Ok(out);
        }
        Err(Error::Broadcast(format!(
            "shapes {:?} and {:?} are not compatible",
            self.shape, other.shape
        )))
    }
}

/// Uniform [0, 1) samples with the given shape.
pub fn sample_uniform(shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.next_f32()).collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Align-corners bilinear resize of a 2D map. Output corner samples coincide
/// with input corners; a size-1 output axis samples index 0.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.shape().len() != 2 {
        return Err(Error::InvalidShape(format!(
            "bilinear_resize expects a 2D map, got {:?}",
            map.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape(
            "output extents must be positive".into(),
        ));
    }
    let (in_h, in_w) = (map.shape()[0], map.shape()[1]);
    if in_h == 0 || in_w == 0 {
        return Err(Error::InvalidShape("input extents must be positive".into()));
    }
    if in_h == out_h && in_w == out_w {
        return Ok(map.clone());
    }

    let scale = |out_len: usize, in_len: usize| -> f64 {
        if out_len > 1 {
            (in_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        }
    };
    let sy = scale(out_h, in_h);
    let sx = scale(out_w, in_w);

    let mut out = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = (fx - x0 as f64) as f32;

            let v00 = map.at2(y0, x0);
            let v01 = map.at2(y0, x1);
            let v10 = map.at2(y1, x0);
            let v11 = map.at2(y1, x1);
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[oy * out_w + ox] = top + (bot - top) * wy;
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_is_bitwise_identical() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let ta = sample_uniform(&[2, 2], &mut a).unwrap();
        let tb = sample_uniform(&[2, 2], &mut b).unwrap();
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn distinct_streams_do_not_share_state() {
        let root = RngStream::from_seed(7);
        let mut a = root.derive(1);
        let mut b = root.derive(2);
        let ta = sample_uniform(&[16], &mut a).unwrap();
        let tb = sample_uniform(&[16], &mut b).unwrap();
        assert_ne!(ta.data(), tb.data());
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = RngStream::from_seed(11);
        let t = sample_uniform(&[1_000_000], &mut rng).unwrap();
        assert!(t.data().iter().all(|&x| (0.0..1.0).contains(&x)));
        // CLT bound: sd of the mean is (1/sqrt(12))/1000 ~ 2.9e-4.
        assert!((t.mean() - 0.5).abs() < 0.002, "mean {}", t.mean());
    }

    #[test]
    fn uniform_rejects_zero_extent() {
        let mut rng = RngStream::from_seed(1);
        assert!(matches!(
            sample_uniform(&[2, 0], &mut rng),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bilinear_resize(&m, 2, 3).unwrap(), m);

        let c = Tensor::filled(&[3, 4], 0.7);
        let r = bilinear_resize(&c, 7, 9).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn resize_align_corners_hand_oracle() {
        // 1x2 map [0, 1] resized to 1x4: sample positions j * (2-1)/(4-1).
        let m = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let r = bilinear_resize(&m, 1, 4).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in r.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn resize_exact_on_planar_fields() {
        // f(i, j) = 0.2 + 0.3 i + 0.1 j sampled on a 3x4 grid.
        let (h, w) = (3, 4);
        let plane = |i: f64, j: f64| 0.2 + 0.3 * i + 0.1 * j;
        let data: Vec<f32> = (0..h * w)
            .map(|k| plane((k / w) as f64, (k % w) as f64) as f32)
            .collect();
        let m = Tensor::from_vec(&[h, w], data).unwrap();
        let (oh, ow) = (7, 5);
        let r = bilinear_resize(&m, oh, ow).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let i = oy as f64 * (h - 1) as f64 / (oh - 1) as f64;
                let j = ox as f64 * (w - 1) as f64 / (ow - 1) as f64;
                assert!((r.at2(oy, ox) as f64 - plane(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_bounded_by_input_range() {
        let mut rng = RngStream::from_seed(3);
        let m = sample_uniform(&[5, 9], &mut rng).unwrap();
        let r = bilinear_resize(&m, 17, 4).unwrap();
        assert!(r.min() >= m.min() - 1e-6);
        assert!(r.max() <= m.max() + 1e-6);
    }

    #[test]
    fn resize_rejects_non_2d() {
        let t = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            bilinear_resize(&t, 2, 2),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = RngStream::from_seed(5);
        let f = sample_uniform(&[2, 3, 4, 2], &mut rng).unwrap();
        let ones = Tensor::filled(&[3, 4], 1.0);
        let zeros = Tensor::filled(&[3, 4], 0.0);
        assert_eq!(f.mul(&ones).unwrap(), f);
        assert!(f.mul(&zeros).unwrap().data().iter().all(|&v| v == 0.0));

        let t = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(t.relu().data(), &[0.0, 2.0]);
    }

    #[test]
    fn broadcast_matches_brute_force() {
        let mut rng = RngStream::from_seed(9);
        let f = sample_uniform(&[3, 4, 5, 2], &mut rng).unwrap();
        let m = sample_uniform(&[4, 5], &mut rng).unwrap();
        let out = f.mul(&m).unwrap();
        for n in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    for c in 0..2 {
                        let want = f.at4(n, i, j, c) * m.at2(i, j);
                        assert_eq!(out.at4(n, i, j, c), want);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let f = Tensor::zeros(&[2, 3, 4, 1]);
        let m = Tensor::zeros(&[4, 3]);
        assert!(matches!(f.mul(&m), Err(Error::Broadcast(_))));
    }
}
