//! Convolution and fully-connected kernels. Layouts are NHWC for activations
//! and (ky, kx, ic, oc) for conv weights, so inner loops run over contiguous
//! channel slices. Parallel loops split over disjoint output regions with
//! fixed iteration order inside, which keeps results independent of the
//! worker count.

use rayon::prelude::*;

/// dst += a * src, elementwise.
#[inline]
pub(crate) fn axpy(dst: &mut [f32], a: f32, src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

/// Dot product with eight partial accumulators (fixed summation order).
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let main = a.len() / 8 * 8;
    let (ah, at) = a.split_at(main);
    let (bh, bt) = b.split_at(main);
    for (ca, cb) in ah.chunks_exact(8).zip(bh.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in at.iter().zip(bt) {
        s += x * y;
    }
    s
}

/// Geometry of one conv layer under "same" zero padding: out = ceil(in / stride).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub ih: usize,
    pub iw: usize,
    pub ic: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvShape {
    pub fn same(ih: usize, iw: usize, ic: usize, oc: usize, k: usize, stride: usize) -> ConvShape {
        let oh = ih.div_ceil(stride);
        let ow = iw.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + k).saturating_sub(ih);
        let pad_w = ((ow - 1) * stride + k).saturating_sub(iw);
        ConvShape {
            ih,
            iw,
            ic,
            oc,
            k,
            stride,
            oh,
            ow,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.k * self.k * self.ic * self.oc
    }

    pub fn in_len(&self) -> usize {
        self.ih * self.iw * self.ic
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow * self.oc
    }
}

/// output[n, oy, ox, oc] = b[oc] + sum_{ky,kx,ic} input[n, y, x, ic] * w[ky, kx, ic, oc].
pub(crate) fn conv_forward(
    s: &ConvShape,
    w: &[f32],
    b: &[f32],
    input: &[f32],
    n: usize,
    output: &mut [f32],
) {
    debug_assert_eq!(w.len(), s.weight_len());
    debug_assert_eq!(input.len(), n * s.in_len());
    debug_assert_eq!(output.len(), n * s.out_len());
    output
        .par_chunks_mut(s.out_len())
        .enumerate()
        .for_each(|(ni, out)| {
            let inp = &input[ni * s.in_len()..(ni + 1) * s.in_len()];
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let row = &mut out[(oy * s.ow + ox) * s.oc..][..s.oc];
                    row.copy_from_slice(b);
                    for ky in 0..s.k {
                        let iy = (oy * s.stride + ky) as isize - s.pad_top as isize;
                        if iy < 0 || iy >= s.ih as isize {
                            continue;
                        }
                        for kx in 0..s.k {
                            let ix = (ox * s.stride + kx) as isize - s.pad_left as isize;
                            if ix < 0 || ix >= s.iw as isize {
                                continue;
                            }
                            let px = &inp[(iy as usize * s.iw + ix as usize) * s.ic..][..s.ic];
                            let wb = &w[(ky * s.k + kx) * s.ic * s.oc..][..s.ic * s.oc];
                            for (ci, &v) in px.iter().enumerate() {
                                if v != 0.0 {
                                    axpy(row, v, &wb[ci * s.oc..][..s.oc]);
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// dinput[n, y, x, ic] = sum_{oy,ox,oc reachable} dout[n, oy, ox, oc] * w[ky, kx, ic, oc].
pub(crate) fn conv_backward_input(
    s: &ConvShape,
    w: &[f32],
    dout: &[f32],
    n: usize,
    dinput: &mut [f32],
) {
    debug_assert_eq!(dout.len(), n * s.out_len());
    debug_assert_eq!(dinput.len(), n * s.in_len());
    dinput
        .par_chunks_mut(s.in_len())
        .enumerate()
        .for_each(|(ni, din)| {
            din.fill(0.0);
            let dl = &dout[ni * s.out_len()..(ni + 1) * s.out_len()];
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let drow = &dl[(oy * s.ow + ox) * s.oc..][..s.oc];
                    for ky in 0..s.k {
                        let iy = (oy * s.stride + ky) as isize - s.pad_top as isize;
                        if iy < 0 || iy >= s.ih as isize {
                            continue;
                        }
                        for kx in 0..s.k {
                            let ix = (ox * s.stride + kx) as isize - s.pad_left as isize;
                            if ix < 0 || ix >= s.iw as isize {
                                continue;
                            }
                            let dpx =
                                &mut din[(iy as usize * s.iw + ix as usize) * s.ic..][..s.ic];
                            let wb = &w[(ky * s.k + kx) * s.ic * s.oc..][..s.ic * s.oc];
                            for (ci, d) in dpx.iter_mut().enumerate() {
                                *d += dot(drow, &wb[ci * s.oc..][..s.oc]);
                            }
                        }
                    }
                }
            }
        });
}

/// Accumulate weight and bias gradients over the batch. Parallel over weight
/// rows (one row per (ky, kx, ic) triple); each row scans the batch in order.
pub(crate) fn conv_backward_params(
    s: &ConvShape,
    input: &[f32],
    dout: &[f32],
    n: usize,
    dw: &mut [f32],
    db: &mut [f32],
) {
    for ni in 0..n {
        let dl = &dout[ni * s.out_len()..(ni + 1) * s.out_len()];
        for px in 0..s.oh * s.ow {
            for (o, g) in db.iter_mut().enumerate() {
                *g += dl[px * s.oc + o];
            }
        }
    }
    dw.par_chunks_mut(s.oc).enumerate().for_each(|(r, row)| {
        let ky = r / (s.k * s.ic);
        let kx = (r / s.ic) % s.k;
        let ci = r % s.ic;
        for ni in 0..n {
            let inp = &input[ni * s.in_len()..(ni + 1) * s.in_len()];
            let dl = &dout[ni * s.out_len()..(ni + 1) * s.out_len()];
            for oy in 0..s.oh {
                let iy = (oy * s.stride + ky) as isize - s.pad_top as isize;
                if iy < 0 || iy >= s.ih as isize {
                    continue;
                }
                for ox in 0..s.ow {
                    let ix = (ox * s.stride + kx) as isize - s.pad_left as isize;
                    if ix < 0 || ix >= s.iw as isize {
                        continue;
                    }
                    let v = inp[(iy as usize * s.iw + ix as usize) * s.ic + ci];
                    if v != 0.0 {
                        axpy(row, v, &dl[(oy * s.ow + ox) * s.oc..][..s.oc]);
                    }
                }
            }
        }
    });
}

/// output[n, o] = b[o] + dot(w[o, :], input[n, :]); weights are (out, in) row-major.
pub(crate) fn fc_forward(
    w: &[f32],
    b: &[f32],
    input: &[f32],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    output: &mut [f32],
) {
    debug_assert_eq!(output.len(), n * out_dim);
    output
        .par_chunks_mut(out_dim)
        .enumerate()
        .for_each(|(ni, out)| {
            let x = &input[ni * in_dim..(ni + 1) * in_dim];
            for (o, y) in out.iter_mut().enumerate() {
                *y = b[o] + dot(&w[o * in_dim..][..in_dim], x);
            }
        });
}

pub(crate) fn fc_backward_input(
    w: &[f32],
    dout: &[f32],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    dinput: &mut [f32],
) {
    debug_assert_eq!(dinput.len(), n * in_dim);
    dinput
        .par_chunks_mut(in_dim)
        .enumerate()
        .for_each(|(ni, din)| {
            din.fill(0.0);
            let dy = &dout[ni * out_dim..(ni + 1) * out_dim];
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(din, g, &w[o * in_dim..][..in_dim]);
                }
            }
        });
}

pub(crate) fn fc_backward_params(
    input: &[f32],
    dout: &[f32],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    dw: &mut [f32],
    db: &mut [f32],
) {
    dw.par_chunks_mut(in_dim).enumerate().for_each(|(o, row)| {
        for ni in 0..n {
            let g = dout[ni * out_dim + o];
            if g != 0.0 {
                axpy(row, g, &input[ni * in_dim..(ni + 1) * in_dim]);
            }
        }
    });
    for ni in 0..n {
        for (o, g) in db.iter_mut().enumerate() {
            *g += dout[ni * out_dim + o];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let s = ConvShape::same(48, 128, 1, 24, 5, 2);
        assert_eq!((s.oh, s.ow), (24, 64));
        let s = ConvShape::same(6, 16, 64, 64, 3, 1);
        assert_eq!((s.oh, s.ow), (6, 16));
        assert_eq!((s.pad_top, s.pad_left), (1, 1));
    }

    #[test]
    fn conv_forward_matches_naive_loop() {
        let s = ConvShape::same(5, 7, 3, 4, 3, 2);
        let mut rng = crate::tensor::RngStream::from_seed(21);
        let n = 2;
        let w: Vec<f32> = (0..s.weight_len()).map(|_| rng.next_f32() - 0.5).collect();
        let b: Vec<f32> = (0..s.oc).map(|_| rng.next_f32() - 0.5).collect();
        let input: Vec<f32> = (0..n * s.in_len()).map(|_| rng.next_f32() - 0.5).collect();
        let mut out = vec![0.0f32; n * s.out_len()];
        conv_forward(&s, &w, &b, &input, n, &mut out);

        for ni in 0..n {
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    for o in 0..s.oc {
                        let mut want = b[o] as f64;
                        for ky in 0..s.k {
                            for kx in 0..s.k {
                                let iy = (oy * s.stride + ky) as isize - s.pad_top as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad_left as isize;
                                if iy < 0 || iy >= s.ih as isize || ix < 0 || ix >= s.iw as isize {
                                    continue;
                                }
                                for ci in 0..s.ic {
                                    let iv = input[ni * s.in_len()
                                        + (iy as usize * s.iw + ix as usize) * s.ic
                                        + ci];
                                    let wv = w[((ky * s.k + kx) * s.ic + ci) * s.oc + o];
                                    want += iv as f64 * wv as f64;
                                }
                            }
                        }
                        let got = out[ni * s.out_len() + (oy * s.ow + ox) * s.oc + o];
                        assert!(
                            (got as f64 - want).abs() < 1e-4,
                            "({ni},{oy},{ox},{o}): {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fc_forward_matches_naive_loop() {
        let mut rng = crate::tensor::RngStream::from_seed(22);
        let (n, in_dim, out_dim) = (3, 17, 5);
        let w: Vec<f32> = (0..out_dim * in_dim).map(|_| rng.next_f32() - 0.5).collect();
        let b: Vec<f32> = (0..out_dim).map(|_| rng.next_f32() - 0.5).collect();
        let x: Vec<f32> = (0..n * in_dim).map(|_| rng.next_f32() - 0.5).collect();
        let mut y = vec![0.0f32; n * out_dim];
        fc_forward(&w, &b, &x, n, in_dim, out_dim, &mut y);
        for ni in 0..n {
            for o in 0..out_dim {
                let mut want = b[o] as f64;
                for i in 0..in_dim {
                    want += w[o * in_dim + i] as f64 * x[ni * in_dim + i] as f64;
                }
                assert!((y[ni * out_dim + o] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let s = ConvShape::same(9, 11, 2, 3, 3, 2);
        let mut rng = crate::tensor::RngStream::from_seed(23);
        let n = 4;
        let w: Vec<f32> = (0..s.weight_len()).map(|_| rng.next_f32() - 0.5).collect();
        let b: Vec<f32> = (0..s.oc).map(|_| rng.next_f32() - 0.5).collect();
        let input: Vec<f32> = (0..n * s.in_len()).map(|_| rng.next_f32() - 0.5).collect();

        let mut out_par = vec![0.0f32; n * s.out_len()];
        conv_forward(&s, &w, &b, &input, n, &mut out_par);

        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let mut out_single = vec![0.0f32; n * s.out_len()];
        single.install(|| conv_forward(&s, &w, &b, &input, n, &mut out_single));

        assert_eq!(out_par, out_single);
    }
}
