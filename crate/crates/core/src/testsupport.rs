//! Test-only oracles: an f64 reference forward pass and a central
//! finite-difference gradient check, independent of the f32 kernels.

use crate::dropout::DropoutSpec;
use crate::gazefield::GazeMap;
use crate::net::{GazeInput, PilotNetMini};
use crate::tensor::{RngStream, Tensor};

/// Outcome of a finite-difference sweep over every parameter.
///
/// Parameters whose +/- eps evaluations change the ReLU activation pattern
/// are excluded: central differences do not estimate a derivative across a
/// kink. The checker reports how many were skipped so callers can bound it.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub total: usize,
}

struct Mirror<'a> {
    net: &'a PilotNetMini,
    frames: Vec<f64>,
    n: usize,
    factors: &'a [Option<Vec<f32>>],
    targets: Vec<f64>,
}

impl<'a> Mirror<'a> {
    /// f64 forward pass replicating the layer semantics (same padding, ReLU,
    /// slot factors, linear output, batch-mean MSE). Returns the loss and a
    /// hash of the ReLU on/off pattern.
    fn loss(&self, params: &[f64]) -> (f64, u64) {
        let shapes = self.net.conv_shapes_ref();
        let fc_dims = self.net.fc_dims_ref();
        let segments = self.net.param_segments();
        let slots = &self.net.arch().dropout_slots;
        let n = self.n;
        let mut pattern = 0xcbf29ce484222325u64; // FNV-1a
        let mut feed = |active: bool| {
            pattern ^= active as u64 + 1;
            pattern = pattern.wrapping_mul(0x100000001b3);
        };

        let mut act: Vec<f64> = self.frames.clone();
        for (i, s) in shapes.iter().enumerate() {
            let (wo, wl) = segments[2 * i];
            let (bo, bl) = segments[2 * i + 1];
            let w = &params[wo..wo + wl];
            let b = &params[bo..bo + bl];
            let mut out = vec![0.0f64; n * s.out_len()];
            for ni in 0..n {
                for oy in 0..s.oh {
                    for ox in 0..s.ow {
                        for o in 0..s.oc {
                            let mut acc = b[o];
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
                                    for ci in 0..s.ic {
                                        let iv = act[ni * s.in_len()
                                            + (iy as usize * s.iw + ix as usize) * s.ic
                                            + ci];
                                        let wv = w[((ky * s.k + kx) * s.ic + ci) * s.oc + o];
                                        acc += iv * wv;
                                    }
                                }
                            }
                            feed(acc > 0.0);
                            out[ni * s.out_len() + (oy * s.ow + ox) * s.oc + o] = acc.max(0.0);
                        }
                    }
                }
            }
            if let Some(slot) = slots.iter().position(|&x| x == i) {
                if let Some(f) = &self.factors[slot] {
                    let hw = s.oh * s.ow;
                    for ni in 0..n {
                        for px in 0..hw {
                            let fv = f[ni * hw + px] as f64;
                            for c in 0..s.oc {
                                out[ni * s.out_len() + px * s.oc + c] *= fv;
                            }
                        }
                    }
                }
            }
            act = out;
        }
        for (j, &(in_dim, out_dim)) in fc_dims.iter().enumerate() {
            let (wo, wl) = segments[2 * shapes.len() + 2 * j];
            let (bo, bl) = segments[2 * shapes.len() + 2 * j + 1];
            let w = &params[wo..wo + wl];
            let b = &params[bo..bo + bl];
            let last = j + 1 == fc_dims.len();
            let mut out = vec![0.0f64; n * out_dim];
            for ni in 0..n {
                for o in 0..out_dim {
                    let mut acc = b[o];
                    for i in 0..in_dim {
                        acc += w[o * in_dim + i] * act[ni * in_dim + i];
                    }
                    if last {
                        out[ni * out_dim + o] = acc;
                    } else {
                        feed(acc > 0.0);
                        out[ni * out_dim + o] = acc.max(0.0);
                    }
                }
            }
            act = out;
        }
        let mut loss = 0.0;
        for (y, t) in act.iter().zip(&self.targets) {
            loss += (y - t) * (y - t);
        }
        (loss / n as f64, pattern)
    }
}

/// Compare the network's analytic gradients against central finite
/// differences of the f64 mirror, with dropout masks frozen from `mask_rng`.
pub fn gradient_check(
    net: &PilotNetMini,
    frames: &Tensor,
    targets: &[f32],
    spec: &DropoutSpec,
    gaze: Option<&GazeMap>,
    mask_rng: &RngStream,
    eps: f64,
) -> crate::Result<GradCheckReport> {
    let n = frames.shape()[0];
    let gaze_input = match gaze {
        Some(g) => GazeInput::Shared(g),
        None => GazeInput::None,
    };
    let factors = net.slot_factors(spec, gaze_input, n, &mut mask_rng.clone())?;
    let (_, analytic) = net.backward(frames, targets, spec, gaze_input, &mut mask_rng.clone())?;

    let mirror = Mirror {
        net,
        frames: frames.data().iter().map(|&v| v as f64).collect(),
        n,
        factors: &factors,
        targets: targets.iter().map(|&v| v as f64).collect(),
    };
    let mut params64: Vec<f64> = net.params().iter().map(|&v| v as f64).collect();
    let (_, base_pattern) = mirror.loss(&params64);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        total: params64.len(),
    };
    for p in 0..params64.len() {
        let orig = params64[p];
        params64[p] = orig + eps;
        let (up, pat_up) = mirror.loss(&params64);
        params64[p] = orig - eps;
        let (down, pat_down) = mirror.loss(&params64);
        params64[p] = orig;
        if pat_up != base_pattern || pat_down != base_pattern {
            report.skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * eps);
        let an = analytic.0[p] as f64;
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
