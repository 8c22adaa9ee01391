//! Saliency similarity (KL divergence, Pearson correlation), steering error,
//! and Monte Carlo dropout statistics. All reductions accumulate in f64.

use crate::dropout::{keep_mask_for, DropoutMode, DropoutSpec, Phase};
use crate::error::{Error, Result};
use crate::gazefield::GazeMap;
use crate::net::{GazeInput, PilotNetMini};
use crate::tensor::{RngStream, Tensor};

const KL_EPSILON: f64 = 1e-7;

/// KL(real || estimate) in nats over sum-normalized maps.
///
/// Terms with p = 0 contribute nothing; the denominator is epsilon-guarded
/// only where q vanishes, so identical maps score exactly zero.
pub fn kl_divergence(p_real: &GazeMap, q_est: &GazeMap) -> Result<f64> {
    if p_real.height() != q_est.height() || p_real.width() != q_est.width() {
        return Err(Error::InvalidShape(format!(
            "map shapes differ: {}x{} vs {}x{}",
            p_real.height(),
            p_real.width(),
            q_est.height(),
            q_est.width()
        )));
    }
    let sum_p: f64 = p_real.values().iter().map(|&v| v as f64).sum();
    let sum_q: f64 = q_est.values().iter().map(|&v| v as f64).sum();
    if sum_p <= 0.0 || sum_q <= 0.0 {
        return Err(Error::MetricUndefined(
            "KL needs maps with positive total mass".into(),
        ));
    }
    let mut kl = 0.0f64;
    for (&pv, &qv) in p_real.values().iter().zip(q_est.values()) {
        let p = pv as f64 / sum_p;
        if p > 0.0 {
            let q = qv as f64 / sum_q;
            let den = if q > 0.0 { q } else { KL_EPSILON };
            kl += p * (p / den).ln();
        }
    }
    Ok(kl)
}

/// Pearson correlation coefficient over pixels, in [-1, 1].
pub fn correlation_coefficient(p: &GazeMap, q: &GazeMap) -> Result<f64> {
    if p.height() != q.height() || p.width() != q.width() {
        return Err(Error::InvalidShape(format!(
            "map shapes differ: {}x{} vs {}x{}",
            p.height(),
            p.width(),
            q.height(),
            q.width()
        )));
    }
    let n = p.values().len() as f64;
    let mean_p = p.values().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_q = q.values().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut var_p, mut var_q) = (0.0f64, 0.0f64, 0.0f64);
    for (&pv, &qv) in p.values().iter().zip(q.values()) {
        let dp = pv as f64 - mean_p;
        let dq = qv as f64 - mean_q;
        cov += dp * dq;
        var_p += dp * dp;
        var_q += dq * dq;
    }
    if var_p <= 0.0 || var_q <= 0.0 {
        return Err(Error::MetricUndefined(
            "correlation is undefined for a constant map".into(),
        ));
    }
    Ok((cov / (var_p.sqrt() * var_q.sqrt())).clamp(-1.0, 1.0))
}

/// Mean absolute steering error in degrees.
pub fn mae_steering(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::InvalidParameter(format!(
            "length mismatch: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidParameter("mae over an empty set".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean squared error in degrees^2.
pub fn mse_steering(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidParameter("bad mse input lengths".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Sample mean and biased (1/T) variance of T stochastic passes.
pub fn mc_stats(t: usize, mut pass: impl FnMut(usize) -> f64) -> Result<(f64, f64)> {
    if t < 1 {
        return Err(Error::InvalidParameter("T must be >= 1".into()));
    }
    let outputs: Vec<f64> = (0..t).map(&mut pass).collect();
    let mean = outputs.iter().sum::<f64>() / t as f64;
    let variance = outputs.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / t as f64;
    Ok((mean, variance))
}

/// Mean and biased variance of T stochastic forward passes of one frame
/// through the network with dropout active.
pub fn mc_dropout_stats(
    net: &PilotNetMini,
    frame: &Tensor,
    spec: &DropoutSpec,
    g: Option<&GazeMap>,
    t: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    if spec.phase != Phase::Train {
        return Err(Error::Config(
            "mc_dropout_stats needs a train-phase (stochastic) dropout spec".into(),
        ));
    }
    let gaze = match g {
        Some(map) => GazeInput::Shared(map),
        None => GazeInput::None,
    };
    let mut fail: Option<Error> = None;
    let (mean, var) = mc_stats(t, |_| match net.forward(frame, spec, gaze, rng) {
        Ok(out) => out[0] as f64,
        Err(e) => {
            fail.get_or_insert(e);
            f64::NAN
        }
    })?;
    if let Some(e) = fail {
        return Err(e);
    }
    Ok((mean, var))
}

/// Mean over samples and pixels of (1 - K) at the target mask size.
/// Uniform mode returns dp exactly, independent of the maps.
pub fn average_drop_probability(
    spec: &DropoutSpec,
    gaze_maps: &[GazeMap],
    target_hw: (usize, usize),
) -> Result<f64> {
    spec.validate()?;
    if spec.mode == DropoutMode::Uniform {
        return Ok(spec.dp as f64);
    }
    if gaze_maps.is_empty() {
        return Err(Error::InvalidParameter(
            "average drop probability over an empty map set".into(),
        ));
    }
    let (h, w) = target_hw;
    let mut total = 0.0f64;
    for g in gaze_maps {
        total += keep_mask_for(spec, Some(g), h, w)?.mean_drop();
    }
    Ok(total / gaze_maps.len() as f64)
}

/// Spearman rank correlation; ties get average ranks.
pub fn spearman_rank_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidParameter(
            "spearman needs two equal-length series of size >= 2".into(),
        ));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut vx, mut vy) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        vx += (a - mean) * (a - mean);
        vy += (b - mean) * (b - mean);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::MetricUndefined(
            "spearman is undefined for a constant series".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}
