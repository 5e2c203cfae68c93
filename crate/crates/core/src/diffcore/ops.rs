//! Non-convolution kernels: instance normalization, activations and reductions.

use super::tensor::{Shape4, Tensor4};
use crate::error::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
/// Floor applied inside every logarithm of the adversarial losses.
pub const LOG_CLAMP: f64 = 1e-12;

/// Largest double strictly below one; squashing heads saturate here.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Per-plane statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm2d(x: &Tensor4, scale: &Tensor4, shift: &Tensor4, eps: f64) -> Result<(Tensor4, NormCache)> {
    if eps <= 0.0 {
        return Err(Error::invalid("instance norm eps must be positive"));
    }
    let s = x.shape();
    if scale.len() != s.c() || shift.len() != s.c() {
        return Err(Error::shape(
            "instance_norm2d",
            format!("affine params of {} channels", s.c()),
            format!("scale {} / shift {}", scale.shape(), shift.shape()),
        ));
    }
    let m = s.plane();
    let mut out = vec![0.0; s.len()];
    let mut xhat = vec![0.0; s.len()];
    let mut inv_std = Vec::with_capacity(s.n() * s.c());
    for (p, (plane, (o, xh))) in x
        .data()
        .chunks(m)
        .zip(out.chunks_mut(m).zip(xhat.chunks_mut(m)))
        .enumerate()
    {
        let c = p % s.c();
        let mean = plane.iter().sum::<f64>() / m as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (g, b) = (scale.data()[c], shift.data()[c]);
        for ((ov, hv), &v) in o.iter_mut().zip(xh.iter_mut()).zip(plane) {
            *hv = (v - mean) * inv;
            *ov = g * *hv + b;
        }
        inv_std.push(inv);
    }
    Ok((Tensor4::from_vec(s, out)?, NormCache { xhat, inv_std }))
}

/// Returns `(dx, dscale, dshift)`.
pub fn instance_norm2d_backward(
    shape: Shape4,
    scale: &Tensor4,
    cache: &NormCache,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = shape.plane();
    let mf = m as f64;
    let mut dx = vec![0.0; shape.len()];
    let mut dscale = vec![0.0; shape.c()];
    let mut dshift = vec![0.0; shape.c()];
    for (p, ((dy, xh), dxp)) in dout
        .chunks(m)
        .zip(cache.xhat.chunks(m))
        .zip(dx.chunks_mut(m))
        .enumerate()
    {
        let c = p % shape.c();
        let g = scale.data()[c];
        let inv = cache.inv_std[p];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for (&d, &h) in dy.iter().zip(xh) {
            dshift[c] += d;
            dscale[c] += d * h;
            sum_d += d * g;
            sum_dx += d * g * h;
        }
        for ((o, &d), &h) in dxp.iter_mut().zip(dy).zip(xh) {
            *o = inv / mf * (mf * d * g - sum_d - h * sum_dx);
        }
    }
    (dx, dscale, dshift)
}

pub fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Hyperbolic tangent kept inside the open interval (-1, 1).
pub fn tanh(v: f64) -> f64 {
    v.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

/// Logistic function kept inside the open interval (0, 1).
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn check_same(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_mean(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_same("l1_mean", a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Subgradient of `|a - b|`, taking 0 at the kink.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `-mean(log(max(p, LOG_CLAMP)))`, or of `1 - p` when `complement` is set.
pub fn neg_mean_log(p: &Tensor4, complement: bool) -> f64 {
    let n = p.len() as f64;
    -p.data()
        .iter()
        .map(|&v| {
            let q = if complement { 1.0 - v } else { v };
            q.max(LOG_CLAMP).ln()
        })
        .sum::<f64>()
        / n
}

pub fn neg_mean_log_grad(p: &Tensor4, complement: bool) -> Vec<f64> {
    let n = p.len() as f64;
    p.data()
        .iter()
        .map(|&v| {
            let q = if complement { 1.0 - v } else { v };
            if q <= LOG_CLAMP {
                0.0
            } else if complement {
                1.0 / (n * q)
            } else {
                -1.0 / (n * q)
            }
        })
        .collect()
}

/// Averages each `(n, c)` plane down to a `(n, c, 1, 1)` tensor.
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let m = s.plane() as f64;
    let data = x.data().chunks(s.plane()).map(|p| p.iter().sum::<f64>() / m).collect();
    Tensor4::from_vec(Shape4::new(s.n(), s.c(), 1, 1), data).expect("pool shape")
}

/// Row-wise softmax of a `(n, classes, 1, 1)` logit tensor.
pub fn softmax_rows(logits: &Tensor4) -> Vec<Vec<f64>> {
    let c = logits.shape().c();
    logits
        .data()
        .chunks(c * logits.shape().plane())
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Mean negative log-likelihood of `labels` under the softmax of `logits`.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.plane() != 1 || labels.len() != s.n() {
        return Err(Error::shape("softmax_cross_entropy", format!("({},C,1,1)", labels.len()), s));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c()) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", s.c())));
    }
    let probs = softmax_rows(logits);
    Ok(-probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| p[l].max(LOG_CLAMP).ln())
        .sum::<f64>()
        / s.n() as f64)
}
