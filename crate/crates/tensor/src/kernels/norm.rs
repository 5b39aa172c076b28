//! Per-channel batch normalization over (N, H, W).

use crate::{Scalar, Tensor};

pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (used for normalization).
    pub var: Vec<T>,
    /// Number of elements per channel.
    pub count: usize,
}

/// Output, normalized input and per-channel `1/sqrt(var+eps)`.
pub struct NormOutput<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = n * plane;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            ss += x.data()[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::of(m);
        var[ch] = T::of(ss / count as f64);
    }
    BatchStats { mean, var, count }
}

pub fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> NormOutput<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v.as_f64() + eps).sqrt())).collect();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - m) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    NormOutput { y, xhat, inv_std }
}

/// Gradients of training-mode batch norm.
///
/// When `batch_mode` is false the statistics are treated as constants
/// (evaluation mode) and `dx = dy * gamma * inv_std`.
pub fn normalize_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    batch_mode: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy.data()[i] * xhat.data()[i];
                dbeta[ch] += dy.data()[i];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + plane {
                dx.data_mut()[i] = if batch_mode {
                    scale / count * (count * dy.data()[i] - dbeta[ch] - xhat.data()[i] * dgamma[ch])
                } else {
                    scale * dy.data()[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
