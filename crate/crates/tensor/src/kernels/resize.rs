//! Spatial resampling: separable bilinear (half-pixel centers, edge clamped),
//! nearest-neighbour 2x upsampling, and non-overlapping average pooling.

use crate::{Scalar, Tensor};

/// Two-tap interpolation weights for one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn bilinear(input: usize, output: usize) -> Self {
        assert!(input > 0 && output > 0);
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        AxisTaps { lo, hi, frac }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let th = AxisTaps::bilinear(h, out_h);
    let tw = AxisTaps::bilinear(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let mut rows = vec![T::zero(); h * out_w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for ox in 0..out_w {
                let f = T::of(tw.frac[ox]);
                let a = src[y * w + tw.lo[ox]];
                let b = src[y * w + tw.hi[ox]];
                rows[y * out_w + ox] = a + (b - a) * f;
            }
        }
        let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let f = T::of(th.frac[oy]);
            let (r0, r1) = (th.lo[oy] * out_w, th.hi[oy] * out_w);
            for ox in 0..out_w {
                let a = rows[r0 + ox];
                let b = rows[r1 + ox];
                dst[oy * out_w + ox] = a + (b - a) * f;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let (n, c, out_h, out_w) = dy.dims4();
    let th = AxisTaps::bilinear(in_h, out_h);
    let tw = AxisTaps::bilinear(in_w, out_w);
    let mut dx = Tensor::zeros(&[n, c, in_h, in_w]);
    let mut rows = vec![T::zero(); in_h * out_w];
    for p in 0..n * c {
        rows.iter_mut().for_each(|v| *v = T::zero());
        let g = &dy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let f = T::of(th.frac[oy]);
            let (r0, r1) = (th.lo[oy] * out_w, th.hi[oy] * out_w);
            for ox in 0..out_w {
                let v = g[oy * out_w + ox];
                rows[r0 + ox] += v * (T::one() - f);
                rows[r1 + ox] += v * f;
            }
        }
        let dst = &mut dx.data_mut()[p * in_h * in_w..(p + 1) * in_h * in_w];
        for y in 0..in_h {
            for ox in 0..out_w {
                let f = T::of(tw.frac[ox]);
                let v = rows[y * out_w + ox];
                dst[y * in_w + tw.lo[ox]] += v * (T::one() - f);
                dst[y * in_w + tw.hi[ox]] += v * f;
            }
        }
    }
    dx
}

pub fn upsample_nearest2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                dst[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data()[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for oy in 0..h2 {
            for ox in 0..w2 {
                dst[(oy / 2) * w + ox / 2] += src[oy * w2 + ox];
            }
        }
    }
    dx
}

/// `factor x factor` average pooling with stride `factor`; spatial dims must divide.
pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(
        factor >= 1 && h % factor == 0 && w % factor == 0,
        "average pool factor {factor} does not divide {h}x{w}"
    );
    let (ho, wo) = (h / factor, w / factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / factor) * wo + xx / factor] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, ho, wo) = dy.dims4();
    let (h, w) = (ho * factor, wo * factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / factor) * wo + xx / factor] * inv;
            }
        }
    }
    dx
}
