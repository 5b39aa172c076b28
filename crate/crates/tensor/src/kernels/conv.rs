//! 2-D convolution via im2col + GEMM.

use crate::exec;
use crate::scalar::matmul;
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW");
        assert_eq!(weight.len(), 4, "conv weight must be OIHW");
        assert_eq!(weight[2], weight[3], "only square kernels are supported");
        assert_eq!(
            x[1], weight[1],
            "conv input has {} channels, weight expects {}",
            x[1], weight[1]
        );
        let kernel = weight[2];
        assert!(stride >= 1);
        assert!(x[2] + 2 * pad >= kernel && x[3] + 2 * pad >= kernel);
        let ho = (x[2] + 2 * pad - kernel) / stride + 1;
        let wo = (x[3] + 2 * pad - kernel) / stride + 1;
        ConvGeometry {
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: weight[0],
            kernel,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dxc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad);
    let n = x.shape()[0];
    let plane = g.ho * g.wo;
    let mut out = Tensor::zeros(&[n, g.cout, g.ho, g.wo]);
    let w = weight.data();
    exec::for_each_chunk_mut(out.data_mut(), g.cout * plane, |b, out_b| {
        let xb = x.item(b);
        if g.is_pointwise() {
            matmul(g.cout, g.cin, plane, w, false, xb, false, T::zero(), out_b);
        } else {
            let mut col = vec![T::zero(); g.patch_len() * plane];
            g.im2col(xb, &mut col);
            matmul(g.cout, g.patch_len(), plane, w, false, &col, false, T::zero(), out_b);
        }
        if let Some(bias) = bias {
            for (o, &bv) in out_b.chunks_mut(plane).zip(bias.data()) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Option<Tensor<T>>,
    pub dbias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dweight: bool,
    need_dbias: bool,
) -> ConvGrads<T> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad);
    let n = x.shape()[0];
    let plane = g.ho * g.wo;
    let kk = g.patch_len();
    let w = weight.data();

    let dweight = need_dweight.then(|| {
        let partials = exec::map_indices(n, |b| {
            let dyb = dy.item(b);
            let mut dw = vec![T::zero(); g.cout * kk];
            if g.is_pointwise() {
                matmul(g.cout, plane, kk, dyb, false, x.item(b), true, T::zero(), &mut dw);
            } else {
                let mut col = vec![T::zero(); kk * plane];
                g.im2col(x.item(b), &mut col);
                matmul(g.cout, plane, kk, dyb, false, &col, true, T::zero(), &mut dw);
            }
            dw
        });
        let mut total = Tensor::zeros(weight.shape());
        for p in partials {
            for (t, v) in total.data_mut().iter_mut().zip(p) {
                *t += v;
            }
        }
        total
    });

    let dbias = need_dbias.then(|| {
        let mut db = Tensor::zeros(&[g.cout]);
        for b in 0..n {
            for (o, chunk) in dy.item(b).chunks(plane).enumerate() {
                db.data_mut()[o] += chunk.iter().copied().sum::<T>();
            }
        }
        db
    });

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        exec::for_each_chunk_mut(dx.data_mut(), g.cin * g.h * g.w, |b, dxb| {
            let dyb = dy.item(b);
            if g.is_pointwise() {
                matmul(g.cin, g.cout, plane, w, true, dyb, false, T::zero(), dxb);
            } else {
                let mut dcol = vec![T::zero(); kk * plane];
                matmul(kk, g.cout, plane, w, true, dyb, false, T::zero(), &mut dcol);
                g.col2im(&dcol, dxb);
            }
        });
        dx
    });

    ConvGrads {
        dx,
        dweight,
        dbias,
    }
}
