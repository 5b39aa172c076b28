//! Define-by-run reverse-mode autodiff tape.
//!
//! A [`Graph`] borrows the parameter store immutably for the length of one
//! forward/backward pass. Nodes are appended in evaluation order, so a reverse
//! sweep over the node list is a valid topological order for backprop.

use std::collections::HashMap;

use crate::kernels::{conv, norm, resize};
use crate::params::{BnUpdate, ParamId, ParamStore};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_mode: bool,
    },
    Silu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
    Bilinear {
        x: Var,
        in_h: usize,
        in_w: usize,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    /// Scalar node whose local gradients were computed by the caller.
    Custom {
        inputs: Vec<Var>,
        local: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// `training` selects batch statistics for normalization layers.
    pub fn new(params: &'p ParamStore<T>, training: bool) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_tracked(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            tracked: self.params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(out, Op::Conv { x, w, b, stride, pad }, tracked)
    }

    /// Batch norm. In training mode batch statistics are used and, if running
    /// buffers are given, an update for them is queued (see [`Graph::take_bn_updates`]).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running: (ParamId, ParamId),
        eps: f64,
    ) -> Var {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let (out, batch_mode) = if self.training {
            let stats = norm::batch_stats(self.value(x));
            let out = norm::normalize(
                self.value(x),
                &stats.mean,
                &stats.var,
                self.params.get(gamma).data(),
                self.params.get(beta).data(),
                eps,
            );
            let n = stats.count as f64;
            let unbiased = if n > 1.0 {
                stats.var.iter().map(|&v| T::of(v.as_f64() * n / (n - 1.0))).collect()
            } else {
                stats.var.clone()
            };
            self.bn_updates.push(BnUpdate {
                running_mean: running.0,
                running_var: running.1,
                batch_mean: stats.mean,
                batch_var: unbiased,
            });
            (out, true)
        } else {
            let out = norm::normalize(
                self.value(x),
                self.params.get(running.0).data(),
                self.params.get(running.1).data(),
                self.params.get(gamma).data(),
                self.params.get(beta).data(),
                eps,
            );
            (out, false)
        };
        let tracked = self.tracked(x) || self.tracked(gv) || self.tracked(bv);
        self.push(
            out.y,
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                xhat: out.xhat,
                inv_std: out.inv_std,
                batch_mode,
            },
            tracked,
        )
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let tracked = self.tracked(x);
        self.push(out, Op::Silu(x), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), tracked)
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat parts disagree in N/H/W");
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, total_c, h, w]);
        for b in 0..n {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).item(b);
                let pc = src.len() / plane;
                let off = (b * total_c + c0) * plane;
                out.data_mut()[off..off + src.len()].copy_from_slice(src);
                c0 += pc;
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::Concat(parts.to_vec()), tracked)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let out = resize::upsample_nearest2x_forward(self.value(x));
        let tracked = self.tracked(x);
        self.push(out, Op::Upsample2x(x), tracked)
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (_, _, in_h, in_w) = self.value(x).dims4();
        let out = resize::bilinear_forward(self.value(x), out_h, out_w);
        let tracked = self.tracked(x);
        self.push(out, Op::Bilinear { x, in_h, in_w }, tracked)
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let out = resize::avg_pool_forward(self.value(x), factor);
        let tracked = self.tracked(x);
        self.push(out, Op::AvgPool { x, factor }, tracked)
    }

    /// Scalar node `value` whose gradient with respect to `inputs[i]` is `local[i]`.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: T, local: Vec<Tensor<T>>) -> Var {
        assert_eq!(inputs.len(), local.len());
        for (&v, g) in inputs.iter().zip(&local) {
            assert_eq!(self.value(v).shape(), g.shape(), "local gradient shape mismatch");
        }
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                local,
            },
            tracked,
        )
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let r = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                        self.tracked(*x),
                        self.tracked(*w),
                        b.is_some_and(|b| self.tracked(b)),
                    );
                    accumulate(&mut grads, *x, r.dx);
                    accumulate(&mut grads, *w, r.dweight);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, r.dbias);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_mode,
                } => {
                    let gv = self.value(*gamma).data();
                    let (dx, dg, db) = norm::normalize_backward(&dy, xhat, inv_std, gv, *batch_mode);
                    let c = dg.len();
                    accumulate(&mut grads, *x, self.tracked(*x).then_some(dx));
                    accumulate(&mut grads, *gamma, Some(Tensor::from_vec(&[c], dg)));
                    accumulate(&mut grads, *beta, Some(Tensor::from_vec(&[c], db)));
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *d *= s * (T::one() + v * (T::one() - s));
                    }
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, Some(dy.clone()));
                    accumulate(&mut grads, *a, Some(dy));
                }
                Op::Concat(parts) => {
                    let (n, total_c, h, w) = dy.dims4();
                    let plane = h * w;
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        if self.tracked(p) {
                            let mut part = Tensor::zeros(&[n, pc, h, w]);
                            for b in 0..n {
                                let off = (b * total_c + c0) * plane;
                                part.item_mut(b)
                                    .copy_from_slice(&dy.data()[off..off + pc * plane]);
                            }
                            accumulate(&mut grads, p, Some(part));
                        }
                        c0 += pc;
                    }
                }
                Op::Upsample2x(x) => {
                    accumulate(&mut grads, *x, Some(resize::upsample_nearest2x_backward(&dy)));
                }
                Op::Bilinear { x, in_h, in_w } => {
                    accumulate(&mut grads, *x, Some(resize::bilinear_backward(&dy, *in_h, *in_w)));
                }
                Op::AvgPool { x, factor } => {
                    accumulate(&mut grads, *x, Some(resize::avg_pool_backward(&dy, *factor)));
                }
                Op::Custom { inputs, local } => {
                    let upstream = dy.data()[0];
                    for (&v, g) in inputs.iter().zip(local) {
                        if self.tracked(v) {
                            let mut g = g.clone();
                            g.scale(upstream);
                            accumulate(&mut grads, v, Some(g));
                        }
                    }
                }
            }
        }
        let mut by_param = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                by_param.insert(id, g.clone());
            }
        }
        Gradients {
            nodes: grads,
            by_param,
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of a backward pass. Untracked leaves and parameters that did not
/// take part in the graph have no entry.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }
}
