//! Decoupled per-level detection head with optional context fusion.

use ctxdet_tensor::nn::{Conv2d, ConvBlock};
use ctxdet_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::config::{ModelConfig, STRIDES};
use crate::model::{LayerRng, PyramidVars};
use crate::sce::StructuralContext;
use crate::{Error, Result};

/// Initial probability encoded by the classification and objectness biases.
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Debug)]
struct LevelHead {
    stem: ConvBlock,
    cls_convs: Vec<ConvBlock>,
    reg_convs: Vec<ConvBlock>,
    cls_pred: Conv2d,
    reg_pred: Conv2d,
    obj_pred: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    levels: Vec<LevelHead>,
    context_channels: usize,
}

/// Graph handles for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub stride: usize,
    pub class_logits: Var,
    pub box_regression: Var,
    pub objectness_logits: Var,
    /// Penultimate classification features (before any context concatenation).
    pub cls_features: Var,
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub levels: Vec<LevelVars>,
}

impl DetectionHead {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &LayerRng, config: &ModelConfig) -> Self {
        let hw = config.head_width();
        let context_channels = if config.context_fusion {
            config.seg_channels()
        } else {
            0
        };
        let bias_prior = T::of(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        let levels = config
            .pyramid_widths()
            .iter()
            .enumerate()
            .map(|(l, &cin)| {
                let p = format!("detection.level{l}");
                let block = |store: &mut ParamStore<T>, name: String, cin, k| {
                    ConvBlock::new(store, &mut rng.for_layer(&name), &name, cin, hw, k, 1)
                };
                let stem = block(store, format!("{p}.stem"), cin, 1);
                let cls_convs = (0..config.head_depth)
                    .map(|i| block(store, format!("{p}.cls{i}"), hw, 3))
                    .collect();
                let reg_convs = (0..config.head_depth)
                    .map(|i| block(store, format!("{p}.reg{i}"), hw, 3))
                    .collect();
                let pred = |store: &mut ParamStore<T>, name: String, cin, cout| {
                    Conv2d::new(store, &mut rng.for_layer(&name), &name, cin, cout, 1, 1, true)
                };
                let cls_pred = pred(
                    store,
                    format!("{p}.cls_pred"),
                    hw + context_channels,
                    config.num_disease_classes,
                );
                let reg_pred = pred(store, format!("{p}.reg_pred"), hw, 4);
                let obj_pred = pred(store, format!("{p}.obj_pred"), hw, 1);
                for id in [cls_pred.bias, obj_pred.bias].into_iter().flatten() {
                    let b = store.get_mut(id);
                    *b = Tensor::full(b.shape(), bias_prior);
                }
                LevelHead {
                    stem,
                    cls_convs,
                    reg_convs,
                    cls_pred,
                    reg_pred,
                    obj_pred,
                }
            })
            .collect();
        DetectionHead {
            levels,
            context_channels,
        }
    }

    /// Input width of the final classifier: head width plus fused context channels.
    pub fn classifier_input_width(&self, config: &ModelConfig) -> usize {
        config.head_width() + self.context_channels
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        pyramid: &PyramidVars,
        context: Option<&StructuralContext>,
    ) -> Result<HeadVars> {
        match (self.context_channels > 0, context) {
            (true, None) => {
                return Err(Error::Config(
                    "model was built with context fusion; structural context is required".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Config(
                    "model was built without context fusion; structural context is not accepted"
                        .into(),
                ))
            }
            _ => {}
        }
        let mut out = Vec::with_capacity(3);
        for (l, (head, x)) in self.levels.iter().zip(pyramid.levels()).enumerate() {
            let (n, _, h, w) = g.value(x).dims4();
            let stem = head.stem.forward(g, x);

            let mut cls = stem;
            for b in &head.cls_convs {
                cls = b.forward(g, cls);
            }
            let cls_features = cls;
            let cls_in = match context {
                Some(ctx) => {
                    let map = ctx.context_maps[l];
                    let (cn, cc, ch, cw) = g.value(map).dims4();
                    if (cn, cc, ch, cw) != (n, self.context_channels, h, w) {
                        return Err(Error::shape(
                            "context map",
                            &[n, self.context_channels, h, w],
                            &[cn, cc, ch, cw],
                        ));
                    }
                    g.concat_channels(&[cls, map])
                }
                None => cls,
            };
            let class_logits = head.cls_pred.forward(g, cls_in);

            let mut reg = stem;
            for b in &head.reg_convs {
                reg = b.forward(g, reg);
            }
            let box_regression = head.reg_pred.forward(g, reg);
            let objectness_logits = head.obj_pred.forward(g, reg);
            out.push(LevelVars {
                stride: STRIDES[l],
                class_logits,
                box_regression,
                objectness_logits,
                cls_features,
            });
        }
        Ok(HeadVars { levels: out })
    }
}

/// Materialized head outputs of one level.
#[derive(Clone, Debug)]
pub struct LevelOutputs<T = f32> {
    pub stride: usize,
    /// `B x num_classes x H x W`
    pub class_logits: Tensor<T>,
    /// `B x 4 x H x W`, channels `(dx, dy, dw, dh)`.
    pub box_regression: Tensor<T>,
    /// `B x 1 x H x W`
    pub objectness_logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs<T = f32> {
    pub levels: Vec<LevelOutputs<T>>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn from_graph(g: &Graph<'_, T>, vars: &HeadVars) -> Self {
        HeadOutputs {
            levels: vars
                .levels
                .iter()
                .map(|l| LevelOutputs {
                    stride: l.stride,
                    class_logits: g.value(l.class_logits).clone(),
                    box_regression: g.value(l.box_regression).clone(),
                    objectness_logits: g.value(l.objectness_logits).clone(),
                })
                .collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.levels[0].class_logits.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.levels[0].class_logits.shape()[1]
    }

    /// Borrowed per-sample slices.
    pub fn sample(&self, b: usize) -> SampleHead<'_, T> {
        SampleHead {
            levels: self
                .levels
                .iter()
                .map(|l| {
                    let (_, c, h, w) = l.class_logits.dims4();
                    LevelView {
                        stride: l.stride,
                        h,
                        w,
                        num_classes: c,
                        cls: l.class_logits.item(b),
                        reg: l.box_regression.item(b),
                        obj: l.objectness_logits.item(b),
                    }
                })
                .collect(),
        }
    }
}

/// One sample's head outputs at one level, channel-major (`C x H x W`).
#[derive(Clone, Copy, Debug)]
pub struct LevelView<'a, T> {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub cls: &'a [T],
    pub reg: &'a [T],
    pub obj: &'a [T],
}

impl<T: Scalar> LevelView<'_, T> {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn reg_at(&self, cell: usize) -> [T; 4] {
        let p = self.cells();
        [self.reg[cell], self.reg[p + cell], self.reg[2 * p + cell], self.reg[3 * p + cell]]
    }

    pub fn cls_at(&self, class: usize, cell: usize) -> T {
        self.cls[class * self.cells() + cell]
    }
}

#[derive(Clone, Debug)]
pub struct SampleHead<'a, T> {
    pub levels: Vec<LevelView<'a, T>>,
}
