//! Structural context extraction: an auxiliary anatomy segmentation head on P3
//! whose logits, average-pooled to each detection stride, are fed to the
//! classification branch.

use ctxdet_tensor::kernels::resize::bilinear_forward;
use ctxdet_tensor::nn::{Conv2d, ConvBlock};
use ctxdet_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::config::{ModelConfig, STRIDES};
use crate::model::LayerRng;

/// Number of 3x3 blocks before the classifier.
pub const SCE_DEPTH: usize = 3;

#[derive(Clone, Debug)]
pub struct SceModule {
    convs: Vec<ConvBlock>,
    classifier: Conv2d,
}

/// Graph handles for the segmentation logits and the per-stride context maps.
#[derive(Clone, Copy, Debug)]
pub struct StructuralContext {
    /// `B x (C_s + 1) x H/4 x W/4`
    pub seg_logits: Var,
    /// One map per detection stride (8, 16, 32).
    pub context_maps: [Var; 3],
}

impl SceModule {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &LayerRng, config: &ModelConfig) -> Self {
        let width = config.head_width();
        let mut cin = config.pyramid_widths()[0];
        let convs = (0..SCE_DEPTH)
            .map(|i| {
                let name = format!("sce.conv{i}");
                let b = ConvBlock::new(store, &mut rng.for_layer(&name), &name, cin, width, 3, 1);
                cin = width;
                b
            })
            .collect();
        let name = "sce.classifier";
        let classifier = Conv2d::new(
            store,
            &mut rng.for_layer(name),
            name,
            width,
            config.seg_channels(),
            1,
            1,
            true,
        );
        SceModule { convs, classifier }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, p3: Var) -> StructuralContext {
        let (_, _, h, w) = g.value(p3).dims4();
        let mut x = g.resize_bilinear(p3, 2 * h, 2 * w);
        for c in &self.convs {
            x = c.forward(g, x);
        }
        let seg_logits = self.classifier.forward(g, x);
        // seg logits sit at stride 4
        let context_maps = STRIDES.map(|s| g.avg_pool(seg_logits, s / 4));
        StructuralContext {
            seg_logits,
            context_maps,
        }
    }
}

/// Per-pixel label mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), height * width);
        LabelMask {
            height,
            width,
            labels,
        }
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMask::new(height, width, vec![label; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// Bilinearly resizes `C x h x w` logits of one image to `output_size` and takes
/// the per-pixel argmax (ties resolve to the lower class index).
pub fn predict_anatomy_mask<T: Scalar>(
    seg_logits: &Tensor<T>,
    output_size: (usize, usize),
) -> LabelMask {
    let shape = seg_logits.shape();
    let (c, h, w) = match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        4 => {
            assert_eq!(shape[0], 1, "predict_anatomy_mask takes a single image");
            (shape[1], shape[2], shape[3])
        }
        _ => panic!("expected CxHxW logits, got {shape:?}"),
    };
    let nchw = Tensor::from_vec(&[1, c, h, w], seg_logits.data().to_vec());
    let (oh, ow) = output_size;
    let up = bilinear_forward(&nchw, oh, ow);
    let plane = oh * ow;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            let mut best_v = up.data()[p];
            for k in 1..c {
                let v = up.data()[k * plane + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(oh, ow, labels)
}
