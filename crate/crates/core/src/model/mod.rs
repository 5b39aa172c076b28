//! Model assembly: backbone, detection branch and structural-context module
//! sharing one parameter store.

mod backbone;

use ctxdet_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, PyramidVars};

use crate::config::ModelConfig;
use crate::detection::{DetectionHead, HeadOutputs, HeadVars};
use crate::sce::{SceModule, StructuralContext};
use crate::{Error, Result};

/// Per-layer initialization streams.
///
/// Each layer draws from a generator keyed by `(seed, layer name)`, so two
/// models that differ in one layer's shape share every other layer's values.
pub(crate) struct LayerRng {
    seed: u64,
}

impl LayerRng {
    pub(crate) fn new(seed: u64) -> Self {
        LayerRng { seed }
    }

    pub(crate) fn for_layer(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Segmentation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Segmentation => "segmentation",
        }
    }
}

/// The three disjoint parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    DetectionBranch,
    SceModule,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Backbone,
        ParamGroup::DetectionBranch,
        ParamGroup::SceModule,
    ];

    /// Name prefix used in the parameter store.
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::DetectionBranch => "detection",
            ParamGroup::SceModule => "sce",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

/// Normalized images plus the task each item is labelled for.
#[derive(Clone, Debug)]
pub struct ImageBatch<T = f32> {
    pixels: Tensor<T>,
    tasks: Vec<Task>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(pixels: Tensor<T>, tasks: Vec<Task>) -> Result<Self> {
        if pixels.shape().len() != 4 {
            return Err(Error::shape("image batch", &[0, 0, 0, 0], pixels.shape()));
        }
        if pixels.shape()[0] != tasks.len() {
            return Err(Error::Data(format!(
                "{} images but {} task tags",
                pixels.shape()[0],
                tasks.len()
            )));
        }
        Ok(ImageBatch { pixels, tasks })
    }

    /// Stacks `h x w` grayscale images in `[0, 1]`, replicating to `channels`.
    pub fn from_grayscale(
        images: &[&[f32]],
        height: usize,
        width: usize,
        channels: usize,
        tasks: Vec<Task>,
    ) -> Result<Self> {
        let plane = height * width;
        let mut data = Vec::with_capacity(images.len() * channels * plane);
        for img in images {
            if img.len() != plane {
                return Err(Error::shape("grayscale image", &[height, width], &[img.len()]));
            }
            for _ in 0..channels {
                data.extend(img.iter().map(|&v| T::of(v as f64)));
            }
        }
        ImageBatch::new(
            Tensor::from_vec(&[images.len(), channels, height, width], data),
            tasks,
        )
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Materialized P3/P4/P5 feature maps.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T = f32> {
    pub p3: Tensor<T>,
    pub p4: Tensor<T>,
    pub p5: Tensor<T>,
}

/// Everything a single forward pass produced, as graph handles.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub pyramid: PyramidVars,
    pub context: Option<StructuralContext>,
    pub head: Option<HeadVars>,
}

/// Branches to evaluate in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub detection: bool,
    pub segmentation: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches {
        detection: true,
        segmentation: true,
    };
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    backbone: Backbone,
    head: DetectionHead,
    sce: SceModule,
}

/// Builds a model with deterministic initialization from `config.seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParamStore::new();
    let rng = LayerRng::new(config.seed);
    let backbone = Backbone::new(&mut params, &rng, config);
    let head = DetectionHead::new(&mut params, &rng, config);
    let sce = SceModule::new(&mut params, &rng, config);
    Ok(Model {
        config: config.clone(),
        params,
        backbone,
        head,
        sce,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &DetectionHead {
        &self.head
    }

    pub fn graph(&self, training: bool) -> Graph<'_, T> {
        Graph::new(&self.params, training)
    }

    pub fn expected_input_shape(&self, batch: usize) -> [usize; 4] {
        let [h, w] = self.config.input_size;
        [batch, self.config.input_channels, h, w]
    }

    pub fn check_input(&self, pixels: &Tensor<T>) -> Result<()> {
        let n = pixels.shape().first().copied().unwrap_or(0);
        let expected = self.expected_input_shape(n);
        if pixels.shape() != expected || n == 0 {
            return Err(Error::shape("input images", &expected, pixels.shape()));
        }
        Ok(())
    }

    pub fn param_group(&self, id: ctxdet_tensor::ParamId) -> ParamGroup {
        ParamGroup::of(&self.params.entry(id).name).expect("every parameter carries a group prefix")
    }

    pub fn forward_backbone(&self, g: &mut Graph<'_, T>, images: Var) -> Result<PyramidVars> {
        self.check_input(g.value(images))?;
        Ok(self.backbone.forward(g, images))
    }

    pub fn forward_sce(&self, g: &mut Graph<'_, T>, p3: Var) -> Result<StructuralContext> {
        let (h, w) = self.config.level_sizes()[0];
        let n = g.value(p3).shape()[0];
        let expected = [n, self.config.pyramid_widths()[0], h, w];
        if g.value(p3).shape() != expected {
            return Err(Error::shape("P3", &expected, g.value(p3).shape()));
        }
        Ok(self.sce.forward(g, p3))
    }

    pub fn forward_detection_head(
        &self,
        g: &mut Graph<'_, T>,
        pyramid: &PyramidVars,
        context: Option<&StructuralContext>,
    ) -> Result<HeadVars> {
        self.head.forward(g, pyramid, context)
    }

    /// Runs the requested branches. The segmentation branch is also evaluated
    /// when detection needs it for context fusion.
    pub fn forward(&self, g: &mut Graph<'_, T>, images: Var, branches: Branches) -> Result<ForwardVars> {
        let pyramid = self.forward_backbone(g, images)?;
        let need_context = branches.detection && self.config.context_fusion;
        let context = if branches.segmentation || need_context {
            Some(self.forward_sce(g, pyramid.p3)?)
        } else {
            None
        };
        let head = if branches.detection {
            let ctx = if self.config.context_fusion {
                context.as_ref()
            } else {
                None
            };
            Some(self.forward_detection_head(g, &pyramid, ctx)?)
        } else {
            None
        };
        Ok(ForwardVars {
            pyramid,
            context,
            head,
        })
    }

    /// Evaluation-mode forward returning materialized outputs.
    pub fn infer(&self, pixels: &Tensor<T>, branches: Branches) -> Result<Inference<T>> {
        let mut g = self.graph(false);
        let x = g.input(pixels.clone());
        let vars = self.forward(&mut g, x, branches)?;
        Ok(Inference {
            pyramid: FeaturePyramid {
                p3: g.value(vars.pyramid.p3).clone(),
                p4: g.value(vars.pyramid.p4).clone(),
                p5: g.value(vars.pyramid.p5).clone(),
            },
            seg_logits: vars.context.map(|c| g.value(c.seg_logits).clone()),
            head: vars.head.as_ref().map(|h| HeadOutputs::from_graph(&g, h)),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Inference<T = f32> {
    pub pyramid: FeaturePyramid<T>,
    pub seg_logits: Option<Tensor<T>>,
    pub head: Option<HeadOutputs<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(context: bool) -> ModelConfig {
        ModelConfig {
            input_size: [64, 64],
            width_multiplier: 0.0625,
            depth_multiplier: 0.3,
            head_depth: 1,
            num_disease_classes: 3,
            context_fusion: context,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn every_parameter_belongs_to_exactly_one_group() {
        let model: Model<f32> = build_model(&tiny(true)).unwrap();
        let mut counts = [0usize; 3];
        for (_, e) in model.params.iter() {
            let hits: Vec<_> = ParamGroup::ALL
                .iter()
                .filter(|g| e.name.starts_with(&format!("{}.", g.prefix())))
                .collect();
            assert_eq!(hits.len(), 1, "{}", e.name);
            counts[ParamGroup::ALL.iter().position(|g| g == hits[0]).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn seeded_builds_are_bit_identical() {
        let a: Model<f32> = build_model(&tiny(true)).unwrap();
        let b: Model<f32> = build_model(&tiny(true)).unwrap();
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
        let c: Model<f32> = build_model(&ModelConfig { seed: 8, ..tiny(true) }).unwrap();
        assert!(a.params.iter().zip(c.params.iter()).any(|((_, x), (_, y))| x.value != y.value));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let model: Model<f32> = build_model(&tiny(false)).unwrap();
        let bad = Tensor::zeros(&[1, 1, 32, 64]);
        assert!(matches!(
            model.infer(&bad, Branches::BOTH),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn context_wiring_is_enforced() {
        let with: Model<f32> = build_model(&tiny(true)).unwrap();
        let without: Model<f32> = build_model(&tiny(false)).unwrap();
        let mut g = with.graph(false);
        let x = g.input(Tensor::zeros(&with.expected_input_shape(1)));
        let p = with.forward_backbone(&mut g, x).unwrap();
        assert!(with.forward_detection_head(&mut g, &p, None).is_err());
        let mut g = without.graph(false);
        let x = g.input(Tensor::zeros(&without.expected_input_shape(1)));
        let p = without.forward_backbone(&mut g, x).unwrap();
        let ctx = without.forward_sce(&mut g, p.p3).unwrap();
        assert!(without.forward_detection_head(&mut g, &p, Some(&ctx)).is_err());
        assert_eq!(with.head().classifier_input_width(with.config()), 16 + 7);
        assert_eq!(without.head().classifier_input_width(without.config()), 16);
    }
}
