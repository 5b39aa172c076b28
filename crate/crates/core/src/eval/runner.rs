use ctxdet_tensor::{exec, Tensor};
use serde::{Deserialize, Serialize};

use super::ap::{compute_ap, pr_curve, ApReport, PrCurve, COCO_IOU_THRESHOLDS};
use super::filter::{domain_rule_filter, DiseaseRuleTable, DEFAULT_FILTER_THRESHOLD};
use super::seg::{compute_seg_metrics, SegReport};
use crate::config::RunMode;
use crate::corpus::Corpus;
use crate::detection::{decode_image, nms, Detection, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use crate::loss::DetectionTarget;
use crate::model::{Branches, Model};
use crate::sce::{predict_anatomy_mask, LabelMask};
use crate::{Error, Result};

/// Which part of a corpus to score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTask {
    Det,
    Seg,
    /// Every task the model was trained for.
    #[default]
    Auto,
}

impl std::str::FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" => Ok(EvalTask::Det),
            "seg" => Ok(EvalTask::Seg),
            "auto" => Ok(EvalTask::Auto),
            _ => Err(Error::Config(format!("unknown eval task {s:?}; expected det, seg or auto"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub task: EvalTask,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring detections kept per image after suppression.
    pub max_detections: usize,
    pub batch_size: usize,
    /// Rule table and coverage threshold; the filter uses the model's own
    /// anatomy prediction for each image.
    pub filter: Option<(DiseaseRuleTable, f64)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            task: EvalTask::Auto,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            max_detections: 100,
            batch_size: 8,
            filter: None,
        }
    }
}

impl EvalOptions {
    pub fn with_filter(mut self, rules: DiseaseRuleTable) -> Self {
        self.filter = Some((rules, DEFAULT_FILTER_THRESHOLD));
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RunMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<ApReport>,
    /// Scores after the anatomy-rule filter, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_filtered: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegReport>,
    pub num_detection_images: usize,
    pub num_segmentation_images: usize,
    /// Detections removed by the filter over all images.
    pub filtered_out: usize,
}

/// Per-image outputs of one inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    pub anatomy: Option<LabelMask>,
}

/// Runs `model` over grayscale `images` in chunks and decodes them.
pub fn predict(model: &Model<f32>, images: &[&[u8]], branches: Branches, options: &EvalOptions) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    let [h, w] = cfg.input_size;
    let channels = cfg.input_channels;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(options.batch_size.max(1)) {
        let mut pixels = Vec::with_capacity(chunk.len() * channels * h * w);
        for img in chunk {
            if img.len() != h * w {
                return Err(Error::shape("image", &[h * w], &[img.len()]));
            }
            for _ in 0..channels {
                pixels.extend(img.iter().map(|&v| v as f32 / 255.0));
            }
        }
        let inf = model.infer(&Tensor::from_vec(&[chunk.len(), channels, h, w], pixels), branches)?;
        let seg = inf.seg_logits.as_ref();
        let preds = exec::map_indices(chunk.len(), |b| {
            let detections = inf.head.as_ref().map_or_else(Vec::new, |head| {
                let mut d = nms(&decode_image(head, b, (h, w), options.score_threshold), options.nms_iou);
                d.truncate(options.max_detections);
                d
            });
            let anatomy = seg.map(|s| {
                let [_, k, sh, sw] = [s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]];
                let plane = k * sh * sw;
                let one = Tensor::from_vec(&[k, sh, sw], s.data()[b * plane..(b + 1) * plane].to_vec());
                predict_anatomy_mask(&one, (h, w))
            });
            Prediction { detections, anatomy }
        });
        out.extend(preds);
    }
    Ok(out)
}

/// Scores a model on a corpus. Asking for a task the mode never trained is
/// an error, as is filtering with a model that has no trained anatomy branch.
pub fn evaluate(model: &Model<f32>, mode: RunMode, corpus: &Corpus, options: &EvalOptions) -> Result<(EvalReport, Vec<PrCurve>)> {
    let (det, seg) = match options.task {
        EvalTask::Det if !mode.trains_detection() => {
            return Err(Error::Config(format!("a {mode} checkpoint has no trained detection head")))
        }
        EvalTask::Seg if !mode.trains_segmentation() => {
            return Err(Error::Config(format!("a {mode} checkpoint has no trained segmentation branch")))
        }
        EvalTask::Det => (true, false),
        EvalTask::Seg => (false, true),
        EvalTask::Auto => (mode.trains_detection(), mode.trains_segmentation()),
    };
    if options.filter.is_some() && !(det && mode.trains_segmentation()) {
        return Err(Error::Config(
            "the anatomy-rule filter needs detection evaluation and a model trained with segmentation".into(),
        ));
    }
    if corpus.image_size != model.config().input_size {
        return Err(Error::Data(format!(
            "corpus images are {:?}, model expects {:?}",
            corpus.image_size,
            model.config().input_size
        )));
    }
    let mut report = EvalReport {
        mode,
        detection: None,
        detection_filtered: None,
        segmentation: None,
        num_detection_images: 0,
        num_segmentation_images: 0,
        filtered_out: 0,
    };
    let mut curves = Vec::new();
    if det {
        if corpus.detection.is_empty() {
            return Err(Error::EmptyDataset("detection"));
        }
        let images: Vec<&[u8]> = corpus.detection.iter().map(|s| s.image.as_slice()).collect();
        let branches = Branches {
            detection: true,
            segmentation: options.filter.is_some() || mode.uses_context(),
        };
        let preds = predict(model, &images, branches, options)?;
        let gts: Vec<DetectionTarget> = corpus.detection.iter().map(|s| s.target.clone()).collect();
        let dets: Vec<Vec<Detection>> = preds.iter().map(|p| p.detections.clone()).collect();
        let ap = compute_ap(&dets, &gts, &COCO_IOU_THRESHOLDS)?;
        for c in &ap.per_class {
            curves.push(pr_curve(&dets, &gts, c.class_id, 0.5));
        }
        report.detection = Some(ap);
        if let Some((rules, threshold)) = &options.filter {
            let filtered: Vec<Vec<Detection>> = preds
                .iter()
                .map(|p| domain_rule_filter(&p.detections, p.anatomy.as_ref().expect("segmentation branch ran"), rules, *threshold))
                .collect();
            report.filtered_out = dets.iter().zip(&filtered).map(|(a, b)| a.len() - b.len()).sum();
            report.detection_filtered = Some(compute_ap(&filtered, &gts, &COCO_IOU_THRESHOLDS)?);
        }
        report.num_detection_images = images.len();
    }
    if seg {
        if corpus.segmentation.is_empty() {
            return Err(Error::EmptyDataset("segmentation"));
        }
        let images: Vec<&[u8]> = corpus.segmentation.iter().map(|s| s.image.as_slice()).collect();
        let branches = Branches {
            detection: false,
            segmentation: true,
        };
        let preds = predict(model, &images, branches, options)?;
        let masks: Vec<LabelMask> = preds.into_iter().map(|p| p.anatomy.expect("segmentation branch ran")).collect();
        let gts: Vec<LabelMask> = corpus.segmentation.iter().map(|s| s.target.mask.clone()).collect();
        report.segmentation = Some(compute_seg_metrics(&masks, &gts, model.config().seg_channels())?);
        report.num_segmentation_images = images.len();
    }
    Ok((report, curves))
}
