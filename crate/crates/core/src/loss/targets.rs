use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::sce::LabelMask;
use crate::{Error, Result};

/// Ground-truth boxes and disease classes of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionTarget {
    pub boxes: Vec<BBox>,
    pub class_ids: Vec<usize>,
}

impl DetectionTarget {
    pub fn new(boxes: Vec<BBox>, class_ids: Vec<usize>) -> Self {
        DetectionTarget { boxes, class_ids }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `image_size` is `(height, width)`.
    pub fn validate(&self, image_size: (usize, usize), num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::Target(format!(
                "{} boxes but {} class ids",
                self.boxes.len(),
                self.class_ids.len()
            )));
        }
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        for (b, &c) in self.boxes.iter().zip(&self.class_ids) {
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::Target(format!("box {b:?} is degenerate or out of bounds")));
            }
            if c >= num_classes {
                return Err(Error::Target(format!(
                    "class id {c} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel anatomy labels; `0` is background, `1..=C_s` the named classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationTarget {
    pub mask: LabelMask,
}

impl SegmentationTarget {
    pub fn new(mask: LabelMask) -> Self {
        SegmentationTarget { mask }
    }

    /// `num_labels` counts background.
    pub fn validate(&self, image_size: (usize, usize), num_labels: usize) -> Result<()> {
        if (self.mask.height, self.mask.width) != image_size {
            return Err(Error::shape(
                "segmentation mask",
                &[image_size.0, image_size.1],
                &[self.mask.height, self.mask.width],
            ));
        }
        if let Some(&v) = self.mask.labels.iter().find(|&&v| v as usize >= num_labels) {
            return Err(Error::Target(format!(
                "mask label {v} out of range for {num_labels} labels"
            )));
        }
        Ok(())
    }
}

/// Labels of one training sample: exactly one task's annotation is present.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleTarget {
    Detection(DetectionTarget),
    Segmentation(SegmentationTarget),
}

impl SampleTarget {
    /// Rejects samples carrying both or neither annotation.
    pub fn from_parts(
        detection: Option<DetectionTarget>,
        segmentation: Option<SegmentationTarget>,
    ) -> Result<Self> {
        match (detection, segmentation) {
            (Some(d), None) => Ok(SampleTarget::Detection(d)),
            (None, Some(s)) => Ok(SampleTarget::Segmentation(s)),
            (Some(_), Some(_)) => Err(Error::Target(
                "sample carries both detection and segmentation labels".into(),
            )),
            (None, None) => Err(Error::Target("sample carries no labels".into())),
        }
    }

    pub fn task(&self) -> crate::model::Task {
        match self {
            SampleTarget::Detection(_) => crate::model::Task::Detection,
            SampleTarget::Segmentation(_) => crate::model::Task::Segmentation,
        }
    }
}
