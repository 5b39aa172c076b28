//! Post-inference filter that drops detections lying mostly in anatomy their
//! disease class cannot occur in.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{anatomy_label, Taxonomy, ANATOMY_NAMES};
use crate::detection::{BBox, Detection};
use crate::sce::LabelMask;
use crate::{Error, Result};

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.5;

/// Pixel index range `[x0, x1) x [y0, y1)` covered by `bbox`, using rounded
/// edges and clamped to the image.
pub fn box_pixel_range(bbox: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let clamp = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
    (
        clamp(bbox.x1, width),
        clamp(bbox.x2, width),
        clamp(bbox.y1, height),
        clamp(bbox.y2, height),
    )
}

/// Fraction of the box's pixels whose label is in `allowed`; `None` for a box
/// covering no pixel.
pub fn allowed_coverage(bbox: &BBox, mask: &LabelMask, allowed: &[u8]) -> Option<f64> {
    let (hits, total) = coverage_counts(bbox, mask, allowed);
    (total > 0).then(|| hits as f64 / total as f64)
}

/// `(pixels with an allowed label, pixels in the box)`.
fn coverage_counts(bbox: &BBox, mask: &LabelMask, allowed: &[u8]) -> (usize, usize) {
    let (x0, x1, y0, y1) = box_pixel_range(bbox, mask.width, mask.height);
    let hits = (y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| (x, y)))
        .filter(|&(x, y)| allowed.contains(&mask.get(y, x)))
        .count();
    (hits, (x1 - x0) * (y1 - y0))
}

/// Allowed anatomy labels per disease class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseRuleTable {
    pub allowed: BTreeMap<usize, BTreeSet<u8>>,
}

impl DiseaseRuleTable {
    /// Rules of the synthetic taxonomy, which its generator satisfies by construction.
    pub fn from_taxonomy(taxonomy: &Taxonomy) -> Self {
        DiseaseRuleTable {
            allowed: taxonomy
                .classes
                .iter()
                .map(|c| (c.id, c.kind.allowed_anatomy().iter().copied().collect()))
                .collect(),
        }
    }

    /// Parses `{"disease": ["anatomy", ...]}` where a disease is a class name
    /// from `taxonomy` or a numeric class id.
    pub fn from_json(text: &str, taxonomy: &Taxonomy) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        let mut allowed = BTreeMap::new();
        for (disease, names) in raw {
            let id = taxonomy
                .class_id(&disease)
                .or_else(|| disease.parse().ok())
                .ok_or_else(|| Error::Config(format!("unknown disease class {disease:?} in rules")))?;
            let set = names
                .iter()
                .map(|n| anatomy_label(n).ok_or_else(|| Error::Config(format!("unknown anatomy {n:?} in rules"))))
                .collect::<Result<BTreeSet<u8>>>()?;
            allowed.insert(id, set);
        }
        Ok(DiseaseRuleTable { allowed })
    }

    pub fn load(path: &Path, taxonomy: &Taxonomy) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, taxonomy)
    }

    pub fn to_json(&self, taxonomy: &Taxonomy) -> String {
        let named: BTreeMap<String, Vec<&str>> = self
            .allowed
            .iter()
            .map(|(&id, set)| {
                let name = taxonomy.classes.get(id).map_or_else(|| id.to_string(), |c| c.name.clone());
                (name, set.iter().map(|&l| ANATOMY_NAMES[l as usize]).collect())
            })
            .collect();
        serde_json::to_string_pretty(&named).expect("string map serializes")
    }

    /// Every class in `0..num_classes` must have a non-empty allowed set.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for c in 0..num_classes {
            match self.allowed.get(&c) {
                Some(s) if !s.is_empty() => {}
                Some(_) => return Err(Error::Config(format!("rule for class {c} allows no anatomy"))),
                None => return Err(Error::Config(format!("no rule for class {c}"))),
            }
        }
        Ok(())
    }
}

/// Removes detections whose box pixels fall in forbidden anatomy for a
/// fraction `>= threshold`. Classes missing from `rules` are kept.
pub fn domain_rule_filter(
    detections: &[Detection],
    anatomy: &LabelMask,
    rules: &DiseaseRuleTable,
    threshold: f64,
) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| {
            let Some(allowed) = rules.allowed.get(&d.class_id) else {
                log::warn!("no anatomy rule for class {}; keeping detection", d.class_id);
                return true;
            };
            let allowed: Vec<u8> = allowed.iter().copied().collect();
            let (hits, total) = coverage_counts(&d.bbox, anatomy, &allowed);
            total == 0 || ((total - hits) as f64 / total as f64) < threshold
        })
        .copied()
        .collect()
}
