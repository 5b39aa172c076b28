//! Anatomy labels and the synthetic disease taxonomy.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Mask label names; the index is the label value.
pub const ANATOMY_NAMES: [&str; 7] = [
    "background",
    "enamel",
    "dentin",
    "root_dentin",
    "pulp",
    "bone",
    "implant",
];

/// Named anatomy classes, excluding background.
pub const NUM_ANATOMY_CLASSES: usize = 6;

pub const BACKGROUND: u8 = 0;
pub const ENAMEL: u8 = 1;
pub const DENTIN: u8 = 2;
pub const ROOT_DENTIN: u8 = 3;
pub const PULP: u8 = 4;
pub const BONE: u8 = 5;
pub const IMPLANT: u8 = 6;

/// RGB palette of the indexed mask PNGs.
pub const PALETTE: [[u8; 3]; 7] = [
    [0, 0, 0],
    [240, 240, 240],
    [230, 190, 60],
    [200, 120, 40],
    [220, 40, 40],
    [60, 140, 220],
    [150, 60, 200],
];

pub fn anatomy_label(name: &str) -> Option<u8> {
    ANATOMY_NAMES.iter().position(|n| *n == name).map(|i| i as u8)
}

pub const MAX_DISEASE_CLASSES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiseaseKind {
    /// Dark spot confined to the enamel shell.
    CariesEnamel,
    /// Dark spot inside the crown dentin.
    CariesDentin,
    /// Small notch in the bone crest next to the cemento-enamel junction.
    BoneLossMild,
    /// Deep notch in the bone crest next to the cemento-enamel junction.
    BoneLossSevere,
    /// Dark halo around a root apex.
    PeriapicalLesion,
    /// Bright deposit on the crown surface near the junction.
    Calculus,
}

impl DiseaseKind {
    pub const ALL: [DiseaseKind; 6] = [
        DiseaseKind::CariesEnamel,
        DiseaseKind::CariesDentin,
        DiseaseKind::BoneLossMild,
        DiseaseKind::BoneLossSevere,
        DiseaseKind::PeriapicalLesion,
        DiseaseKind::Calculus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DiseaseKind::CariesEnamel => "caries_enamel",
            DiseaseKind::CariesDentin => "caries_dentin",
            DiseaseKind::BoneLossMild => "bone_loss_mild",
            DiseaseKind::BoneLossSevere => "bone_loss_severe",
            DiseaseKind::PeriapicalLesion => "periapical_lesion",
            DiseaseKind::Calculus => "calculus",
        }
    }

    /// Anatomy labels a box of this kind may cover.
    pub fn allowed_anatomy(self) -> &'static [u8] {
        match self {
            DiseaseKind::CariesEnamel => &[ENAMEL],
            DiseaseKind::CariesDentin => &[DENTIN],
            DiseaseKind::BoneLossMild | DiseaseKind::BoneLossSevere => &[BONE, ROOT_DENTIN, BACKGROUND],
            DiseaseKind::PeriapicalLesion => &[BONE, ROOT_DENTIN, PULP],
            DiseaseKind::Calculus => &[ENAMEL, BACKGROUND],
        }
    }
}

impl fmt::Display for DiseaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseClass {
    pub id: usize,
    pub name: String,
    pub kind: DiseaseKind,
    /// `0` for the six base classes; higher variants are rendered at a
    /// different size and contrast.
    pub variant: usize,
}

/// Disease classes `0..n`; class `i` has kind `i % 6` and variant `i / 6`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub classes: Vec<DiseaseClass>,
}

impl Taxonomy {
    pub fn new(num_classes: usize) -> Self {
        let classes = (0..num_classes)
            .map(|id| {
                let kind = DiseaseKind::ALL[id % DiseaseKind::ALL.len()];
                let variant = id / DiseaseKind::ALL.len();
                let name = if variant == 0 {
                    kind.as_str().to_string()
                } else {
                    format!("{}_v{variant}", kind.as_str())
                };
                DiseaseClass {
                    id,
                    name,
                    kind,
                    variant,
                }
            })
            .collect();
        Taxonomy { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }
}
