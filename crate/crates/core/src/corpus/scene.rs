//! Procedural radiograph-like scenes: a row of teeth set in bone, an anatomy
//! mask, and disease findings placed inside the anatomy they are allowed in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::taxonomy::*;
use crate::detection::{box_iou, BBox};
use crate::eval::{allowed_coverage, box_pixel_range};
use crate::loss::DetectionTarget;
use crate::sce::LabelMask;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `(height, width)` in pixels.
    pub image_size: [usize; 2],
    pub num_disease_classes: usize,
    pub min_teeth: usize,
    pub max_teeth: usize,
    pub min_diseases: usize,
    pub max_diseases: usize,
    pub implant_probability: f64,
    pub noise_std: f64,
    /// Minimum fraction of a disease box's pixels lying in its allowed anatomy.
    pub min_rule_coverage: f64,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: [128, 128],
            num_disease_classes: 6,
            min_teeth: 2,
            max_teeth: 3,
            min_diseases: 1,
            max_diseases: 3,
            implant_probability: 0.15,
            noise_std: 0.03,
            min_rule_coverage: 0.8,
            max_retries: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 64 || w < 64 {
            return Err(Error::Config(format!("generator image size {h}x{w} is below 64x64")));
        }
        if self.num_disease_classes == 0 || self.num_disease_classes > MAX_DISEASE_CLASSES {
            return Err(Error::Config(format!(
                "num_disease_classes must be in 1..={MAX_DISEASE_CLASSES}, got {}",
                self.num_disease_classes
            )));
        }
        if self.min_teeth == 0 || self.min_teeth > self.max_teeth || self.max_teeth > 5 {
            return Err(Error::Config("teeth range must satisfy 1 <= min <= max <= 5".into()));
        }
        if self.min_diseases > self.max_diseases {
            return Err(Error::Config("min_diseases exceeds max_diseases".into()));
        }
        if !(0.0..=1.0).contains(&self.implant_probability) || !(0.0..=1.0).contains(&self.min_rule_coverage) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) || self.max_retries == 0 {
            return Err(Error::Config("noise_std must be >= 0 and max_retries >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToothSpec {
    pub center_x: f64,
    pub crown_width: f64,
    pub crown_top: f64,
    /// Cemento-enamel junction height: crown above, root below.
    pub junction: f64,
    pub apex: f64,
    pub root_top_width: f64,
    pub root_apex_width: f64,
    pub enamel_top: f64,
    pub enamel_side: f64,
    pub implant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseasePlacement {
    pub class_id: usize,
    pub kind: DiseaseKind,
    pub tooth: usize,
    pub bbox: BBox,
    /// Fraction of the box's pixels inside the allowed anatomy.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: [usize; 2],
    pub teeth: Vec<ToothSpec>,
    pub bone_line: f64,
    pub bone_wave: (f64, f64),
    pub gradient: (f64, f64),
    pub diseases: Vec<DiseasePlacement>,
    /// Sub-seed that produced a feasible scene.
    pub seed: u64,
    pub attempt: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Row-major 8-bit grayscale.
    pub image: Vec<u8>,
    pub mask: LabelMask,
    pub target: DetectionTarget,
}

fn sub_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        return seed;
    }
    let mut z = seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic scene for `seed`. Infeasible disease placements regenerate
/// the scene from the next sub-seed, up to `config.max_retries` attempts.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<Scene> {
    config.validate()?;
    let taxonomy = Taxonomy::new(config.num_disease_classes);
    for attempt in 0..config.max_retries {
        let s = sub_seed(seed, attempt);
        if let Some(scene) = try_scene(s, attempt, config, &taxonomy) {
            return Ok(scene);
        }
    }
    Err(Error::Data(format!(
        "no feasible scene for seed {seed} after {} attempts",
        config.max_retries
    )))
}

fn superellipse(dx: f64, dy: f64, a: f64, b: f64) -> bool {
    a > 0.0 && b > 0.0 && (dx / a).abs().powi(3) + (dy / b).abs().powi(3) <= 1.0
}

impl ToothSpec {
    fn crown_half_height(&self) -> f64 {
        self.junction - self.crown_top
    }

    fn root_half_width(&self, y: f64) -> Option<f64> {
        if y < self.junction || y > self.apex {
            return None;
        }
        let t = (y - self.junction) / (self.apex - self.junction);
        let mut hw = 0.5 * (self.root_top_width + (self.root_apex_width - self.root_top_width) * t);
        if t > 0.8 {
            let u = (t - 0.8) / 0.2;
            hw *= (1.0 - u * u).max(0.0).sqrt();
        }
        Some(hw)
    }

    /// Anatomy label at pixel center `(x, y)` if it belongs to this tooth.
    fn label_at(&self, x: f64, y: f64) -> Option<u8> {
        let dx = x - self.center_x;
        let a = 0.5 * self.crown_width;
        let b = self.crown_half_height();
        let in_crown = y <= self.junction && superellipse(dx, self.junction - y, a, b);
        let root_hw = self.root_half_width(y);
        let in_root = root_hw.is_some_and(|hw| dx.abs() <= hw);
        if !in_crown && !in_root {
            return None;
        }
        if self.implant {
            return Some(IMPLANT);
        }
        // pulp: rounded chamber in the crown continuing as a tapered canal
        let pulp_top_hw = 0.18 * self.crown_width;
        let chamber = 0.45 * b;
        if y <= self.junction {
            if superellipse(dx, self.junction - y, a - self.enamel_side, b - self.enamel_top) {
                let in_chamber = y >= self.junction - chamber
                    && (dx / pulp_top_hw).powi(2) + ((self.junction - y) / chamber).powi(2) <= 1.0;
                return Some(if in_chamber { PULP } else { DENTIN });
            }
            return Some(ENAMEL);
        }
        let t = (y - self.junction) / (self.apex - self.junction);
        let canal_hw = pulp_top_hw + (0.09 * self.crown_width - pulp_top_hw) * (t / 0.85);
        if t <= 0.85 && dx.abs() <= canal_hw {
            return Some(PULP);
        }
        Some(ROOT_DENTIN)
    }
}

fn intensity_of(label: u8) -> f64 {
    match label {
        ENAMEL => 0.92,
        DENTIN => 0.68,
        ROOT_DENTIN => 0.62,
        PULP => 0.30,
        BONE => 0.45,
        IMPLANT => 0.98,
        _ => 0.08,
    }
}

struct Canvas {
    h: usize,
    w: usize,
    mask: LabelMask,
    tooth_of: Vec<Option<usize>>,
}

fn layout<R: Rng>(rng: &mut R, config: &GeneratorConfig) -> (Vec<ToothSpec>, f64) {
    let [h, w] = config.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let s = hf.min(wf);
    let n = rng.random_range(config.min_teeth..=config.max_teeth);
    let slot = wf / n as f64;
    let crown_top_base = hf * rng.random_range(0.06..0.11);
    let junction = hf * rng.random_range(0.38..0.44);
    let teeth = (0..n)
        .map(|i| {
            let crown_width = slot * rng.random_range(0.72..0.82);
            ToothSpec {
                center_x: (i as f64 + 0.5) * slot + slot * rng.random_range(-0.03..0.03),
                crown_width,
                crown_top: crown_top_base + hf * rng.random_range(-0.015..0.015),
                junction: junction + hf * rng.random_range(-0.01..0.01),
                apex: hf * rng.random_range(0.86..0.93),
                root_top_width: crown_width * rng.random_range(0.74..0.82),
                root_apex_width: crown_width * rng.random_range(0.30..0.38),
                enamel_top: s * rng.random_range(0.085..0.095),
                enamel_side: (crown_width * 0.14).max(s * 0.035),
                implant: rng.random_bool(config.implant_probability),
            }
        })
        .collect();
    let bone_line = junction + hf * rng.random_range(0.035..0.05);
    (teeth, bone_line)
}

fn paint(spec: &SceneSpec) -> Canvas {
    let [h, w] = spec.image_size;
    let mut labels = vec![BACKGROUND; h * w];
    let mut tooth_of = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * w + x;
            let crest = spec.bone_line + spec.bone_wave.0 * (px * spec.bone_wave.1).sin();
            if py >= crest {
                labels[i] = BONE;
            }
            for (t, tooth) in spec.teeth.iter().enumerate() {
                if let Some(l) = tooth.label_at(px, py) {
                    labels[i] = l;
                    tooth_of[i] = Some(t);
                }
            }
        }
    }
    Canvas {
        h,
        w,
        mask: LabelMask::new(h, w, labels),
        tooth_of,
    }
}

struct SizeRange {
    w: (f64, f64),
    h: (f64, f64),
}

fn size_range(kind: DiseaseKind) -> SizeRange {
    match kind {
        DiseaseKind::CariesEnamel => SizeRange { w: (0.06, 0.09), h: (0.05, 0.065) },
        DiseaseKind::CariesDentin => SizeRange { w: (0.07, 0.10), h: (0.07, 0.10) },
        DiseaseKind::BoneLossMild => SizeRange { w: (0.07, 0.09), h: (0.06, 0.08) },
        DiseaseKind::BoneLossSevere => SizeRange { w: (0.10, 0.13), h: (0.12, 0.16) },
        DiseaseKind::PeriapicalLesion => SizeRange { w: (0.10, 0.13), h: (0.09, 0.12) },
        DiseaseKind::Calculus => SizeRange { w: (0.045, 0.06), h: (0.05, 0.07) },
    }
}

/// Candidate box center for `kind` on `tooth`.
fn propose_center<R: Rng>(rng: &mut R, kind: DiseaseKind, tooth: &ToothSpec, bone_line: f64, bw: f64, bh: f64) -> (f64, f64) {
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let a = 0.5 * tooth.crown_width;
    match kind {
        DiseaseKind::CariesEnamel => {
            let dx = a * rng.random_range(-0.45..0.45);
            (tooth.center_x + dx, tooth.crown_top + 0.5 * tooth.enamel_top + rng.random_range(-1.0..1.0))
        }
        DiseaseKind::CariesDentin => {
            let b = tooth.crown_half_height();
            let dx = (a - tooth.enamel_side) * rng.random_range(-0.5..0.5);
            (tooth.center_x + dx, tooth.crown_top + tooth.enamel_top + b * rng.random_range(0.15..0.35))
        }
        DiseaseKind::BoneLossMild | DiseaseKind::BoneLossSevere => {
            let hw = tooth.root_half_width(bone_line + 1.0).unwrap_or(0.5 * tooth.root_top_width);
            (tooth.center_x + side * (hw + 0.3 * bw), bone_line + 0.4 * bh)
        }
        DiseaseKind::PeriapicalLesion => (
            tooth.center_x + rng.random_range(-1.5..1.5),
            tooth.apex - 0.1 * bh + rng.random_range(-1.5..1.5),
        ),
        DiseaseKind::Calculus => {
            let b = tooth.crown_half_height();
            let y = tooth.junction - b * rng.random_range(0.08..0.3);
            (tooth.center_x + side * (a - 0.1 * bw), y)
        }
    }
}

fn place_diseases<R: Rng>(
    rng: &mut R,
    spec: &SceneSpec,
    canvas: &Canvas,
    taxonomy: &Taxonomy,
    count: usize,
    min_coverage: f64,
) -> Option<Vec<DiseasePlacement>> {
    const PROPOSALS: usize = 64;
    let [h, w] = spec.image_size;
    let s = (h.min(w)) as f64;
    let mut out: Vec<DiseasePlacement> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = &taxonomy.classes[rng.random_range(0..taxonomy.len())];
        let kind = class.kind;
        let shrink = 1.0 - 0.08 * class.variant as f64;
        let range = size_range(kind);
        let mut placed = None;
        for _ in 0..PROPOSALS {
            let t = rng.random_range(0..spec.teeth.len());
            let tooth = &spec.teeth[t];
            if tooth.implant && !matches!(kind, DiseaseKind::BoneLossMild | DiseaseKind::BoneLossSevere) {
                continue;
            }
            let bw = s * rng.random_range(range.w.0..range.w.1) * shrink;
            let bh = s * rng.random_range(range.h.0..range.h.1) * shrink;
            let (cx, cy) = propose_center(rng, kind, tooth, spec.bone_line, bw, bh);
            let round2 = |v: f64| (v * 4.0).round() / 4.0;
            let bbox = BBox::new(
                round2(cx - 0.5 * bw),
                round2(cy - 0.5 * bh),
                round2(cx + 0.5 * bw),
                round2(cy + 0.5 * bh),
            );
            if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > w as f64 || bbox.y2 > h as f64 || !bbox.is_valid() {
                continue;
            }
            if out.iter().any(|d| box_iou(&d.bbox, &bbox) > 0.0) {
                continue;
            }
            let coverage = match allowed_coverage(&bbox, &canvas.mask, kind.allowed_anatomy()) {
                Some(c) => c,
                None => continue,
            };
            // findings hug their own tooth
            let (x0, x1, y0, y1) = box_pixel_range(&bbox, w, h);
            let foreign = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .any(|(x, y)| canvas.tooth_of[y * w + x].is_some_and(|o| o != t));
            if coverage >= min_coverage && !foreign {
                placed = Some(DiseasePlacement {
                    class_id: class.id,
                    kind,
                    tooth: t,
                    bbox,
                    coverage,
                });
                break;
            }
        }
        out.push(placed?);
    }
    Some(out)
}

fn render<R: Rng>(rng: &mut R, spec: &SceneSpec, canvas: &Canvas, noise_std: f64) -> Vec<u8> {
    let (h, w) = (canvas.h, canvas.w);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let l = canvas.mask.labels[i];
            let mut v = intensity_of(l);
            if l == BONE {
                v += 0.04 * (0.21 * x + 0.13 * y + phases[0]).sin() + 0.03 * (0.37 * y - 0.11 * x + phases[1]).sin();
            }
            if l == IMPLANT && spec.teeth.iter().any(|t| y > t.junction) && (y as usize / 3) % 2 == 0 {
                v -= 0.1;
            }
            v
        })
        .collect();

    for d in &spec.diseases {
        let b = d.bbox;
        let (cx, cy) = b.center();
        let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
        let variant = d.class_id / DiseaseKind::ALL.len();
        let contrast = 1.0 + 0.15 * variant as f64;
        let (x0, x1, y0, y1) = box_pixel_range(&b, w, h);
        let tooth = &spec.teeth[d.tooth];
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let r2 = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
                let g = (1.0 - r2).max(0.0);
                let i = y * w + x;
                match d.kind {
                    DiseaseKind::CariesEnamel | DiseaseKind::CariesDentin => {
                        img[i] -= 0.38 * contrast * g.sqrt();
                    }
                    DiseaseKind::PeriapicalLesion => {
                        img[i] -= 0.30 * contrast * g.sqrt();
                    }
                    DiseaseKind::Calculus => {
                        img[i] += 0.35 * contrast * g.sqrt();
                    }
                    DiseaseKind::BoneLossMild | DiseaseKind::BoneLossSevere => {
                        // triangular notch widening toward the crest, against the tooth
                        if canvas.mask.labels[i] != BONE {
                            continue;
                        }
                        let depth = (py - b.y1) / b.height();
                        let near = if cx > tooth.center_x { px - b.x1 } else { b.x2 - px };
                        let reach = if d.kind == DiseaseKind::BoneLossSevere { 1.0 } else { 0.7 };
                        if near <= b.width() * (1.0 - depth / reach) {
                            img[i] = 0.12 + 0.05 * depth;
                        }
                    }
                }
            }
        }
    }

    // soften region borders
    let mut blurred = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    acc += img[yy * w + xx];
                    n += 1.0;
                }
            }
            blurred[y * w + x] = acc / n;
        }
    }
    let (gx, gy) = spec.gradient;
    let noise = Normal::new(0.0, noise_std.max(1e-12)).expect("finite std");
    blurred
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (x, y) = ((i % w) as f64 / w as f64 - 0.5, (i / w) as f64 / h as f64 - 0.5);
            let n = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            ((v + gx * x + gy * y + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn try_scene(seed: u64, attempt: usize, config: &GeneratorConfig, taxonomy: &Taxonomy) -> Option<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (teeth, bone_line) = layout(&mut rng, config);
    let mut spec = SceneSpec {
        image_size: config.image_size,
        teeth,
        bone_line,
        bone_wave: (rng.random_range(0.5..1.5), rng.random_range(0.05..0.12)),
        gradient: (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)),
        diseases: Vec::new(),
        seed,
        attempt,
    };
    let canvas = paint(&spec);
    let count = rng.random_range(config.min_diseases..=config.max_diseases);
    spec.diseases = place_diseases(&mut rng, &spec, &canvas, taxonomy, count, config.min_rule_coverage)?;
    let image = render(&mut rng, &spec, &canvas, config.noise_std);
    let target = DetectionTarget::new(
        spec.diseases.iter().map(|d| d.bbox).collect(),
        spec.diseases.iter().map(|d| d.class_id).collect(),
    );
    Some(Scene {
        spec,
        image,
        mask: canvas.mask,
        target,
    })
}
