//! In-memory corpora and their on-disk layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/annotations.json      detection boxes
//! <dir>/images/<id>.png       8-bit grayscale
//! <dir>/masks/<id>.png        8-bit indexed, segmentation samples only
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctxdet_tensor::exec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::png_io::{encode_gray, encode_mask, read_gray, read_mask};
use super::scene::{generate_scene, GeneratorConfig};
use super::taxonomy::{Taxonomy, ANATOMY_NAMES};
use crate::detection::BBox;
use crate::loss::{DetectionTarget, SegmentationTarget};
use crate::{Error, Result};

pub const MANIFEST_VERSION: &str = "ctxdet-corpus/1";

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub id: String,
    /// Row-major 8-bit grayscale.
    pub image: Vec<u8>,
    pub target: DetectionTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Vec<u8>,
    pub target: SegmentationTarget,
}

/// Two disjoint, partially annotated sample sets sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// `(height, width)`
    pub image_size: [usize; 2],
    pub taxonomy: Taxonomy,
    pub detection: Vec<DetectionSample>,
    pub segmentation: Vec<SegmentationSample>,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Scene seed of sample `index` of `task` (0 detection, 1 segmentation).
fn scene_seed(seed: u64, split: &str, task: u64, index: usize) -> u64 {
    let mut z = seed ^ fnv1a(split) ^ (task << 62) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 29)
}

pub fn detection_id(index: usize) -> String {
    format!("det-{index:05}")
}

pub fn segmentation_id(index: usize) -> String {
    format!("seg-{index:05}")
}

/// Generates `n_detection` box-annotated and `n_segmentation` mask-annotated
/// scenes. Each image belongs to exactly one task.
pub fn generate_corpus(
    n_detection: usize,
    n_segmentation: usize,
    seed: u64,
    split: &str,
    config: &GeneratorConfig,
) -> Result<Corpus> {
    config.validate()?;
    let det = exec::map_indices(n_detection, |i| {
        generate_scene(scene_seed(seed, split, 0, i), config).map(|s| DetectionSample {
            id: detection_id(i),
            image: s.image,
            target: s.target,
        })
    });
    let seg = exec::map_indices(n_segmentation, |i| {
        generate_scene(scene_seed(seed, split, 1, i), config).map(|s| SegmentationSample {
            id: segmentation_id(i),
            image: s.image,
            target: SegmentationTarget::new(s.mask),
        })
    });
    Ok(Corpus {
        image_size: config.image_size,
        taxonomy: Taxonomy::new(config.num_disease_classes),
        detection: det.into_iter().collect::<Result<_>>()?,
        segmentation: seg.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub split: String,
    pub seed: u64,
    /// SHA-256 of the generator configuration as JSON.
    pub config_hash: String,
    pub generator: GeneratorConfig,
    pub detection: Vec<ManifestEntry>,
    pub segmentation: Vec<ManifestEntry>,
    pub annotations: String,
    /// Relative path to SHA-256 of the file bytes.
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the serialized manifest, which covers every file hash.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("{}: unsupported manifest version {:?}", path.display(), m.version)));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    file: String,
    w: usize,
    h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: String,
    class_id: usize,
    #[serde(rename = "box")]
    bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    name: String,
}

/// Detection annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Annotations {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<CategoryRecord>,
    #[serde(default)]
    anatomy: Vec<String>,
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(rel);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

/// Writes `corpus` under `out_dir` and returns its manifest.
pub fn write_corpus(
    corpus: &Corpus,
    seed: u64,
    split: &str,
    config: &GeneratorConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let [h, w] = corpus.image_size;
    let mut files = BTreeMap::new();
    let mut detection = Vec::new();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for s in &corpus.detection {
        let rel = format!("images/{}.png", s.id);
        write_file(out_dir, &rel, &encode_gray(w, h, &s.image), &mut files)?;
        images.push(ImageRecord {
            id: s.id.clone(),
            file: rel.clone(),
            w,
            h,
        });
        for (b, &c) in s.target.boxes.iter().zip(&s.target.class_ids) {
            annotations.push(AnnotationRecord {
                image_id: s.id.clone(),
                class_id: c,
                bbox: *b,
            });
        }
        detection.push(ManifestEntry {
            id: s.id.clone(),
            image: rel,
            mask: None,
        });
    }
    let mut segmentation = Vec::new();
    for s in &corpus.segmentation {
        let rel = format!("images/{}.png", s.id);
        let mask_rel = format!("masks/{}.png", s.id);
        write_file(out_dir, &rel, &encode_gray(w, h, &s.image), &mut files)?;
        write_file(out_dir, &mask_rel, &encode_mask(&s.target.mask), &mut files)?;
        segmentation.push(ManifestEntry {
            id: s.id.clone(),
            image: rel,
            mask: Some(mask_rel),
        });
    }
    let ann = Annotations {
        images,
        annotations,
        categories: corpus
            .taxonomy
            .classes
            .iter()
            .map(|c| CategoryRecord {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
        anatomy: ANATOMY_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let ann_rel = "annotations.json";
    write_file(
        out_dir,
        ann_rel,
        serde_json::to_string_pretty(&ann)?.as_bytes(),
        &mut files,
    )?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        split: split.into(),
        seed,
        config_hash: sha256_hex(serde_json::to_string(config)?.as_bytes()),
        generator: config.clone(),
        detection,
        segmentation,
        annotations: ann_rel.into(),
        files,
    };
    let path = out_dir.join(DatasetManifest::FILE_NAME);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates and writes a corpus. Scenes depend only on `(seed, split,
/// config)`, so regeneration reproduces every byte.
pub fn export_dataset(
    n_detection: usize,
    n_segmentation: usize,
    seed: u64,
    split: &str,
    config: &GeneratorConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = generate_corpus(n_detection, n_segmentation, seed, split, config)?;
    write_corpus(&corpus, seed, split, config, out_dir)
}

fn checked_read(dir: &Path, rel: &str, manifest: &DatasetManifest) -> Result<PathBuf> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    match manifest.files.get(rel) {
        Some(h) if *h == sha256_hex(&bytes) => Ok(path),
        Some(_) => Err(Error::Data(format!("{}: content hash does not match the manifest", path.display()))),
        None => Err(Error::Data(format!("{}: not listed in the manifest", path.display()))),
    }
}

/// Loads a corpus written by [`write_corpus`], verifying file hashes.
pub fn load_corpus(dir: &Path) -> Result<(Corpus, DatasetManifest)> {
    let manifest = DatasetManifest::load(dir)?;
    let [h, w] = manifest.generator.image_size;
    let ann_path = checked_read(dir, &manifest.annotations, &manifest)?;
    let ann: Annotations = serde_json::from_str(
        &std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?,
    )?;
    let mut by_image: BTreeMap<&str, DetectionTarget> = BTreeMap::new();
    for a in &ann.annotations {
        let t = by_image.entry(a.image_id.as_str()).or_default();
        t.boxes.push(a.bbox);
        t.class_ids.push(a.class_id);
    }
    let taxonomy = Taxonomy::new(manifest.generator.num_disease_classes);
    let load_image = |rel: &str| -> Result<Vec<u8>> {
        let path = checked_read(dir, rel, &manifest)?;
        let (ih, iw, px) = read_gray(&path)?;
        if (ih, iw) != (h, w) {
            return Err(Error::Data(format!("{}: size {ih}x{iw}, manifest says {h}x{w}", path.display())));
        }
        Ok(px)
    };
    let mut detection = Vec::with_capacity(manifest.detection.len());
    for e in &manifest.detection {
        let target = by_image.remove(e.id.as_str()).unwrap_or_default();
        target.validate((h, w), taxonomy.len())?;
        detection.push(DetectionSample {
            id: e.id.clone(),
            image: load_image(&e.image)?,
            target,
        });
    }
    if let Some(id) = by_image.keys().next() {
        return Err(Error::Data(format!("annotation refers to unknown detection image {id:?}")));
    }
    let mut segmentation = Vec::with_capacity(manifest.segmentation.len());
    for e in &manifest.segmentation {
        let rel = e
            .mask
            .as_deref()
            .ok_or_else(|| Error::Data(format!("segmentation sample {} has no mask", e.id)))?;
        let target = SegmentationTarget::new(read_mask(&checked_read(dir, rel, &manifest)?)?);
        target.validate((h, w), ANATOMY_NAMES.len())?;
        segmentation.push(SegmentationSample {
            id: e.id.clone(),
            image: load_image(&e.image)?,
            target,
        });
    }
    let det_ids: std::collections::BTreeSet<&str> = detection.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = segmentation.iter().find(|s| det_ids.contains(s.id.as_str())) {
        return Err(Error::Data(format!("image {} appears in both task splits", s.id)));
    }
    let corpus = Corpus {
        image_size: [h, w],
        taxonomy,
        detection,
        segmentation,
    };
    Ok((corpus, manifest))
}
