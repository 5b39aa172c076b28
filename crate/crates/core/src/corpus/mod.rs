//! Seeded synthetic corpus of radiograph-like scenes with anatomy masks and
//! rule-consistent disease boxes.

mod dataset;
mod png_io;
mod scene;
mod taxonomy;

pub use dataset::{
    detection_id, export_dataset, generate_corpus, load_corpus, segmentation_id, sha256_hex, write_corpus, Corpus,
    DatasetManifest, DetectionSample, ManifestEntry, SegmentationSample, MANIFEST_VERSION,
};
pub use png_io::{encode_gray, encode_mask, read_gray, read_mask};
pub use scene::{generate_scene, DiseasePlacement, GeneratorConfig, Scene, SceneSpec, ToothSpec};
pub use taxonomy::*;
