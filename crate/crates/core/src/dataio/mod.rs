//! Images, manifests and the synthetic dataset generator.

pub mod image;
mod json;
pub mod manifest;
pub mod synth;

pub use json::{read_json, write_json};
pub use self::image::{load_image, quantize16, save_image, BoundingBox, Image};
pub use manifest::{
    manifest_summary, ClassCounts, DatasetManifest, DatasetRecord, Domain, Label, ManifestSummary, PatchOrigin,
    Provenance, Split,
};
pub use synth::{generate_synthetic_dataset, render_synthetic_image, ShapeFamily, SplitSize, SynthConfig};
