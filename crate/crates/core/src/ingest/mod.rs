//! Dataset manifests, logo-visibility annotations, image decoding and
//! synthetic dataset generation.

pub mod image;
mod manifest;
pub mod synth;

pub use manifest::{
    load_annotations, load_manifest, Annotation, AnnotationSet, DatasetManifest, LogoGroup, ManifestEntry, Split,
    ANNOTATION_COLUMNS, MANIFEST_COLUMNS,
};
pub use synth::{generate_synthetic, template_network, write_dataset, SynthConfig, SyntheticDataset};
