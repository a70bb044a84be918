//! Feature files, manifests, noise-aware split marking and the synthetic
//! corpus generator.

mod features;
mod manifest;
mod synthetic;

pub use features::{read_feature_file, write_feature_file, FeatureSequence, FEATURE_MAGIC};
pub use manifest::{
    attach_corrupted, load_examples, load_manifest, mark_examples_noise_aware, mark_noise_aware,
    write_manifest, Example, LabelRange, LoadOptions, Manifest, ManifestRecord, Split,
    MANIFEST_HEADER,
};
pub use synthetic::{generate_synthetic, Modality, SyntheticCorpus, SyntheticSpec};
