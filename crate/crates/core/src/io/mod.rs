//! On-disk formats, run configuration and the synthetic data generator.

mod blob;
mod config;
mod dataset;
mod synth;

pub use blob::{decode_blob, encode_blob, read_blob, round_to_f32, write_blob, FeatureBlob, BLOB_MAGIC, BLOB_VERSION};
pub use config::RunConfig;
pub use dataset::{
    load_dataset, manifest_path, read_annotations, read_class_groups, save_dataset, AnnotationRecord, ClipDataset,
    ClipRecord, Manifest, ManifestEntry, Split, MANIFEST_FILE,
};
pub use synth::{generate_synthetic, SyntheticSpec, SyntheticTask};
