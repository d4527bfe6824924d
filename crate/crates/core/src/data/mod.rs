//! Synthetic data, PNG codecs and dataset manifests.

pub mod codec;
pub mod dataset;
pub mod synth;

pub use codec::{kitti_decode_depth, kitti_encode_depth};
pub use dataset::{crop_frame, load_dataset, load_manifest, write_dataset, write_manifest, DatasetManifest};
pub use synth::{generate_corpus, synth_generate, SyntheticSceneConfig};
