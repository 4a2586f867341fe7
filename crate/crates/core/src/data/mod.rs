//! Dataset manifests and the synthetic dataset generator.

mod manifest;
mod synth;

pub use manifest::{Manifest, ManifestRow, Split, TrainSet, MANIFEST_FILE};
pub use synth::{gen_synth, SynthSpec, OCCLUDER_EVAL_DIR, OCCLUDER_TRAIN_DIR};
