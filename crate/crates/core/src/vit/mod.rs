//! Patch embedding and the pre-norm transformer encoder shared by teacher
//! and student, with the token-sparsification hooks of the student.

mod config;
mod model;
mod patch;

pub use config::{ModelConfig, PatchConfig};
pub use model::{Features, InferKeep, Mode, StageControl, Vit, LN_EPS};
pub use patch::patchify;

#[cfg(test)]
mod tests;
