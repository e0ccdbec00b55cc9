//! Procedural labeled expression images.

mod dataset;
mod emotion;
mod render;

pub use dataset::{generate_dataset, manifest_path, standard_heldout_plan, standard_training_plan, DatasetManifest, LabeledImage, ManifestRecord, MANIFEST_FILE};
pub use emotion::Emotion;
pub use render::{render_face, ExpressionParams, FaceImage, IdentityParams, FACE_SIZE, MAX_NOISE};
