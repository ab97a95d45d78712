//! Layer graphs, traced forward passes, canonization, grid detections and SGD.

mod canonize;
mod detect;
mod graph;
mod layer;
mod train;
pub mod zoo;

pub use canonize::{canonize, is_canonical};
pub use detect::{cell_probabilities, class_score, nms, BoxRect, Detection, GridGeometry, NmsParams};
pub use graph::{forward, ActivationTrace, ModelGraph};
pub use layer::{Layer, LayerKind, LayerSpec};
pub use train::{
    balanced_class_weights, cell_accuracy, evaluate_loss, train, LabeledImage, TrainConfig, TrainReport,
};
