//! Segmentation of tumor regions in histology images: tensors with reverse-mode
//! differentiation, a DeepLab-style network, training, data handling and
//! evaluation metrics.

pub mod data;
pub mod eval;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod opcount;
pub mod rng;
pub mod tensor;
pub mod train;
