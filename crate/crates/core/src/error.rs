use thiserror::Error;

use crate::tensor::{ContainerError, TensorError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {actual:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor {0:?} contains non-finite values")]
    NonFiniteWeight(String),
    #[error("non-finite activation in {stage} of layer {layer}")]
    NonFiniteActivation { layer: usize, stage: &'static str },
    #[error("model uses {actual} pooling, operation requires {expected}")]
    WrongPooling {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("layer {layer} out of range 0..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("invalid layer range: {0}")]
    LayerRange(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("unknown classifier {0:?}")]
    UnknownClassifier(String),
    #[error("unknown embedding {0:?}")]
    UnknownEmbedding(String),
    #[error("classifier {name:?}: {reason}")]
    Classifier { name: String, reason: String },
    #[error("image: {0}")]
    Image(String),
    #[error("heatmap: {0}")]
    Heatmap(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
