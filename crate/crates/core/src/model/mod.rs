//! Vision Transformer definition, weights, and the traced forward pass.

mod backward;
mod config;
mod forward;
mod layers;
mod preprocess;
mod weights;

pub use config::{CropMethod, Pooling, PreprocessConfig, ResizeMethod, ViTConfig};
pub use forward::{BlockCache, ForwardTrace, HeadCache, HeadPass, PoolerCache, ScoreHead};
pub use layers::{LayerNorm, Linear};
pub use preprocess::{normalize, preprocess, CropGeometry, Preprocessed};
pub use weights::{
    AttnPoolerWeights, Block, Classifier, ClassifierKind, ModelBundle, PoolerMlp, ViTWeights,
    EMPTY_PROMPT_EMBEDDING, LAYOUT_TAG,
};
