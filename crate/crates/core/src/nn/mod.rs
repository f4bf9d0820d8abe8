//! Network assembly, optimization and training.

mod adadelta;
pub(crate) mod container;
mod layer;
mod model;
mod train;

pub use adadelta::{
    adadelta_step, AdadeltaState, DEFAULT_EPSILON as ADADELTA_EPSILON, DEFAULT_RHO as ADADELTA_RHO,
};
pub use container::{load_model, read_model, save_model, write_model, FORMAT_VERSION};
pub use layer::{FeatureShape, FreezeConfig, FreezeMode, Group, LayerKind, LayerSpec};
pub use model::{
    patch_shape, Gradients, Model, ParamCounts, CHANNELS, DROPOUT_P, PATCH_LEN, PATCH_SIZE,
};
pub use train::{train, EpochRecord, TrainConfig, TrainHistory, Trainer};

pub(crate) use model::lesion_probabilities;
