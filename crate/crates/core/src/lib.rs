//! Cascaded 3D patch CNN for white-matter lesion segmentation with supervised
//! domain adaptation by retraining fully connected layer groups.
//!
//! The crate is self-contained: tensors and the differentiable primitives
//! ([`ops`]), the eleven-layer network and its trainer ([`nn`]), NIfTI-1 volume
//! I/O ([`nifti`], [`volume`]), patch sampling ([`patches`]), the two-stage
//! cascade ([`cascade`]), adaptation ([`adapt`]), evaluation ([`metrics`]) and a
//! synthetic multi-domain phantom generator ([`phantom`]).

pub mod adapt;
pub mod cascade;
pub mod error;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod ops;
pub mod patches;
pub mod phantom;
pub mod tensor;
pub mod volume;

pub use adapt::{adapt, recommend_freeze};
pub use cascade::{
    postprocess, train_cascade, CascadeConfig, CascadeModel, FeatureCache, PostprocessConfig,
};
pub use error::{Error, NiftiError, Result};
pub use metrics::{Connectivity, MetricsReport};
pub use nn::{FreezeConfig, FreezeMode, Model, TrainConfig};
pub use patches::PatchDataset;
pub use phantom::{DomainSpec, PhantomSpec};
pub use tensor::{Scalar, Tensor};
pub use volume::{Case, Mask, RawCase, Volume};
