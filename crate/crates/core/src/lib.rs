//! Posterior-guided architecture search over a weight-sharing super-network.
//!
//! A super-network's kernel slices are gated by Bernoulli masks whose keep
//! probabilities are trained jointly with the weights under a relaxed
//! (Gumbel-sigmoid) variational-dropout objective. Search then samples hard
//! masks from the learned probabilities and ranks the resulting sub-networks
//! on validation data with the inherited weights.

pub mod architecture;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use architecture::{prune, Architecture, PrunedNet};
pub use autodiff::{grad_check, Graph, NodeId};
pub use error::{DataError, Error, Result};
pub use sampler::{sample_hard, sample_relaxed, MaskMode, MaskSample, Temperature};
pub use space::{Activation, LayerSpec, SearchSpaceSpec, SliceId, SliceLayout};
pub use supernet::{InitConfig, KeepGranularity, SuperNet};
pub use tensor::Tensor;
