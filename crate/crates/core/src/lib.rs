// SPDX-License-Identifier: MIT OR Apache-2.0

//! # latsteer
//!
//! Language directions in the hidden states of multilingual language models.
//!
//! Given hidden states of parallel translations, [`direction_finder`] fits
//! per-layer principal directions; the first one separates languages.
//! [`steerer`] removes (or amplifies) that component from hidden states,
//! [`probe`] checks how well a single projection predicts the language, and
//! [`divergence`] scores steering by top-k next-token KL divergence.
//! [`synth`] produces dumps and distribution families with planted
//! structure so the whole pipeline can be exercised without a model.
//!
//! Hidden states and directions travel between tools as the binary tensor
//! files and dump directories described in [`tensor_store`].

pub mod direction_finder;
pub mod divergence;
pub mod error;
pub mod linalg;
pub mod probe;
pub mod rng;
pub mod steerer;
pub mod synth;
pub mod tensor_store;

pub use direction_finder::{
    fit_directions, layer_variance_profile, project, separation_ratio, ActivationMatrix,
    DirectionSet, LayerDirections,
};
pub use divergence::{
    kl_topk, reduction_summary, token_shift_table, ContextTag, KLReport, TopKDistribution,
};
pub use error::{Error, Result};
pub use probe::{evaluate_probe, train_probe, ProjectionProbe, TrainSettings};
pub use steerer::{grid_search_strength, steer_batch, steer_vector, SteeringConfig, StrengthGrid};
pub use synth::{generate_dump, NextTokenFamily, SynthSpec};
pub use tensor_store::{read_tensor, write_tensor, CorpusManifest, Dump, Tensor};
