//! End-to-end design of coded apertures for compressive imaging.
//!
//! A coded aperture (CA) modulates a scene before it reaches a single-pixel
//! detector or a dispersive spectral imager. This crate models the CA and its
//! structured parameterizations, the two sensing operators, the design
//! regularizers, a dense decoder network, and the coupled trainer that
//! optimizes aperture and decoder together. File formats for datasets,
//! apertures, checkpoints and run configs live in [`io`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ca;
pub mod data;
pub mod decoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod par;
pub mod regularizers;
pub mod sensing;
pub mod trainer;
pub mod workflow;

pub use ca::{expand, CaInit, CaNoise, CaParameterization, CodedApertureSet, NoiseSpec};
pub use data::{Dataset, Split};
pub use decoder::{Activation, DecoderNetwork, LossKind};
pub use error::{Error, Result};
pub use regularizers::{RegularizerKind, RegularizerSpec, RhoSchedule};
pub use sensing::{SensingKind, SensingModel};
pub use trainer::{train_e2e, GateSpec, OptimizerKind, Task, TrainConfig, TrainOutcome};
