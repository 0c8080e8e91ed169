//! Functional similarity of neural networks through model stitching.
//!
//! The crate is `no_std` (with `alloc`) so that the numerical core carries no
//! IO. File formats, dataset ingestion and the experiment runner live in the
//! companion `stitchlab` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adversarial;
pub mod analysis;
pub mod data;
pub mod error;
mod gemm;
pub mod layers;
pub mod linalg;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod resize;
pub mod shortcuts;
pub mod stitch;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::BnMode;
pub use nets::{ArchId, NetConfig, TappedNetwork, Trace, Until};
pub use optim::{Adam, Parameters, Sgd};
pub use stitch::{dm_init, StitchLayer, StitchedModel};
pub use tensor::Tensor;
