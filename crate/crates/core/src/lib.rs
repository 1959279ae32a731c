//! Two-stage cooperative multi-agent learning: agents are first trained with
//! agent-specific global information generated by a hypernetwork, then that
//! information is distilled into a student that only sees local observations.
//!
//! The tensor engine, optimizer and gradient checker are generic over
//! [`Scalar`] (`f32`/`f64`). Everything above them runs on `f64`; the
//! aliases below name those concrete types.

pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod learner;
pub mod nets;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod variant;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Gradients, OpKind, Var};
pub use variant::Variant;

/// Element type used by the networks and learners.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type ParamStore = params::ParamStore<Real>;
pub type Tape<'p> = tape::Tape<'p, Real>;
pub type Adam = optim::Adam<Real>;
