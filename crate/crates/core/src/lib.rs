//! Certification of feedforward classifiers against perturbations of a
//! semantically aligned latent space.
//!
//! The pipeline has five stages, each in its own module:
//!
//! - [`linalg`]: dense layered networks, forward pass and manual backprop
//! - [`bounds`]: guaranteed logit bounds over latent ε-balls (interval
//!   propagation and a CROWN-style backward relaxation)
//! - [`train`]: certified training with a mixed nominal / worst-case loss
//! - [`audit`]: unit tests over datasets, verified error, ε search
//! - [`specsheet`]: deployment spec-sheets and the run-time input gate
//!
//! [`world`] builds a small synthetic latent world (decoder, fitted encoder,
//! labelled datasets) so the whole pipeline runs end to end on a desk.

pub mod audit;
pub mod bounds;
pub mod data;
pub mod error;
pub mod init;
pub mod io;
pub mod linalg;
pub mod specsheet;
pub mod train;
pub mod world;

pub use bounds::{Engine, Interval, LinearSpec, Norm, PerturbationSpec, VerificationOutcome};
pub use data::Dataset;
pub use error::{AuditError, Result};
pub use linalg::{Activation, GradientSet, Layer, Matrix, Network, Role};
