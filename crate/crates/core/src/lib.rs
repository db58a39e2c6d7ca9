//! Non-intrusive reduced order modelling for inverse boundary problems.
//!
//! The pipeline parametrizes a target distribution with a trained network
//! whose selected biases/weights are perturbed ([`boundary`]), pushes the
//! resulting inlet fields through a full-order snapshot provider
//! ([`fullorder`]), compresses the snapshots ([`reduction`]), regresses the
//! parameter-to-latent map ([`regression`]), composes both into ROM variants
//! ([`rom`]) and finally searches the parameter space for the inlet that best
//! reproduces a target wake ([`optimize`]). [`pipeline`] wires the stages
//! together behind a JSON configuration.

pub mod error;
pub mod field;
pub mod fullorder;
pub mod boundary;
pub mod neuralnet;
pub mod reduction;
pub mod regression;
pub mod optimize;
pub mod rom;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
