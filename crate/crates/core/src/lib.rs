//! Bayesian domain adaptation of a multiclass relevance vector machine for
//! damage detection under changing environments.

pub mod active;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod learners;
pub mod mapping;
pub mod rvm;
pub mod synthetic;
pub mod truncnorm;

pub use error::{Error, Result};
