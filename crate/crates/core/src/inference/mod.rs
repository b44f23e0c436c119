//! Joint posterior over the mapping and the classifier, sampled with NUTS.

pub mod diagnostics;
pub mod model;
pub mod nuts;
pub mod posterior;

pub use model::{DaRvmProblem, Domain, ModelState};
pub use nuts::{Adaptation, LogDensity, NutsSettings};
pub use posterior::{
    expected_mapping, posterior_predictive, posterior_predictive_batch, predict_labels,
    sample_posterior, PosteriorSet, SamplerConfig, WarmStart,
};
