//! Couplings of standard Gaussian noise batches.
//!
//! Build joint distributions over `k` noise vectors in `R^d` that keep every
//! marginal `N(0, I_d)` while shaping the dependence between samples; draw
//! them reproducibly; check their moment contracts by Monte Carlo; evaluate
//! closed-form diversity quantities; and optimize coupling matrices or
//! realized noises against gallery-level objectives.

pub mod analysis;
pub mod container;
pub mod coupling;
pub mod error;
pub mod generators;
pub mod optimizer;
pub mod quadrature;
pub mod sampler;
pub mod stats;
pub mod validation;

pub use analysis::{
    local_linear_prediction, pairwise_separation, rbf_similarity_closed_form, rbf_similarity_mc,
    separation_bound,
};
pub use container::{export_batch, load_container, Dtype, Sidecar};
pub use coupling::{
    correlation_of, equicorrelated_matrix, factor_correlation, CorrelationStructure, CouplingKind,
    CouplingMatrix, CouplingSpec, SampleCorrelation, SubspaceSpec,
};
pub use error::{CouplingError, Result};
pub use optimizer::{optimize_coupling, refine_noise, AmortizedConfig, RefineConfig};
pub use sampler::{sample, sample_many, NoiseBatch, NoiseSource, PreparedSampler, RandomStream};
pub use validation::{
    check_marginal_invariance, check_minimax, validate_cross_covariance, validate_marginals,
};
