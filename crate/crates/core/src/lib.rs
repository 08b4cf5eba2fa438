//! Aligned multi-output Gaussian processes (AMO-GP).
//!
//! A three-layer hierarchy of per-output alignment GPs, one shared
//! convolution-process multi-output GP and per-output warping GPs, trained by
//! maximizing a nested variational lower bound with closed-form kernel
//! expectations under Gaussian input uncertainty.

pub mod datagen;
pub mod kernels;
pub mod layer;
pub mod linalg;
pub mod model;
pub mod psi;
pub mod serialize;
pub mod tape;
pub mod train;

pub use datagen::{
    amo_spec, baseline_spec, generate_artificial, make_amo, make_baseline, ArtificialDataset,
    BaselineKind, SyntheticOutput, SyntheticSpec,
};
pub use kernels::{cp_cross_cov, gram, rbf_eval, OutputTaggedPoints, RbfParams, SmoothingKernelParams};
pub use layer::{kl_gaussian, layer_marginal, layer_trace_terms, InducingSet, LayerInput, LayerKernel, LayerSpec, MeanFn};
pub use linalg::{robust_cholesky, trace_product, SymMatrix};
pub use model::{
    AmoGpModel, Decomposition, ElboEval, LabeledDataset, MiddleKind, ModelSpec, ParamFamily,
    ParamLayout, Prediction, Series, WarpKind,
};
pub use psi::{mc_psi_oracle, psi_cp, psi_rbf, GaussianMoments, PsiTriple};
pub use serialize::{load_model, model_from_toml, model_to_toml, save_model, DOCUMENT_VERSION};
pub use train::{
    fit, gradient_check, hyperprior_logdensity, GradCheckEntry, StepRecord, TrainConfig,
    TrainTrace,
};

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (jitter escalation exhausted at {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid output index {index} for {outputs} outputs")]
    InvalidOutputIndex { index: usize, outputs: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model document error: {0}")]
    Document(String),
}

pub type Result<T> = std::result::Result<T, Error>;
