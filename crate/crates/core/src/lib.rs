//! Multi-document von Mises-Fisher mixture with a Dirichlet prior over
//! per-document topic proportions, fitted by variational EM.
//!
//! The crate is organised bottom-up:
//!
//! * [`specfun`]: log-space Bessel, vMF normalizer, digamma, log-gamma.
//! * [`model`]: corpus, parameters, variational state and sufficient statistics.
//! * [`inference`]: E-step, M-step, evidence lower bound and the fit loop.
//! * [`generate`]: synthetic corpora drawn from the generative process.
//! * [`features`]: topic-proportion features and combining per-category models.
//! * [`matching`]: optimal assignment used to align fitted and true components.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod features;
pub mod generate;
pub mod inference;
pub mod matching;
pub mod model;
pub mod numeric;
pub mod specfun;

pub use error::{Error, Result};
pub use features::{combine_and_infer, doc_proportions, InferConfig, TopicFeatures};
pub use generate::{sample_corpus, sample_dirichlet, sample_vmf, GenSpec, GroundTruth};
pub use inference::{e_step, elbo, fit, fit_from, m_step, FitConfig, InitStrategy, Trainer};
pub use model::{
    accumulate_stats, Corpus, CorpusBuilder, Document, FitReport, ModelParams, SufficientStats,
    VariationalState, VmfComponent, KAPPA_MAX,
};
