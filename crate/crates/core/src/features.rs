//! Topic-proportion features.
//!
//! A document's feature vector is the posterior Dirichlet mean
//! `E_q[θ_i] = φ_i / φ_i0`. Features for new documents come from running the
//! E-step alone against frozen parameters, possibly the concatenation of
//! several per-category models.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::doc_bound;
use crate::model::{Corpus, Document, ModelParams, VariationalState};
use crate::specfun::digamma_unchecked;

/// Proportions of one document over the (combined) topic set.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicFeatures {
    pub doc_id: String,
    pub proportions: Vec<f64>,
}

/// Limits for E-step-only inference with frozen parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub max_sweeps: usize,
    /// Per-document relative change of the bound that ends the sweeps.
    pub rel_tol: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 50,
            rel_tol: 1e-6,
        }
    }
}

/// `φ_ik / φ_i0` for document `doc_index`.
pub fn doc_proportions(state: &VariationalState, doc_index: usize) -> Result<Vec<f64>> {
    let phi = state.phi.get(doc_index).ok_or(Error::IndexOutOfRange {
        index: doc_index,
        len: state.phi.len(),
    })?;
    let total = state.phi0[doc_index];
    Ok(phi.iter().map(|p| p / total).collect())
}

/// Variational posterior of one document under frozen parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DocPosterior {
    pub pi: Vec<f64>,
    pub phi: Vec<f64>,
    pub phi0: f64,
    /// Bound after each sweep.
    pub bounds: Vec<f64>,
}

/// Alternates responsibility and Dirichlet updates for a single document
/// until its bound stops moving.
pub fn infer_document(
    doc: &Document,
    params: &ModelParams,
    log_norms: &[f64],
    config: &InferConfig,
) -> Result<DocPosterior> {
    let k = params.k();
    let alpha = params.alpha();
    let mut phi = vec![alpha + doc.len() as f64 / k as f64; k];
    let mut phi0: f64 = phi.iter().sum();
    let mut pi = vec![0.0; doc.len() * k];
    let mut bounds = Vec::new();
    let mut logits = vec![0.0; k];
    for _ in 0..config.max_sweeps.max(1) {
        let prior: Vec<f64> = phi.iter().map(|&p| digamma_unchecked(p)).collect();
        for (x, row) in doc.tokens().zip(pi.chunks_exact_mut(k)) {
            for (kk, l) in logits.iter_mut().enumerate() {
                let c = &params.components()[kk];
                *l = prior[kk] + log_norms[kk] + c.kappa * crate::numeric::dot(&c.mu, x);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite log responsibility in document '{}'",
                    doc.id()
                )));
            }
            let mut total = 0.0;
            for (r, l) in row.iter_mut().zip(&logits) {
                *r = (l - max).exp();
                total += *r;
            }
            row.iter_mut().for_each(|r| *r /= total);
        }
        phi.iter_mut().for_each(|p| *p = alpha);
        for row in pi.chunks_exact(k) {
            phi.iter_mut().zip(row).for_each(|(p, r)| *p += r);
        }
        phi0 = phi.iter().sum();

        let bound = doc_bound(doc, params, log_norms, &phi, phi0, &pi);
        let done = bounds
            .last()
            .is_some_and(|&prev: &f64| (bound - prev) / prev.abs() < config.rel_tol);
        bounds.push(bound);
        if done {
            break;
        }
    }
    Ok(DocPosterior {
        pi,
        phi,
        phi0,
        bounds,
    })
}

/// Frozen-parameter inference over a whole corpus.
pub fn infer_state(
    params: &ModelParams,
    corpus: &Corpus,
    config: &InferConfig,
) -> Result<(VariationalState, Vec<DocPosterior>)> {
    if params.dim() != corpus.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: corpus.dim(),
        });
    }
    let log_norms = params.log_normalizers();
    let posts: Vec<DocPosterior> = corpus
        .docs()
        .par_iter()
        .map(|doc| infer_document(doc, params, &log_norms, config))
        .collect::<Result<_>>()?;
    let state = VariationalState {
        k: params.k(),
        pi: posts.iter().map(|p| p.pi.clone()).collect(),
        phi: posts.iter().map(|p| p.phi.clone()).collect(),
        phi0: posts.iter().map(|p| p.phi0).collect(),
    };
    Ok((state, posts))
}

/// Concatenates per-category models into one topic set and derives
/// proportions over it for every document of `corpus`.
pub fn combine_and_infer(
    models: &[ModelParams],
    corpus: &Corpus,
    config: &InferConfig,
) -> Result<Vec<TopicFeatures>> {
    let combined = ModelParams::concat(models)?;
    let (state, _) = infer_state(&combined, corpus, config)?;
    corpus
        .docs()
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            Ok(TopicFeatures {
                doc_id: doc.id().to_string(),
                proportions: doc_proportions(&state, i)?,
            })
        })
        .collect()
}
