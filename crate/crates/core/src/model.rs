//! Corpus, parameters, variational state and sufficient statistics.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{dot, norm};
use crate::specfun;

/// Upper clamp for concentrations. The M-step estimate diverges as the mean
/// resultant length approaches one.
pub const KAPPA_MAX: f64 = 1e5;

/// Soft counts below this mark a component as empty.
pub const EPS_COUNT: f64 = 1e-8;

/// Tolerance on `‖x‖ = 1` before an input vector counts as renormalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Tolerance on `‖μ‖ = 1` for model parameters.
pub const MU_NORM_TOL: f64 = 1e-9;

/// Documents per block when statistics are reduced in a fixed order.
pub(crate) const DOC_BLOCK: usize = 32;

/// A document: an id, an optional category label and a set of unit vectors
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    id: String,
    label: Option<String>,
    dim: usize,
    data: Vec<f64>,
}

impl Document {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Wraps rows that are already unit length.
    pub(crate) fn from_unit_rows(
        id: String,
        label: Option<String>,
        dim: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert!(!data.is_empty() && data.len().is_multiple_of(dim));
        Self {
            id,
            label,
            dim,
            data,
        }
    }
}

/// A validated collection of documents of unit vectors in `R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dim: usize,
    docs: Vec<Document>,
    renormalized: usize,
}

impl Corpus {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Document::len).sum()
    }

    /// How many input vectors were off the unit sphere by more than
    /// [`UNIT_NORM_TOL`] and had to be rescaled at ingestion.
    pub fn renormalized(&self) -> usize {
        self.renormalized
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for doc in &self.docs {
            if let Some(l) = doc.label() {
                if !seen.contains(&l) {
                    seen.push(l);
                }
            }
        }
        seen
    }

    /// Splits the corpus into one sub-corpus per label. Every document must
    /// carry a label.
    pub fn split_by_label(&self) -> Result<Vec<(String, Corpus)>> {
        if let Some(doc) = self.docs.iter().find(|d| d.label.is_none()) {
            return Err(Error::InvalidInput(format!(
                "document '{}' has no label",
                doc.id
            )));
        }
        Ok(self
            .labels()
            .into_iter()
            .map(|label| {
                let docs: Vec<Document> = self
                    .docs
                    .iter()
                    .filter(|d| d.label() == Some(label))
                    .cloned()
                    .collect();
                let sub = Corpus {
                    dim: self.dim,
                    docs,
                    renormalized: 0,
                };
                (label.to_string(), sub)
            })
            .collect())
    }

    /// Concatenates corpora of equal dimension.
    pub fn concat(parts: Vec<Corpus>) -> Result<Corpus> {
        let dim = parts
            .first()
            .map(|c| c.dim)
            .ok_or_else(|| Error::InvalidInput("no corpora to concatenate".into()))?;
        let mut docs = Vec::new();
        let mut renormalized = 0;
        for part in parts {
            if part.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: part.dim,
                });
            }
            renormalized += part.renormalized;
            docs.extend(part.docs);
        }
        Ok(Corpus {
            dim,
            docs,
            renormalized,
        })
    }

    pub(crate) fn from_parts(dim: usize, docs: Vec<Document>) -> Corpus {
        Corpus {
            dim,
            docs,
            renormalized: 0,
        }
    }
}

/// Incrementally assembles a [`Corpus`] from tokens that may arrive in any
/// document order.
#[derive(Debug)]
pub struct CorpusBuilder {
    dim: usize,
    docs: Vec<Document>,
    index: HashMap<String, usize>,
    renormalized: usize,
}

impl CorpusBuilder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidInput(format!(
                "embedding dimension must be at least 2, got {dim}"
            )));
        }
        Ok(Self {
            dim,
            docs: Vec::new(),
            index: HashMap::new(),
            renormalized: 0,
        })
    }

    /// Adds one token to document `doc_id`, normalizing it onto the sphere.
    /// Zero and non-finite vectors are rejected.
    pub fn push(&mut self, doc_id: &str, label: Option<&str>, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite component in a vector of document '{doc_id}'"
            )));
        }
        let n = norm(vector);
        if n == 0.0 {
            return Err(Error::InvalidInput(format!(
                "zero vector in document '{doc_id}'"
            )));
        }
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            self.renormalized += 1;
        }

        let slot = match self.index.get(doc_id) {
            Some(&i) => {
                let doc = &mut self.docs[i];
                if doc.label.as_deref() != label {
                    return Err(Error::InvalidInput(format!(
                        "document '{doc_id}' has conflicting labels {:?} and {:?}",
                        doc.label, label
                    )));
                }
                i
            }
            None => {
                self.docs.push(Document {
                    id: doc_id.to_string(),
                    label: label.map(str::to_string),
                    dim: self.dim,
                    data: Vec::new(),
                });
                self.index.insert(doc_id.to_string(), self.docs.len() - 1);
                self.docs.len() - 1
            }
        };
        self.docs[slot].data.extend(vector.iter().map(|v| v / n));
        Ok(())
    }

    pub fn build(self) -> Result<Corpus> {
        if self.docs.is_empty() {
            return Err(Error::InvalidInput("corpus has no documents".into()));
        }
        Ok(Corpus {
            dim: self.dim,
            docs: self.docs,
            renormalized: self.renormalized,
        })
    }
}

/// One mixture component: mean direction and concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfComponent {
    pub mu: Vec<f64>,
    pub kappa: f64,
}

/// Mixture parameters: shared symmetric Dirichlet `α` and `K` components.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    alpha: f64,
    components: Vec<VmfComponent>,
}

impl ModelParams {
    pub fn new(alpha: f64, components: Vec<VmfComponent>) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "alpha must be > 0, got {alpha}"
            )));
        }
        let dim = components
            .first()
            .map(|c| c.mu.len())
            .ok_or_else(|| Error::InvalidInput("model needs at least one component".into()))?;
        if dim < 2 {
            return Err(Error::InvalidInput(format!(
                "embedding dimension must be at least 2, got {dim}"
            )));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mu.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.mu.len(),
                });
            }
            let n = norm(&c.mu);
            if !n.is_finite() || (n - 1.0).abs() > MU_NORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "component {k}: mean direction has norm {n}"
                )));
            }
            if !(0.0..=KAPPA_MAX).contains(&c.kappa) {
                return Err(Error::InvalidInput(format!(
                    "component {k}: kappa {} outside [0, {KAPPA_MAX}]",
                    c.kappa
                )));
            }
        }
        Ok(Self { alpha, components })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mu.len()
    }

    pub fn components(&self) -> &[VmfComponent] {
        &self.components
    }

    pub fn into_components(self) -> Vec<VmfComponent> {
        self.components
    }

    /// Concatenates the components of several models sharing `D` and `α`.
    pub fn concat(models: &[ModelParams]) -> Result<ModelParams> {
        let first = models
            .first()
            .ok_or_else(|| Error::InvalidInput("no models to combine".into()))?;
        let mut components = Vec::new();
        for m in models {
            if m.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    found: m.dim(),
                });
            }
            if m.alpha != first.alpha {
                return Err(Error::InvalidInput(format!(
                    "models disagree on alpha ({} vs {})",
                    first.alpha, m.alpha
                )));
            }
            components.extend(m.components.iter().cloned());
        }
        Ok(ModelParams {
            alpha: first.alpha,
            components,
        })
    }

    /// Reorders components so that new component `i` is old component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ModelParams> {
        let mut seen = vec![false; self.k()];
        if perm.len() != self.k()
            || perm
                .iter()
                .any(|&p| p >= self.k() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidInput(format!(
                "{perm:?} is not a permutation of 0..{}",
                self.k()
            )));
        }
        Ok(ModelParams {
            alpha: self.alpha,
            components: perm.iter().map(|&p| self.components[p].clone()).collect(),
        })
    }

    /// `log c_D(κ_k)` for every component.
    pub fn log_normalizers(&self) -> Vec<f64> {
        let d = self.dim();
        self.components
            .iter()
            .map(|c| specfun::log_vmf_normalizer_unchecked(d, c.kappa))
            .collect()
    }

    /// `log vMF(x | μ_k, κ_k)`.
    pub fn log_density(&self, k: usize, x: &[f64]) -> f64 {
        let c = &self.components[k];
        specfun::log_vmf_normalizer_unchecked(self.dim(), c.kappa) + c.kappa * dot(&c.mu, x)
    }
}

/// Variational parameters: per-token responsibilities and per-document
/// Dirichlet parameters.
///
/// `pi[i]` holds the responsibilities of document `i` row-major, one row of
/// length `k` per token.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub k: usize,
    pub pi: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub phi0: Vec<f64>,
}

impl VariationalState {
    /// Uniform responsibilities and `φ_ik = α + N_i/K`.
    pub fn uniform(corpus: &Corpus, k: usize, alpha: f64) -> Self {
        let pi = corpus
            .docs()
            .iter()
            .map(|d| vec![1.0 / k as f64; d.len() * k])
            .collect();
        let phi: Vec<Vec<f64>> = corpus
            .docs()
            .iter()
            .map(|d| vec![alpha + d.len() as f64 / k as f64; k])
            .collect();
        let phi0 = phi.iter().map(|row| row.iter().sum()).collect();
        Self { k, pi, phi, phi0 }
    }

    /// Responsibility row of token `j` in document `i`.
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        &self.pi[i][j * self.k..(j + 1) * self.k]
    }

    /// Checks shapes against `corpus` and the simplex / positivity invariants.
    pub fn check(&self, corpus: &Corpus) -> Result<()> {
        self.check_shapes(corpus)?;
        for (i, doc_pi) in self.pi.iter().enumerate() {
            for (j, row) in doc_pi.chunks_exact(self.k).enumerate() {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidInput(format!(
                        "responsibilities of token {j} in document {i} are not a probability vector"
                    )));
                }
            }
        }
        for (i, row) in self.phi.iter().enumerate() {
            if row.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "dirichlet parameters of document {i} must be positive"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - self.phi0[i]).abs() > 1e-10 * s.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "phi0 of document {i} does not match the row sum"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self, corpus: &Corpus) -> Result<()> {
        if self.k == 0 {
            return Err(Error::ShapeMismatch("state has K = 0".into()));
        }
        let n = corpus.num_docs();
        if self.pi.len() != n || self.phi.len() != n || self.phi0.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "state covers {} documents, corpus has {n}",
                self.pi.len()
            )));
        }
        for (i, doc) in corpus.docs().iter().enumerate() {
            if self.pi[i].len() != doc.len() * self.k {
                return Err(Error::ShapeMismatch(format!(
                    "document {i}: {} responsibilities for {} tokens and K = {}",
                    self.pi[i].len(),
                    doc.len(),
                    self.k
                )));
            }
            if self.phi[i].len() != self.k {
                return Err(Error::ShapeMismatch(format!(
                    "document {i}: {} dirichlet parameters for K = {}",
                    self.phi[i].len(),
                    self.k
                )));
            }
        }
        Ok(())
    }
}

/// Soft counts and resultant vectors accumulated from the responsibilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// `n_{i·k}`, per document.
    pub n_ik: Vec<Vec<f64>>,
    /// `n_{··k}`.
    pub n_k: Vec<f64>,
    /// `r_k = Σ_ij π_ijk x_ij`.
    pub r_k: Vec<Vec<f64>>,
}

impl SufficientStats {
    pub fn k(&self) -> usize {
        self.n_k.len()
    }

    /// Mean resultant length `‖r_k‖ / n_{··k}`.
    pub fn rbar(&self, k: usize) -> f64 {
        norm(&self.r_k[k]) / self.n_k[k]
    }
}

/// Diagnostics from a fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    /// Evidence lower bound after each EM iteration.
    pub elbo_trace: Vec<f64>,
    /// Milliseconds since the start of the fit at the end of each iteration.
    pub elapsed_ms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Total wall time in seconds.
    pub wall_time: f64,
    /// Number of times a concentration hit [`KAPPA_MAX`].
    pub kappa_clamps: usize,
    /// Number of empty components reseeded.
    pub rescued: usize,
}

impl FitReport {
    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }
}

/// Per-block partial statistics: counts per component and resultant vectors.
struct Partial {
    n_k: Vec<f64>,
    r_k: Vec<Vec<f64>>,
}

impl Partial {
    fn zero(k: usize, dim: usize) -> Self {
        Self {
            n_k: vec![0.0; k],
            r_k: vec![vec![0.0; dim]; k],
        }
    }

    fn merge(mut self, other: Partial) -> Self {
        for (a, b) in self.n_k.iter_mut().zip(&other.n_k) {
            *a += b;
        }
        for (ra, rb) in self.r_k.iter_mut().zip(&other.r_k) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
        self
    }
}

fn doc_counts(doc_pi: &[f64], k: usize) -> Vec<f64> {
    let mut n = vec![0.0; k];
    for row in doc_pi.chunks_exact(k) {
        for (acc, p) in n.iter_mut().zip(row) {
            *acc += p;
        }
    }
    n
}

fn add_doc_resultants(partial: &mut Partial, doc: &Document, doc_pi: &[f64], k: usize) {
    for (x, row) in doc.tokens().zip(doc_pi.chunks_exact(k)) {
        for (r, &p) in partial.r_k.iter_mut().zip(row) {
            if p != 0.0 {
                for (acc, xv) in r.iter_mut().zip(x) {
                    *acc += p * xv;
                }
            }
        }
    }
}

/// Accumulates `n_{i·k}`, `n_{··k}` and `r_k` with a fixed reduction order.
pub fn accumulate_stats(corpus: &Corpus, state: &VariationalState) -> Result<SufficientStats> {
    accumulate_stats_with(corpus, state, true)
}

/// As [`accumulate_stats`]. With `deterministic = false` the per-block
/// partial sums are merged in whatever order the thread pool finishes them.
pub fn accumulate_stats_with(
    corpus: &Corpus,
    state: &VariationalState,
    deterministic: bool,
) -> Result<SufficientStats> {
    state.check_shapes(corpus)?;
    let k = state.k;
    let dim = corpus.dim();

    let n_ik: Vec<Vec<f64>> = state.pi.par_iter().map(|p| doc_counts(p, k)).collect();

    let docs = corpus.docs();
    let block = |start: usize| {
        let end = (start + DOC_BLOCK).min(docs.len());
        let mut partial = Partial::zero(k, dim);
        for (doc, pi) in docs[start..end].iter().zip(&state.pi[start..end]) {
            add_doc_resultants(&mut partial, doc, pi, k);
        }
        for row in &n_ik[start..end] {
            for (acc, v) in partial.n_k.iter_mut().zip(row) {
                *acc += v;
            }
        }
        partial
    };
    let starts: Vec<usize> = (0..docs.len()).step_by(DOC_BLOCK).collect();
    let total = if deterministic {
        let partials: Vec<Partial> = starts.par_iter().map(|&s| block(s)).collect();
        partials
            .into_iter()
            .fold(Partial::zero(k, dim), Partial::merge)
    } else {
        starts
            .par_iter()
            .map(|&s| block(s))
            .reduce(|| Partial::zero(k, dim), Partial::merge)
    };

    Ok(SufficientStats {
        n_ik,
        n_k: total.n_k,
        r_k: total.r_k,
    })
}
