//! Variational EM.
//!
//! One outer iteration is a mean-field sweep over the variational
//! distribution followed by a parameter update:
//!
//! 1. responsibilities `π_ijk ∝ exp(ψ(φ_ik)) vMF(x_ij | μ_k, κ_k)` with `φ`
//!    held fixed,
//! 2. Dirichlet parameters `φ_ik = α + n_{i·k}` from the new `π`,
//! 3. `μ_k = r_k / ‖r_k‖` and `κ_k ≈ (r̄ D - r̄³) / (1 - r̄²)`.
//!
//! Steps 1 and 2 each maximize the bound exactly over their block. Step 3 is
//! exact for `μ` but the concentration update is an approximation, so the
//! bound may dip slightly on an iteration where it moves `κ`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    accumulate_stats_with, Corpus, Document, FitReport, ModelParams, SufficientStats,
    VariationalState, VmfComponent, EPS_COUNT, KAPPA_MAX,
};
use crate::numeric::{dot, norm, normalize, CompensatedSum};
use crate::specfun::{digamma_unchecked, log_gamma_unchecked};

/// How the first set of parameters is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStrategy {
    /// `K` independent uniform directions on the sphere.
    RandomDirections,
    /// The normalized global resultant plus Gaussian noise.
    PerturbedGlobalMean,
    /// `K` distinct tokens drawn uniformly from the corpus.
    #[default]
    SeededTokens,
}

impl InitStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitStrategy::RandomDirections => "random-directions",
            InitStrategy::PerturbedGlobalMean => "perturbed-global-mean",
            InitStrategy::SeededTokens => "seeded-tokens",
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-directions" => Ok(InitStrategy::RandomDirections),
            "perturbed-global-mean" => Ok(InitStrategy::PerturbedGlobalMean),
            "seeded-tokens" => Ok(InitStrategy::SeededTokens),
            other => Err(Error::InvalidInput(format!(
                "unknown init strategy '{other}'"
            ))),
        }
    }
}

/// Settings for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once `(L_t - L_{t-1}) / |L_{t-1}|` drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    pub init: InitStrategy,
    pub kappa_init: f64,
    /// Independent initializations; the fit with the highest final bound
    /// is kept. Restart 0 uses `seed` exactly, restart `r` uses stream `r`.
    pub restarts: usize,
    /// Merge partial statistics in a fixed order so results do not depend
    /// on thread scheduling.
    pub deterministic: bool,
}

impl FitConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            alpha: 1.0,
            max_iters: 100,
            rel_tol: 1e-5,
            seed: 0,
            init: InitStrategy::SeededTokens,
            kappa_init: 10.0,
            restarts: 1,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "rel_tol must be > 0, got {}",
                self.rel_tol
            )));
        }
        if !(self.kappa_init > 0.0 && self.kappa_init <= KAPPA_MAX) {
            return Err(Error::InvalidInput(format!(
                "kappa_init must lie in (0, {KAPPA_MAX}], got {}",
                self.kappa_init
            )));
        }
        Ok(())
    }
}

/// Responsibilities of one document given its Dirichlet parameters.
fn doc_responsibilities(
    doc: &Document,
    params: &ModelParams,
    log_norms: &[f64],
    phi: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let k = params.k();
    let prior: Vec<f64> = phi.iter().map(|&p| digamma_unchecked(p)).collect();
    for (x, row) in doc.tokens().zip(out.chunks_exact_mut(k)) {
        for (kk, slot) in row.iter_mut().enumerate() {
            let c = &params.components()[kk];
            *slot = prior[kk] + log_norms[kk] + c.kappa * dot(&c.mu, x);
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite log responsibility in document '{}'",
                doc.id()
            )));
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(())
}

fn doc_dirichlet(doc_pi: &[f64], k: usize, alpha: f64, phi: &mut [f64]) -> f64 {
    phi.iter_mut().for_each(|p| *p = alpha);
    for row in doc_pi.chunks_exact(k) {
        for (p, r) in phi.iter_mut().zip(row) {
            *p += r;
        }
    }
    phi.iter().sum()
}

fn check_compatible(corpus: &Corpus, params: &ModelParams, state: &VariationalState) -> Result<()> {
    if params.dim() != corpus.dim() {
        return Err(Error::DimensionMismatch {
            expected: corpus.dim(),
            found: params.dim(),
        });
    }
    if params.k() != state.k {
        return Err(Error::ShapeMismatch(format!(
            "model has K = {}, state has K = {}",
            params.k(),
            state.k
        )));
    }
    state.check_shapes(corpus)
}

/// Recomputes every `π_ij·` from the current `φ` and parameters.
pub fn update_responsibilities(
    corpus: &Corpus,
    params: &ModelParams,
    state: &mut VariationalState,
) -> Result<()> {
    check_compatible(corpus, params, state)?;
    let log_norms = params.log_normalizers();
    corpus
        .docs()
        .par_iter()
        .zip(state.pi.par_iter_mut())
        .zip(state.phi.par_iter())
        .try_for_each(|((doc, pi), phi)| doc_responsibilities(doc, params, &log_norms, phi, pi))
}

/// Sets `φ_ik = α + n_{i·k}` from the current responsibilities.
pub fn update_dirichlet(state: &mut VariationalState, alpha: f64) {
    let k = state.k;
    state
        .pi
        .par_iter()
        .zip(state.phi.par_iter_mut())
        .zip(state.phi0.par_iter_mut())
        .for_each(|((pi, phi), phi0)| *phi0 = doc_dirichlet(pi, k, alpha, phi));
}

/// One E-step: a responsibility update followed by a Dirichlet update.
pub fn e_step(
    corpus: &Corpus,
    params: &ModelParams,
    state: &VariationalState,
) -> Result<VariationalState> {
    let mut next = state.clone();
    update_responsibilities(corpus, params, &mut next)?;
    update_dirichlet(&mut next, params.alpha());
    Ok(next)
}

/// Result of an M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    /// Updated components; `None` where `n_{··k} < EPS_COUNT`.
    pub components: Vec<Option<VmfComponent>>,
    /// Components whose concentration was clamped to [`KAPPA_MAX`].
    pub clamped: Vec<usize>,
}

impl MStep {
    pub fn empty(&self) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.is_none().then_some(k))
            .collect()
    }
}

/// Concentration estimate `(r̄ D - r̄³) / (1 - r̄²)`, unclamped.
pub fn approximate_kappa(rbar: f64, dim: usize) -> f64 {
    let d = dim as f64;
    (rbar * d - rbar * rbar * rbar) / (1.0 - rbar * rbar)
}

/// Maximum-likelihood style update of the mean directions and the
/// approximate concentration update.
pub fn m_step(stats: &SufficientStats, dim: usize) -> Result<MStep> {
    if dim < 2 {
        return Err(Error::InvalidInput(format!(
            "dimension must be >= 2, got {dim}"
        )));
    }
    let mut components = Vec::with_capacity(stats.k());
    let mut clamped = Vec::new();
    for (k, (r, &n)) in stats.r_k.iter().zip(&stats.n_k).enumerate() {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.len(),
            });
        }
        if !(n >= EPS_COUNT) {
            components.push(None);
            continue;
        }
        let len = norm(r);
        if len == 0.0 {
            // exactly cancelling resultant: the component is uniform
            let mut mu = vec![0.0; dim];
            mu[0] = 1.0;
            components.push(Some(VmfComponent { mu, kappa: 0.0 }));
            continue;
        }
        let mu: Vec<f64> = r.iter().map(|v| v / len).collect();
        let rbar = (len / n).min(1.0);
        let raw = approximate_kappa(rbar, dim);
        let kappa = if !raw.is_finite() || raw >= KAPPA_MAX {
            clamped.push(k);
            KAPPA_MAX
        } else {
            raw.max(0.0)
        };
        components.push(Some(VmfComponent { mu, kappa }));
    }
    Ok(MStep {
        components,
        clamped,
    })
}

/// Bound contributions of one document that depend only on `φ` and `π`:
/// the Dirichlet prior and entropy terms plus `-Σ π log π`.
fn doc_dirichlet_terms(
    phi: &[f64],
    phi0: f64,
    n_i: &[f64],
    doc_pi: &[f64],
    alpha: f64,
) -> CompensatedSum {
    let k = phi.len() as f64;
    let dig0 = digamma_unchecked(phi0);
    let mut acc = CompensatedSum::new();
    for (&p, &n) in phi.iter().zip(n_i) {
        let dig = digamma_unchecked(p);
        acc.add((alpha - 1.0 + n) * (dig - dig0));
        acc.add(log_gamma_unchecked(p));
        acc.add(-(p - 1.0) * dig);
    }
    acc.add(-log_gamma_unchecked(phi0));
    acc.add((phi0 - k) * dig0);
    for &p in doc_pi {
        if p > 0.0 {
            acc.add(-p * p.ln());
        }
    }
    acc
}

/// Log normalizer of a symmetric `K`-dimensional Dirichlet, `ln Γ(Kα) - K ln Γ(α)`.
pub fn log_dirichlet_normalizer(k: usize, alpha: f64) -> f64 {
    log_gamma_unchecked(k as f64 * alpha) - k as f64 * log_gamma_unchecked(alpha)
}

/// Evidence lower bound `L(q, {μ_k, κ_k})`, including the Dirichlet
/// log-normalizer so that it bounds `log p(X)` exactly.
pub fn elbo(
    corpus: &Corpus,
    params: &ModelParams,
    state: &VariationalState,
    stats: &SufficientStats,
) -> Result<f64> {
    check_compatible(corpus, params, state)?;
    if stats.n_ik.len() != corpus.num_docs() || stats.k() != params.k() {
        return Err(Error::ShapeMismatch(
            "statistics do not match the state".into(),
        ));
    }
    let alpha = params.alpha();
    let per_doc: Vec<f64> = (0..corpus.num_docs())
        .into_par_iter()
        .map(|i| {
            doc_dirichlet_terms(
                &state.phi[i],
                state.phi0[i],
                &stats.n_ik[i],
                &state.pi[i],
                alpha,
            )
            .value()
        })
        .collect();

    let mut total: CompensatedSum = per_doc.into_iter().sum();
    total.add(corpus.num_docs() as f64 * log_dirichlet_normalizer(params.k(), alpha));
    for ((c, log_c), (n, r)) in params
        .components()
        .iter()
        .zip(params.log_normalizers())
        .zip(stats.n_k.iter().zip(&stats.r_k))
    {
        total.add(n * log_c);
        total.add(c.kappa * dot(&c.mu, r));
    }
    let value = total.value();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("evidence lower bound is {value}")));
    }
    Ok(value)
}

/// The part of the bound owned by document `i`, computed token by token:
/// its Dirichlet terms, its share of the normalizer constant and
/// `Σ_jk π_ijk log vMF(x_ij | μ_k, κ_k)`. Summing over documents gives
/// [`elbo`].
pub fn doc_bound(
    doc: &Document,
    params: &ModelParams,
    log_norms: &[f64],
    phi: &[f64],
    phi0: f64,
    doc_pi: &[f64],
) -> f64 {
    let k = params.k();
    let mut n_i = vec![0.0; k];
    let mut acc = CompensatedSum::new();
    for (x, row) in doc.tokens().zip(doc_pi.chunks_exact(k)) {
        for (kk, &p) in row.iter().enumerate() {
            n_i[kk] += p;
            let c = &params.components()[kk];
            acc.add(p * (log_norms[kk] + c.kappa * dot(&c.mu, x)));
        }
    }
    let dir = doc_dirichlet_terms(phi, phi0, &n_i, doc_pi, params.alpha());
    acc.add(dir.value());
    acc.add(log_dirichlet_normalizer(k, params.alpha()));
    acc.value()
}

/// Drives variational EM one block update at a time.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    config: FitConfig,
    params: ModelParams,
    state: VariationalState,
    stats: SufficientStats,
    kappa_clamps: usize,
    rescued: usize,
}

impl<'a> Trainer<'a> {
    /// Initializes parameters with `config.init`.
    pub fn new(corpus: &'a Corpus, config: FitConfig) -> Result<Self> {
        config.validate()?;
        let params = initial_params(corpus, &config)?;
        Self::with_params(corpus, config, params)
    }

    /// Starts from the given parameters; `config.k` must match.
    pub fn with_params(corpus: &'a Corpus, config: FitConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if params.k() != config.k {
            return Err(Error::InvalidInput(format!(
                "initial parameters have K = {}, config asks for {}",
                params.k(),
                config.k
            )));
        }
        if params.dim() != corpus.dim() {
            return Err(Error::DimensionMismatch {
                expected: corpus.dim(),
                found: params.dim(),
            });
        }
        let params = ModelParams::new(config.alpha, params.into_components())?;
        let state = VariationalState::uniform(corpus, config.k, config.alpha);
        let stats = accumulate_stats_with(corpus, &state, config.deterministic)?;
        Ok(Self {
            corpus,
            config,
            params,
            state,
            stats,
            kappa_clamps: 0,
            rescued: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn stats(&self) -> &SufficientStats {
        &self.stats
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    /// Responsibility half of the E-step.
    pub fn update_responsibilities(&mut self) -> Result<()> {
        update_responsibilities(self.corpus, &self.params, &mut self.state)?;
        self.stats = accumulate_stats_with(self.corpus, &self.state, self.config.deterministic)?;
        Ok(())
    }

    /// Dirichlet half of the E-step.
    pub fn update_dirichlet(&mut self) {
        update_dirichlet(&mut self.state, self.config.alpha);
    }

    /// M-step, reseeding empty components.
    pub fn update_params(&mut self) -> Result<()> {
        let step = m_step(&self.stats, self.corpus.dim())?;
        for &k in &step.clamped {
            warn!(
                "component {k}: concentration clamped to {KAPPA_MAX} (mean resultant length {:.12})",
                self.stats.rbar(k)
            );
        }
        self.kappa_clamps += step.clamped.len();
        let empty = step.empty();
        let old = self.params.components();
        let mut components: Vec<VmfComponent> = step
            .components
            .into_iter()
            .zip(old)
            .map(|(new, prev)| new.unwrap_or_else(|| prev.clone()))
            .collect();
        if !empty.is_empty() {
            let seeds = weakest_tokens(self.corpus, &self.state, empty.len());
            for (&k, (i, j)) in empty.iter().zip(seeds) {
                warn!("component {k} is empty; reseeding from token {j} of document {i}");
                components[k] = VmfComponent {
                    mu: self.corpus.docs()[i].token(j).to_vec(),
                    kappa: self.config.kappa_init,
                };
            }
            self.rescued += empty.len();
        }
        self.params = ModelParams::new(self.config.alpha, components)?;
        Ok(())
    }

    pub fn elbo(&self) -> Result<f64> {
        elbo(self.corpus, &self.params, &self.state, &self.stats)
    }

    /// One full EM iteration; returns the bound afterwards.
    pub fn iterate(&mut self) -> Result<f64> {
        self.update_responsibilities()?;
        self.update_dirichlet();
        self.update_params()?;
        self.elbo()
    }

    /// Iterates until the relative improvement of the bound falls below
    /// `rel_tol` or `max_iters` is reached.
    pub fn run(&mut self) -> Result<FitReport> {
        let start = Instant::now();
        let mut report = FitReport::default();
        for it in 0..self.config.max_iters {
            let value = self.iterate()?;
            report.elbo_trace.push(value);
            report.elapsed_ms.push(start.elapsed().as_secs_f64() * 1e3);
            report.iterations = it + 1;
            debug!("iteration {}: elbo = {value}", it + 1);
            if let [.., prev, last] = report.elbo_trace[..] {
                if (last - prev) / prev.abs() < self.config.rel_tol {
                    report.converged = true;
                    break;
                }
            }
        }
        report.wall_time = start.elapsed().as_secs_f64();
        report.kappa_clamps = self.kappa_clamps;
        report.rescued = self.rescued;
        Ok(report)
    }

    pub fn into_parts(self) -> (ModelParams, VariationalState) {
        (self.params, self.state)
    }
}

/// `(doc, token)` positions of the `count` tokens whose largest
/// responsibility is smallest; ties by position.
fn weakest_tokens(corpus: &Corpus, state: &VariationalState, count: usize) -> Vec<(usize, usize)> {
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(corpus.num_tokens());
    for (i, doc) in corpus.docs().iter().enumerate() {
        for j in 0..doc.len() {
            let best = state.row(i, j).iter().copied().fold(0.0, f64::max);
            scored.push((best, i, j));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    scored
        .into_iter()
        .take(count)
        .map(|(_, i, j)| (i, j))
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Initial parameters for `config.init`, drawn from stream 0 of a ChaCha8
/// generator seeded with `config.seed`.
pub fn initial_params(corpus: &Corpus, config: &FitConfig) -> Result<ModelParams> {
    initial_params_stream(corpus, config, 0)
}

/// As [`initial_params`], drawing from stream `stream` instead.
pub fn initial_params_stream(
    corpus: &Corpus,
    config: &FitConfig,
    stream: u64,
) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let dim = corpus.dim();
    let mus: Vec<Vec<f64>> = match config.init {
        InitStrategy::RandomDirections => {
            (0..config.k).map(|_| random_unit(&mut rng, dim)).collect()
        }
        InitStrategy::PerturbedGlobalMean => {
            let mut mean = vec![0.0; dim];
            for doc in corpus.docs() {
                for x in doc.tokens() {
                    mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
                }
            }
            if normalize(&mut mean) < 1e-12 {
                mean = random_unit(&mut rng, dim);
            }
            let scale = 0.5 / (dim as f64).sqrt();
            (0..config.k)
                .map(|_| loop {
                    let mut v: Vec<f64> = mean
                        .iter()
                        .map(|m| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            m + scale * g
                        })
                        .collect();
                    if normalize(&mut v) > 1e-12 {
                        break v;
                    }
                })
                .collect()
        }
        InitStrategy::SeededTokens => {
            let total = corpus.num_tokens();
            if config.k > total {
                return Err(Error::InvalidInput(format!(
                    "K = {} exceeds the number of tokens ({total})",
                    config.k
                )));
            }
            let mut offsets = Vec::with_capacity(corpus.num_docs());
            let mut acc = 0;
            for doc in corpus.docs() {
                offsets.push(acc);
                acc += doc.len();
            }
            index::sample(&mut rng, total, config.k)
                .into_iter()
                .map(|flat| {
                    let i = offsets.partition_point(|&o| o <= flat) - 1;
                    corpus.docs()[i].token(flat - offsets[i]).to_vec()
                })
                .collect()
        }
    };
    ModelParams::new(
        config.alpha,
        mus.into_iter()
            .map(|mu| VmfComponent {
                mu,
                kappa: config.kappa_init,
            })
            .collect(),
    )
}

/// Fits the mixture from the configured initialization, keeping the best
/// of `config.restarts` runs. The report describes the kept run.
pub fn fit(
    corpus: &Corpus,
    config: &FitConfig,
) -> Result<(ModelParams, VariationalState, FitReport)> {
    config.validate()?;
    let mut best: Option<(ModelParams, VariationalState, FitReport)> = None;
    for r in 0..config.restarts {
        let init = initial_params_stream(corpus, config, r as u64)?;
        let (params, state, report) = fit_from(corpus, config, init)?;
        let value = report.final_elbo().unwrap_or(f64::NEG_INFINITY);
        if config.restarts > 1 {
            debug!(
                "restart {r}: elbo = {value} after {} iterations",
                report.iterations
            );
        }
        let better = best
            .as_ref()
            .is_none_or(|b| value > b.2.final_elbo().unwrap_or(f64::NEG_INFINITY));
        if better {
            best = Some((params, state, report));
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fits the mixture starting from `init`.
pub fn fit_from(
    corpus: &Corpus,
    config: &FitConfig,
    init: ModelParams,
) -> Result<(ModelParams, VariationalState, FitReport)> {
    let mut trainer = Trainer::with_params(corpus, config.clone(), init)?;
    let report = trainer.run()?;
    let (params, state) = trainer.into_parts();
    Ok((params, state, report))
}
