//! Synthetic corpora from the generative process
//! `θ_i ~ Dir(α)`, `z_ij ~ Cat(θ_i)`, `x_ij ~ vMF(μ_{z_ij}, κ_{z_ij})`.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`). Stream 0 of the seed
//! draws the true parameters when none are given; document `i` uses stream
//! `i + 1`, so documents can be generated in parallel and the output does
//! not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Corpus, Document, ModelParams, VmfComponent, KAPPA_MAX};
use crate::numeric::{dot, normalize};

/// Settings for [`sample_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub k: usize,
    pub dim: usize,
    pub num_docs: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub alpha: f64,
    /// Concentration shared by all components when `true_params` is unset.
    pub kappa: f64,
    /// Explicit components; otherwise directions are drawn uniformly.
    pub true_params: Option<ModelParams>,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.num_docs == 0 || self.tokens_min == 0 {
            return Err(Error::InvalidInput(
                "K, document count and tokens per document must be at least 1".into(),
            ));
        }
        if self.dim < 2 {
            return Err(Error::InvalidInput(format!(
                "dimension must be >= 2, got {}",
                self.dim
            )));
        }
        if self.tokens_max < self.tokens_min {
            return Err(Error::InvalidInput(format!(
                "tokens_max ({}) < tokens_min ({})",
                self.tokens_max, self.tokens_min
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=KAPPA_MAX).contains(&self.kappa) {
            return Err(Error::InvalidInput(format!(
                "kappa must lie in [0, {KAPPA_MAX}]"
            )));
        }
        if let Some(p) = &self.true_params {
            if p.k() != self.k || p.dim() != self.dim {
                return Err(Error::InvalidInput(format!(
                    "true parameters are K = {}, D = {}; settings ask for K = {}, D = {}",
                    p.k(),
                    p.dim(),
                    self.k,
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Latent variables behind a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub params: ModelParams,
    /// Component of every token, 0-based.
    pub z: Vec<Vec<usize>>,
    pub theta: Vec<Vec<f64>>,
}

/// Draws `θ ~ Dir(α, …, α)` by normalizing independent `Gamma(α, 1)` draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() || k == 0 {
        return Err(Error::InvalidInput(format!(
            "dirichlet needs alpha > 0 and K >= 1 (alpha = {alpha}, K = {k})"
        )));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|v| *v /= total);
    } else {
        // every draw underflowed (tiny alpha): all mass on one coordinate
        let hot = rng.random_range(0..k);
        draws
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i == hot) as u8 as f64);
    }
    Ok(draws)
}

/// Uniform direction on `S^{dim-1}`.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Draws from `vMF(μ, κ)` with Wood's rejection sampler: the cosine
/// `w = μᵀx` from its marginal by envelope rejection, then a uniform
/// tangent direction.
pub fn sample_vmf<R: Rng + ?Sized>(mu: &[f64], kappa: f64, rng: &mut R) -> Result<Vec<f64>> {
    let dim = mu.len();
    if dim < 2 {
        return Err(Error::InvalidInput(format!(
            "dimension must be >= 2, got {dim}"
        )));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidInput(format!(
            "kappa must be >= 0, got {kappa}"
        )));
    }
    let n = crate::numeric::norm(mu);
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("mean direction has norm {n}")));
    }
    let w = sample_vmf_cosine(dim, kappa, rng);

    // tangent direction: Gaussian with the μ component projected out
    let tangent = loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let along = dot(&v, mu);
        v.iter_mut().zip(mu).for_each(|(x, m)| *x -= along * m);
        if normalize(&mut v) > 1e-12 {
            break v;
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let mut x: Vec<f64> = mu
        .iter()
        .zip(&tangent)
        .map(|(m, t)| w * m + s * t)
        .collect();
    normalize(&mut x);
    Ok(x)
}

fn sample_vmf_cosine<R: Rng + ?Sized>(dim: usize, kappa: f64, rng: &mut R) -> f64 {
    let m1 = (dim - 1) as f64;
    // b = (-2κ + sqrt(4κ² + (D-1)²)) / (D-1), written without cancellation
    let b = m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(m1 / 2.0, m1 / 2.0).expect("positive shape");
    loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + m1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return w.clamp(-1.0, 1.0);
        }
    }
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the last partial sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Generates a corpus and its latent variables. Documents are named
/// `doc{i}` with `i` zero-padded.
pub fn sample_corpus(spec: &GenSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let params = match &spec.true_params {
        Some(p) => ModelParams::new(spec.alpha, p.components().to_vec())?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let components = (0..spec.k)
                .map(|_| VmfComponent {
                    mu: sample_uniform_sphere(spec.dim, &mut rng),
                    kappa: spec.kappa,
                })
                .collect();
            ModelParams::new(spec.alpha, components)?
        }
    };

    let width = (spec.num_docs - 1).to_string().len();
    let docs: Vec<(Document, Vec<usize>, Vec<f64>)> = (0..spec.num_docs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let theta = sample_dirichlet(spec.alpha, spec.k, &mut rng)?;
            let len = rng.random_range(spec.tokens_min..=spec.tokens_max);
            let mut z = Vec::with_capacity(len);
            let mut data = Vec::with_capacity(len * spec.dim);
            for _ in 0..len {
                let k = draw_categorical(&theta, &mut rng);
                let c = &params.components()[k];
                data.extend(sample_vmf(&c.mu, c.kappa, &mut rng)?);
                z.push(k);
            }
            let doc = Document::from_unit_rows(format!("doc{i:0width$}"), None, spec.dim, data);
            Ok((doc, z, theta))
        })
        .collect::<Result<_>>()?;

    let mut documents = Vec::with_capacity(docs.len());
    let mut zs = Vec::with_capacity(docs.len());
    let mut thetas = Vec::with_capacity(docs.len());
    for (d, z, t) in docs {
        documents.push(d);
        zs.push(z);
        thetas.push(t);
    }
    Ok((
        Corpus::from_parts(spec.dim, documents),
        GroundTruth {
            params,
            z: zs,
            theta: thetas,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm;
    use crate::specfun::bessel_ratio_a;

    fn spec(k: usize, dim: usize, kappa: f64) -> GenSpec {
        GenSpec {
            k,
            dim,
            num_docs: 20,
            tokens_min: 5,
            tokens_max: 15,
            alpha: 1.0,
            kappa,
            true_params: None,
            seed: 11,
        }
    }

    #[test]
    fn dirichlet_single_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_dirichlet(0.3, 1, &mut rng).unwrap(), vec![1.0]);
        assert!(sample_dirichlet(0.0, 3, &mut rng).is_err());
        assert!(sample_dirichlet(1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_concentrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let th = sample_dirichlet(1e6, 4, &mut rng).unwrap();
        for v in th {
            assert!((v - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn dirichlet_mean_matches_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let th = sample_dirichlet(1.0, 3, &mut rng).unwrap();
            assert!((th.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (m, v) in mean.iter_mut().zip(th) {
                *m += v / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn dirichlet_tiny_alpha_stays_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let th = sample_dirichlet(1e-3, 5, &mut rng).unwrap();
            assert!((th.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vmf_uniform_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = [0.0, 0.0, 1.0];
        let n = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let x = sample_vmf(&mu, 0.0, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        assert!(norm(&mean) <= 0.02, "{mean:?}");
    }

    #[test]
    fn vmf_resultant_matches_bessel_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dim = 10;
        let mu = sample_uniform_sphere(dim, &mut rng);
        let n = 100_000;
        let mut r = vec![0.0; dim];
        for _ in 0..n {
            let x = sample_vmf(&mu, 50.0, &mut rng).unwrap();
            assert!((norm(&x) - 1.0).abs() < 1e-9);
            for (a, v) in r.iter_mut().zip(x) {
                *a += v;
            }
        }
        let rbar = norm(&r) / n as f64;
        let want = bessel_ratio_a(10, 50.0).unwrap();
        assert!((rbar - want).abs() < 0.01, "{rbar} vs {want}");
    }

    #[test]
    fn vmf_rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(sample_vmf(&[1.0], 1.0, &mut rng).is_err());
        assert!(sample_vmf(&[1.0, 0.0], -1.0, &mut rng).is_err());
        assert!(sample_vmf(&[1.0, 1.0], 1.0, &mut rng).is_err());
    }

    #[test]
    fn vmf_two_dimensions_and_huge_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &k in &[0.0, 1.0, 1e5] {
            let x = sample_vmf(&[0.6, 0.8], k, &mut rng).unwrap();
            assert!((norm(&x) - 1.0).abs() < 1e-12);
        }
        let x = sample_vmf(&[0.0, 1.0, 0.0], 1e5, &mut rng).unwrap();
        assert!(x[1] > 0.99);
    }

    #[test]
    fn single_component_corpus() {
        let (c, t) = sample_corpus(&spec(1, 4, 5.0)).unwrap();
        assert!(t.z.iter().flatten().all(|&z| z == 0));
        assert_eq!(c.num_docs(), 20);
        for (doc, z) in c.docs().iter().zip(&t.z) {
            assert_eq!(doc.len(), z.len());
            assert!((5..=15).contains(&doc.len()));
        }
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let a = sample_corpus(&spec(3, 5, 20.0)).unwrap();
        let b = sample_corpus(&spec(3, 5, 20.0)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(3, 5, 20.0);
        other.seed = 12;
        assert_ne!(a.0, sample_corpus(&other).unwrap().0);
    }

    #[test]
    fn explicit_parameters_are_respected() {
        let dim = 6;
        let comps: Vec<VmfComponent> = (0..2)
            .map(|k| {
                let mut mu = vec![0.0; dim];
                mu[k] = 1.0;
                VmfComponent { mu, kappa: 50.0 }
            })
            .collect();
        let mut s = spec(2, dim, 0.0);
        s.num_docs = 40;
        s.tokens_min = 20;
        s.tokens_max = 20;
        s.true_params = Some(ModelParams::new(1.0, comps.clone()).unwrap());
        let (c, t) = sample_corpus(&s).unwrap();
        for (k, comp) in comps.iter().enumerate() {
            let mut r = vec![0.0; dim];
            let mut count = 0;
            for (doc, z) in c.docs().iter().zip(&t.z) {
                for (x, &zk) in doc.tokens().zip(z) {
                    if zk == k {
                        count += 1;
                        r.iter_mut().zip(x).for_each(|(a, v)| *a += v);
                    }
                }
            }
            assert!(count >= 100, "component {k} has {count} tokens");
            let cos = dot(&r, &comp.mu) / norm(&r);
            assert!(cos >= 0.95, "component {k}: cosine {cos}");
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(2, 3, 1.0);
        s.tokens_max = 2;
        assert!(sample_corpus(&s).is_err());
        let mut s = spec(2, 1, 1.0);
        s.dim = 1;
        assert!(sample_corpus(&s).is_err());
        let mut s = spec(2, 3, 1.0);
        s.true_params = Some(
            ModelParams::new(
                1.0,
                vec![VmfComponent {
                    mu: vec![1.0, 0.0, 0.0],
                    kappa: 1.0,
                }],
            )
            .unwrap(),
        );
        assert!(sample_corpus(&s).is_err());
    }
}
