// reference values keep all oracle digits
#![allow(clippy::excessive_precision)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;
use vmfmix_core::generate::sample_uniform_sphere;
use vmfmix_core::inference::{approximate_kappa, update_dirichlet, update_responsibilities};
use vmfmix_core::matching::match_directions;
use vmfmix_core::numeric::{dot, norm};
use vmfmix_core::specfun::invert_bessel_ratio;
use vmfmix_core::{
    accumulate_stats, e_step, elbo, fit, fit_from, sample_corpus, Corpus, CorpusBuilder, FitConfig,
    GenSpec, ModelParams, Trainer, VariationalState, VmfComponent,
};

fn comp(mu: &[f64], kappa: f64) -> VmfComponent {
    VmfComponent {
        mu: mu.to_vec(),
        kappa,
    }
}

fn bound(corpus: &Corpus, params: &ModelParams, state: &VariationalState) -> f64 {
    let stats = accumulate_stats(corpus, state).unwrap();
    elbo(corpus, params, state, &stats).unwrap()
}

fn two_token_case() -> (Corpus, ModelParams, VariationalState) {
    let mut b = CorpusBuilder::new(3).unwrap();
    b.push("d", None, &[1.0, 0.0, 0.0]).unwrap();
    b.push("d", None, &[0.0, 0.6, 0.8]).unwrap();
    let corpus = b.build().unwrap();
    let params = ModelParams::new(
        0.8,
        vec![comp(&[1.0, 0.0, 0.0], 2.0), comp(&[0.0, 0.0, 1.0], 5.0)],
    )
    .unwrap();
    let state = VariationalState {
        k: 2,
        pi: vec![vec![0.7, 0.3, 0.2, 0.8]],
        phi: vec![vec![1.5, 2.5]],
        phi0: vec![4.0],
    };
    (corpus, params, state)
}

#[test]
fn elbo_matches_symbolic_evaluation() {
    // 30-digit mpmath evaluation of the bound with c_3(κ) = κ / (4π sinh κ)
    let (corpus, params, state) = two_token_case();
    let got = bound(&corpus, &params, &state);
    assert!((got - -4.810_305_278_949_965_4).abs() < 1e-12, "{got}");
}

/// `log p(X)` for one document with two components in `D = 3`, integrating
/// the Dirichlet prior over the 1-simplex with composite Simpson.
fn log_evidence_by_quadrature(x: &[[f64; 3]], params: &ModelParams, intervals: usize) -> f64 {
    let alpha = params.alpha();
    let dens = |k: usize, x: &[f64; 3]| {
        let c = &params.components()[k];
        let kap = c.kappa;
        kap / (4.0 * PI * kap.sinh()) * (kap * dot(&c.mu, x)).exp()
    };
    let f: Vec<[f64; 2]> = x.iter().map(|xi| [dens(0, xi), dens(1, xi)]).collect();
    let log_norm = ln_gamma(2.0 * alpha) - 2.0 * ln_gamma(alpha);
    let integrand = |t: f64| {
        if t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        let prior = (log_norm + (alpha - 1.0) * (t.ln() + (1.0 - t).ln())).exp();
        prior
            * f.iter()
                .map(|fi| t * fi[0] + (1.0 - t) * fi[1])
                .product::<f64>()
    };
    let h = 1.0 / intervals as f64;
    let mut sum = integrand(0.0) + integrand(1.0);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * integrand(i as f64 * h);
    }
    (sum * h / 3.0).ln()
}

#[test]
fn bound_never_exceeds_quadrature_evidence() {
    let (corpus, _, hand) = two_token_case();
    let params = ModelParams::new(
        1.7,
        vec![comp(&[1.0, 0.0, 0.0], 2.0), comp(&[0.0, 0.0, 1.0], 5.0)],
    )
    .unwrap();
    let xs = [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
    let coarse = log_evidence_by_quadrature(&xs, &params, 200_000);
    let fine = log_evidence_by_quadrature(&xs, &params, 400_000);
    assert!(
        (coarse - fine).abs() < 1e-6,
        "quadrature unresolved: {coarse} vs {fine}"
    );

    let mut state = hand;
    assert!(bound(&corpus, &params, &state) <= fine);
    for _ in 0..200 {
        state = e_step(&corpus, &params, &state).unwrap();
    }
    let best = bound(&corpus, &params, &state);
    assert!(best <= fine + 1e-9, "bound {best} above evidence {fine}");
    // mean-field gap is small for this instance
    assert!(fine - best < 0.5, "gap {}", fine - best);
}

fn random_problem(seed: u64, k: usize, dim: usize) -> (Corpus, ModelParams) {
    let spec = GenSpec {
        k,
        dim,
        num_docs: 12,
        tokens_min: 3,
        tokens_max: 9,
        alpha: 0.7,
        kappa: 8.0,
        true_params: None,
        seed,
    };
    let (corpus, _) = sample_corpus(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let comps = (0..k)
        .map(|_| {
            comp(
                &sample_uniform_sphere(dim, &mut rng),
                rng.random_range(0.0..20.0),
            )
        })
        .collect();
    (corpus, ModelParams::new(0.7, comps).unwrap())
}

#[test]
fn responsibility_update_is_blockwise_optimal() {
    for seed in 0..5 {
        let (corpus, params) = random_problem(seed, 3, 4);
        let mut state = VariationalState::uniform(&corpus, 3, params.alpha());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for row in &mut state.phi {
            row.iter_mut().for_each(|p| *p = rng.random_range(0.5..6.0));
        }
        state.phi0 = state.phi.iter().map(|r| r.iter().sum()).collect();
        update_responsibilities(&corpus, &params, &mut state).unwrap();
        let base = bound(&corpus, &params, &state);
        for _ in 0..50 {
            let i = rng.random_range(0..corpus.num_docs());
            let j = rng.random_range(0..corpus.docs()[i].len());
            let mut s: Vec<f64> = (0..3).map(|_| -rng.random::<f64>().ln()).collect();
            let tot: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= tot);
            let mut moved = state.clone();
            for (kk, v) in s.iter().enumerate() {
                let p = &mut moved.pi[i][j * 3 + kk];
                *p = (1.0 - 1e-3) * *p + 1e-3 * v;
            }
            let after = bound(&corpus, &params, &moved);
            assert!(
                after <= base + 1e-9,
                "perturbation raised bound by {}",
                after - base
            );
        }
    }
}

#[test]
fn e_step_sub_updates_never_decrease_bound() {
    for seed in 0..5 {
        let (corpus, params) = random_problem(seed, 4, 5);
        let mut state = VariationalState::uniform(&corpus, 4, params.alpha());
        let mut prev = bound(&corpus, &params, &state);
        for _ in 0..10 {
            update_responsibilities(&corpus, &params, &mut state).unwrap();
            let a = bound(&corpus, &params, &state);
            update_dirichlet(&mut state, params.alpha());
            let b = bound(&corpus, &params, &state);
            assert!(a >= prev - 1e-9 && b >= a - 1e-9, "{prev} -> {a} -> {b}");
            prev = b;
        }
    }
}

#[test]
fn dirichlet_update_is_stationary() {
    let (corpus, params) = random_problem(3, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let grad = |state: &VariationalState| -> Vec<f64> {
        let stats = accumulate_stats(&corpus, state).unwrap();
        let mut g = Vec::new();
        for i in 0..state.phi.len() {
            for k in 0..state.k {
                let h = 1e-4 * state.phi[i][k];
                let eval = |delta: f64| {
                    let mut s = state.clone();
                    s.phi[i][k] += delta;
                    s.phi0[i] += delta;
                    elbo(&corpus, &params, &s, &stats).unwrap()
                };
                g.push((eval(h) - eval(-h)) / (2.0 * h));
            }
        }
        g
    };

    let mut random = VariationalState::uniform(&corpus, 3, params.alpha());
    update_responsibilities(&corpus, &params, &mut random).unwrap();
    for row in &mut random.phi {
        row.iter_mut().for_each(|p| *p = rng.random_range(0.3..8.0));
    }
    random.phi0 = random.phi.iter().map(|r| r.iter().sum()).collect();
    let scale: f64 = grad(&random).iter().map(|g| g.abs()).sum();
    assert!(scale > 1.0);

    let mut at_update = random.clone();
    update_dirichlet(&mut at_update, params.alpha());
    for g in grad(&at_update) {
        assert!(g.abs() <= 1e-5 * scale, "gradient {g} vs scale {scale}");
    }
}

#[test]
fn mean_direction_update_is_optimal() {
    let (corpus, params) = random_problem(5, 3, 6);
    let state = e_step(
        &corpus,
        &params,
        &VariationalState::uniform(&corpus, 3, params.alpha()),
    )
    .unwrap();
    let stats = accumulate_stats(&corpus, &state).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..3 {
        let r = &stats.r_k[k];
        let best_mu: Vec<f64> = r.iter().map(|v| v / norm(r)).collect();
        let with_mu = |mu: Vec<f64>| {
            let mut comps = params.components().to_vec();
            comps[k].mu = mu;
            let p = ModelParams::new(params.alpha(), comps).unwrap();
            elbo(&corpus, &p, &state, &stats).unwrap()
        };
        let best = with_mu(best_mu);
        for _ in 0..100 {
            let other = with_mu(sample_uniform_sphere(6, &mut rng));
            assert!(other <= best + 1e-9);
        }
    }
}

#[test]
fn kappa_approximation_table() {
    let table = include_str!("fixtures/kappa_approx.csv");
    let mut rows = 0;
    for line in table.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (d, rbar, exact, approx) = (f[0] as usize, f[1], f[2], f[3]);
        let solved = invert_bessel_ratio(d, rbar).unwrap();
        assert!(
            (solved - exact).abs() <= 1e-8 * exact,
            "D={d} r={rbar}: {solved} vs {exact}"
        );
        let est = approximate_kappa(rbar, d);
        assert!((est - approx).abs() <= 1e-12 * approx);
        let rel = (est - solved).abs() / solved;
        let limit = match d {
            3 => 0.05,
            10 => 0.02,
            _ => 0.005,
        };
        assert!(rel <= limit, "D={d} r={rbar}: relative error {rel}");
        rows += 1;
    }
    assert_eq!(rows, 9);
}

#[test]
fn permuting_initial_components_permutes_the_fit() {
    let (corpus, params) = random_problem(8, 3, 5);
    let mut cfg = FitConfig::new(3);
    cfg.alpha = params.alpha();
    cfg.max_iters = 30;
    let (a, _, ra) = fit_from(&corpus, &cfg, params.clone()).unwrap();
    let perm = [2, 0, 1];
    let (b, _, rb) = fit_from(&corpus, &cfg, params.permuted(&perm).unwrap()).unwrap();
    assert_eq!(ra.iterations, rb.iterations);
    for (new, &old) in perm.iter().enumerate() {
        let (ca, cb) = (&a.components()[old], &b.components()[new]);
        assert!((ca.kappa - cb.kappa).abs() <= 1e-9 * ca.kappa.max(1.0));
        for (x, y) in ca.mu.iter().zip(&cb.mu) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn single_component_fit_is_global_resultant() {
    let (corpus, _) = random_problem(9, 2, 4);
    let mut r = vec![0.0; 4];
    for doc in corpus.docs() {
        for x in doc.tokens() {
            r.iter_mut().zip(x).for_each(|(a, v)| *a += v);
        }
    }
    let n = norm(&r);
    let (p, state, report) = fit(&corpus, &FitConfig::new(1)).unwrap();
    for (m, v) in p.components()[0].mu.iter().zip(&r) {
        assert!((m - v / n).abs() < 1e-12);
    }
    assert!(report.converged && report.iterations == 2);
    assert!(state.pi.iter().flatten().all(|&v| v == 1.0));
}

#[test]
fn recovers_planted_components() {
    let spec = GenSpec {
        k: 3,
        dim: 10,
        num_docs: 200,
        tokens_min: 30,
        tokens_max: 30,
        alpha: 1.0,
        kappa: 50.0,
        true_params: None,
        seed: 2024,
    };
    let (corpus, truth) = sample_corpus(&spec).unwrap();
    let mut cfg = FitConfig::new(3);
    cfg.seed = 1;
    let (fitted, _, report) = fit(&corpus, &cfg).unwrap();
    let refs: Vec<Vec<f64>> = truth
        .params
        .components()
        .iter()
        .map(|c| c.mu.clone())
        .collect();
    let got: Vec<Vec<f64>> = fitted.components().iter().map(|c| c.mu.clone()).collect();
    let m = match_directions(&refs, &got).unwrap();
    assert!(m.min_cosine() >= 0.98, "{m:?}");
    for &(_, f, _) in &m.pairs {
        let k = fitted.components()[f].kappa;
        assert!((k - 50.0).abs() / 50.0 <= 0.25, "kappa {k}");
    }
    assert!(report.converged);
}

#[test]
fn deterministic_fits_are_bitwise_reproducible() {
    let (corpus, _) = random_problem(12, 4, 6);
    let mut cfg = FitConfig::new(4);
    cfg.seed = 77;
    let a = fit(&corpus, &cfg).unwrap();
    let b = fit(&corpus, &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2.elbo_trace, b.2.elbo_trace);
    cfg.deterministic = false;
    let c = fit(&corpus, &cfg).unwrap();
    for (x, y) in a.0.components().iter().zip(c.0.components()) {
        assert!((x.kappa - y.kappa).abs() <= 1e-8 * x.kappa.max(1.0));
    }
}

#[test]
fn trainer_exposes_block_updates() {
    let (corpus, params) = random_problem(13, 2, 3);
    let mut cfg = FitConfig::new(2);
    cfg.alpha = params.alpha();
    let mut t = Trainer::with_params(&corpus, cfg.clone(), params).unwrap();
    let l0 = t.elbo().unwrap();
    t.update_responsibilities().unwrap();
    let l1 = t.elbo().unwrap();
    t.update_dirichlet();
    let l2 = t.elbo().unwrap();
    assert!(l1 >= l0 - 1e-9 && l2 >= l1 - 1e-9);
    t.update_params().unwrap();
    let l3 = t.elbo().unwrap();
    assert!(l3 >= l2 - 1e-6 * l2.abs());
    cfg.k = 3;
    let wrong = ModelParams::new(cfg.alpha, vec![comp(&[1.0, 0.0, 0.0], 1.0)]).unwrap();
    assert!(Trainer::with_params(&corpus, cfg, wrong).is_err());
}

#[test]
fn restarts_keep_the_best_bound() {
    let (corpus, _) = random_problem(21, 4, 5);
    let mut cfg = FitConfig::new(4);
    cfg.seed = 3;
    let single = fit(&corpus, &cfg).unwrap();
    let first = fit_from(
        &corpus,
        &cfg,
        vmfmix_core::inference::initial_params(&corpus, &cfg).unwrap(),
    )
    .unwrap();
    assert_eq!(single.0, first.0);
    cfg.restarts = 5;
    let best = fit(&corpus, &cfg).unwrap();
    assert!(best.2.final_elbo().unwrap() >= single.2.final_elbo().unwrap());
    for r in 0..5 {
        let init = vmfmix_core::inference::initial_params_stream(&corpus, &cfg, r).unwrap();
        let run = fit_from(&corpus, &cfg, init).unwrap();
        assert!(run.2.final_elbo().unwrap() <= best.2.final_elbo().unwrap());
    }
    cfg.restarts = 0;
    assert!(fit(&corpus, &cfg).is_err());
}
