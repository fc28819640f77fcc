mod common;

use common::*;
use memoe::em::{self, FitConfig, RandomEffects};
use memoe::inference;
use memoe::model::{self, Dataset, Dims, ModelParams, Observation, Subject};
use memoe::select;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain EM for a single-expert linear mixed model with exact Gaussian posteriors.
fn lmm_em_oracle(ds: &Dataset, init: &ModelParams, iters: usize) -> ModelParams {
    let mut p = init.clone();
    let Dims { p: px, q, d } = ds.dims();
    let n_obs = ds.total_obs() as f64;
    for _ in 0..iters {
        let s2 = p.sigma2[0];
        let sigma_inv = p.sigma.clone().try_inverse().unwrap();
        let beta = p.beta.row(0).transpose();
        let post: Vec<(DVector<f64>, DMatrix<f64>)> = ds
            .subjects()
            .iter()
            .map(|s| {
                let mut prec = sigma_inv.clone();
                let mut rhs = &sigma_inv * (&p.kappa * &s.w);
                for o in &s.obs {
                    prec += &o.z * o.z.transpose() / s2;
                    rhs += &o.z * ((o.y - beta.dot(&o.x)) / s2);
                }
                let cov = prec.try_inverse().unwrap();
                (&cov * rhs, cov)
            })
            .collect();
        let mut xtx = DMatrix::zeros(px, px);
        let mut xty = DVector::zeros(px);
        for (s, (m, _)) in ds.subjects().iter().zip(&post) {
            for o in &s.obs {
                xtx += &o.x * o.x.transpose();
                xty += &o.x * (o.y - o.z.dot(m));
            }
        }
        let beta = xtx.lu().solve(&xty).unwrap();
        let mut rss = 0.0;
        for (s, (m, v)) in ds.subjects().iter().zip(&post) {
            for o in &s.obs {
                rss += (o.y - beta.dot(&o.x) - o.z.dot(m)).powi(2) + (o.z.transpose() * v * &o.z)[0];
            }
        }
        let mut uw = DMatrix::zeros(q, d);
        let mut ww = DMatrix::zeros(d, d);
        for (s, (m, _)) in ds.subjects().iter().zip(&post) {
            uw += m * s.w.transpose();
            ww += &s.w * s.w.transpose();
        }
        let kappa = uw * ww.try_inverse().unwrap();
        let mut sigma = DMatrix::zeros(q, q);
        for (s, (m, v)) in ds.subjects().iter().zip(&post) {
            let r = m - &kappa * &s.w;
            sigma += &r * r.transpose() + v;
        }
        sigma /= ds.n_subjects() as f64;
        p.beta = DMatrix::from_row_slice(1, px, beta.as_slice());
        p.sigma2 = DVector::from_element(1, rss / n_obs);
        p.kappa = kappa;
        p.sigma = (&sigma + sigma.transpose()) * 0.5;
    }
    p
}

#[test]
fn single_expert_fit_matches_exact_lmm_em() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = random_params(&mut rng, Dims { p: 3, q: 2, d: 2 }, 1);
    let ds = model_dataset(&mut rng, &truth, 80, 3, 7);
    let cfg = FitConfig {
        em_rel_tol: 1e-14,
        max_em_iters: 3000,
        n_starts: 1,
        ..FitConfig::with_k(1)
    };
    let fitted = em::fit(&ds, &cfg).unwrap();
    let oracle = lmm_em_oracle(&ds, &truth, 3000);
    let p = &fitted.params;
    // The x intercept and the first κ column both shift the mean; only their sum is identified.
    let intercept = |m: &ModelParams| m.beta[(0, 0)] + m.kappa[(0, 0)];
    assert!((intercept(p) - intercept(&oracle)).abs() < 1e-6);
    for c in 1..3 {
        assert!((p.beta[(0, c)] - oracle.beta[(0, c)]).abs() < 1e-6, "{} vs {}", p.beta, oracle.beta);
    }
    assert!((p.sigma2[0] - oracle.sigma2[0]).abs() < 1e-6);
    for (r, c) in [(0, 1), (1, 0), (1, 1)] {
        assert!((p.kappa[(r, c)] - oracle.kappa[(r, c)]).abs() < 1e-6);
    }
    assert!((&p.sigma - &oracle.sigma).amax() < 1e-6);
    let exact = gaussian_marginal_loglik(&ds, p);
    assert!((fitted.loglik() - exact).abs() < 1e-8 * exact.abs());
}

#[test]
fn single_expert_estimates_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let truth = random_params(&mut rng, Dims { p: 3, q: 1, d: 2 }, 1);
    let ds = model_dataset(&mut rng, &truth, 300, 4, 6);
    let fitted = em::fit(&ds, &FitConfig { n_starts: 2, ..FitConfig::with_k(1) }).unwrap();
    let se = inference::sandwich(&fitted, &ds).unwrap();
    for c in 1..3 {
        let z = (fitted.params.beta[(0, c)] - truth.beta[(0, c)]) / se.experts[0].se[c];
        assert!(z.abs() < 3.0, "coordinate {c}: z = {z}");
    }
}

#[test]
fn sandwich_matches_ols_standard_errors_without_random_effects() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let beta = [1.0, -2.0, 0.5];
    let subjects: Vec<Subject> = (0..500)
        .map(|i| {
            let x = vec![1.0, normal(&mut rng), normal(&mut rng)];
            let y = beta.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>() + normal(&mut rng);
            Subject::new(format!("{i}"), vec![1.0], vec![Observation::new(y, x, vec![1.0])])
        })
        .collect();
    let ds = Dataset::new(subjects).unwrap();
    let cfg = FitConfig {
        random_effects: RandomEffects::Off,
        n_starts: 1,
        ..FitConfig::with_k(1)
    };
    let fitted = em::fit(&ds, &cfg).unwrap();
    let report = inference::sandwich(&fitted, &ds).unwrap();

    let n = ds.n_subjects();
    let x = DMatrix::from_fn(n, 3, |r, c| ds.subjects()[r].obs[0].x[c]);
    let y = DVector::from_fn(n, |r, _| ds.subjects()[r].obs[0].y);
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let b = &xtx_inv * x.transpose() * &y;
    let resid = &y - &x * &b;
    let s2 = resid.norm_squared() / (n - 3) as f64;
    for c in 0..3 {
        assert!((fitted.params.beta[(0, c)] - b[c]).abs() < 1e-8);
        let ols = (s2 * xtx_inv[(c, c)]).sqrt();
        let ratio = report.experts[0].se[c] / ols;
        assert!((ratio - 1.0).abs() < 0.1, "coordinate {c}: sandwich/OLS = {ratio}");
    }
}

#[test]
fn no_random_effects_loglik_is_the_plain_mixture_loglik() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut truth = random_params(&mut rng, Dims { p: 2, q: 1, d: 1 }, 2);
    truth.sigma = DMatrix::from_element(1, 1, 1e-8);
    truth.kappa = DMatrix::zeros(1, 1);
    let ds = model_dataset(&mut rng, &truth, 200, 1, 3);
    let cfg = FitConfig {
        random_effects: RandomEffects::Off,
        n_starts: 2,
        ..FitConfig::with_k(2)
    };
    let fitted = em::fit(&ds, &cfg).unwrap();
    let zero = DVector::zeros(1);
    let direct: f64 = ds
        .subjects()
        .iter()
        .flat_map(|s| s.obs.iter())
        .map(|o| model::conditional_mixture_logpdf(o, &zero, &fitted.params))
        .sum();
    assert!((fitted.loglik() - direct).abs() < 1e-6 * direct.abs(), "{} vs {direct}", fitted.loglik());
    assert!(fitted.posteriors.iter().all(|p| p.u_hat.amax() == 0.0));
}

#[test]
fn multi_start_keeps_the_best_start_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut truth = random_params(&mut rng, Dims { p: 2, q: 1, d: 2 }, 2);
    truth.beta[(1, 0)] += 5.0;
    let ds = model_dataset(&mut rng, &truth, 60, 3, 5);
    let cfg = FitConfig {
        n_starts: 4,
        seed: 3,
        ..FitConfig::with_k(2)
    };
    let a = em::fit(&ds, &cfg).unwrap();
    let b = em::fit(&ds, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loglik_trace, b.loglik_trace);
    let best = a.starts.iter().filter_map(|s| s.final_loglik).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.loglik(), best);
    assert_eq!(a.starts[a.best_start].final_loglik, Some(best));
}

#[test]
fn permuted_initialization_gives_permuted_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut truth = random_params(&mut rng, Dims { p: 2, q: 1, d: 2 }, 3);
    for e in 0..3 {
        truth.beta[(e, 0)] += 4.0 * e as f64;
    }
    let ds = model_dataset(&mut rng, &truth, 80, 3, 6);
    let cfg = FitConfig::with_k(3);
    let init = em::initial_params(&ds, &cfg, &mut em::start_rng(1, 0)).unwrap();
    for perm in [[1, 2, 0], [2, 0, 1], [0, 2, 1]] {
        let a = em::fit_from(&ds, init.clone(), &cfg).unwrap();
        let b = em::fit_from(&ds, init.permuted(&perm), &cfg).unwrap();
        assert!((a.loglik() - b.loglik()).abs() <= 1e-8 * (1.0 + a.loglik().abs()));
        let expected = a.params.permuted(&perm);
        assert!((&expected.beta - &b.params.beta).amax() < 1e-6);
        assert!((&expected.sigma2 - &b.params.sigma2).amax() < 1e-6);
    }
}

#[test]
fn select_k_finds_two_separated_experts() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut truth = random_params(&mut rng, Dims { p: 2, q: 1, d: 2 }, 2);
    truth.beta[(1, 0)] = truth.beta[(0, 0)] + 10.0;
    truth.alpha[(0, 1)] = 15.0;
    truth.sigma = DMatrix::from_element(1, 1, 0.2);
    truth.sigma2 = DVector::from_element(2, 0.5);
    let ds = model_dataset(&mut rng, &truth, 100, 4, 6);
    let cfg = FitConfig { n_starts: 2, ..FitConfig::default() };
    let table = select::select_k(&ds, &[1, 2, 3], 5, &cfg, 1).unwrap();
    assert_eq!(table.selected, 2, "{:?}", table.scores);
}

#[test]
fn select_k_prefers_one_expert_for_homogeneous_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let truth = random_params(&mut rng, Dims { p: 2, q: 1, d: 2 }, 1);
    let ds = model_dataset(&mut rng, &truth, 100, 4, 6);
    let cfg = FitConfig { n_starts: 2, ..FitConfig::default() };
    let table = select::select_k(&ds, &[1, 2, 3], 5, &cfg, 2).unwrap();
    assert_eq!(table.selected, 1, "{:?}", table.scores);
    let mut seen = vec![0; 5];
    for &f in &table.assignment {
        seen[f] += 1;
    }
    assert_eq!(seen.iter().sum::<usize>(), ds.n_subjects());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn e_step_rows_normalized_and_m_step_floors_hold(seed in 0u64..10_000, k in 1usize..4, q in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = random_params(&mut rng, Dims { p: 2, q, d: 2 }, k);
        params.sigma2 *= rng.gen_range(0.01..3.0);
        let ds = model_dataset(&mut rng, &params, 12, 1, 5);
        let cfg = FitConfig { sigma2_floor: 0.2, sigma_eig_floor: 0.3, ..FitConfig::with_k(k) };
        let state = em::e_step(&ds, &params, None, &cfg).unwrap();
        prop_assert!(state.gamma.max_row_error() <= 1e-10);
        let (next, _) = em::m_step(&ds, &params, &state, &cfg).unwrap();
        prop_assert!(next.sigma2.iter().all(|&v| v >= 0.2));
        prop_assert!(next.sigma.symmetric_eigenvalues().min() >= 0.3 * (1.0 - 1e-12));
        prop_assert!(next.alpha.row(k - 1).iter().all(|&v| v == 0.0));
    }
}
