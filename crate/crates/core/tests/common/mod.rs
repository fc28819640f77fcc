//! Independent oracles and random-instance builders shared by the test suites.
//!
//! Nothing here calls the Laplace or EM machinery under test: densities are
//! summed directly, derivatives come from finite differences and integrals
//! from brute-force quadrature.
#![allow(dead_code)]

use memoe::model::{Dataset, Dims, GatingFeatures, ModelParams, Observation, Subject};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random parameters with a well-conditioned Σ and the reference gating row at zero.
pub fn random_params(rng: &mut impl Rng, dims: Dims, k: usize) -> ModelParams {
    let g = dims.p;
    let mut alpha = DMatrix::from_fn(k, g, |_, _| rng.gen_range(-1.5..1.5));
    for c in 0..g {
        alpha[(k - 1, c)] = 0.0;
    }
    let beta = DMatrix::from_fn(k, dims.p, |r, _| rng.gen_range(-2.0..2.0) + 3.0 * r as f64);
    let sigma2 = DVector::from_fn(k, |_, _| rng.gen_range(0.3..1.5));
    let kappa = DMatrix::from_fn(dims.q, dims.d, |_, _| rng.gen_range(-1.0..1.0));
    let a = DMatrix::from_fn(dims.q, dims.q, |_, _| rng.gen_range(-0.5..0.5));
    let sigma = &a * a.transpose() + DMatrix::identity(dims.q, dims.q) * 0.5;
    ModelParams {
        alpha,
        beta,
        sigma2,
        kappa,
        sigma,
        gating: GatingFeatures::X,
    }
}

fn random_observation(rng: &mut impl Rng, p: usize, q: usize, y: f64) -> Observation {
    let mut x: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
    x[0] = 1.0;
    let mut z: Vec<f64> = (0..q).map(|_| normal(rng)).collect();
    z[0] = 1.0;
    Observation::new(y, x, z)
}

/// Draw responses for `subject` from the model itself.
pub fn simulate_responses(rng: &mut impl Rng, subject: &mut Subject, params: &ModelParams) {
    let q = params.sigma.nrows();
    let chol = params.sigma.clone().cholesky().unwrap().unpack();
    let e = DVector::from_fn(q, |_, _| normal(rng));
    let u = &params.kappa * &subject.w + chol * e;
    for o in &mut subject.obs {
        let pi = memoe::model::gate_probs(&o.x, &params.alpha);
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = pi.len() - 1;
        for (idx, p) in pi.iter().enumerate() {
            acc += p;
            if draw < acc {
                k = idx;
                break;
            }
        }
        let mean = params.beta.row(k).transpose().dot(&o.x) + o.z.dot(&u);
        o.y = mean + params.sigma2[k].sqrt() * normal(rng);
    }
}

/// One subject plus parameters; dims `(p, q, d = 2)` and `n_i` uniform in `[n_min, n_max]`.
pub fn random_instance(
    rng: &mut impl Rng,
    p: usize,
    q: usize,
    k: usize,
    n_min: usize,
    n_max: usize,
) -> (Subject, ModelParams) {
    let dims = Dims { p, q, d: 2 };
    let params = random_params(rng, dims, k);
    let n = rng.gen_range(n_min..=n_max);
    let obs = (0..n).map(|_| random_observation(rng, p, q, 0.0)).collect();
    let mut subject = Subject::new("s", vec![1.0, normal(rng)], obs);
    simulate_responses(rng, &mut subject, &params);
    (subject, params)
}

/// Dataset drawn from a random `k`-expert model; `d = 2`.
pub fn random_lmm_dataset(
    rng: &mut impl Rng,
    n_subjects: usize,
    n_per: usize,
    p: usize,
    q: usize,
    k: usize,
) -> Dataset {
    let dims = Dims { p, q, d: 2 };
    let params = random_params(rng, dims, k);
    let subjects = (0..n_subjects)
        .map(|i| {
            let obs = (0..n_per).map(|_| random_observation(rng, p, q, 0.0)).collect();
            let mut s = Subject::new(format!("s{i}"), vec![1.0, normal(rng)], obs);
            simulate_responses(rng, &mut s, &params);
            s
        })
        .collect();
    Dataset::new(subjects).unwrap()
}

/// Dataset simulated from `params` itself, with `n_i` uniform in `[n_min, n_max]`.
pub fn model_dataset(rng: &mut impl Rng, params: &ModelParams, n_subjects: usize, n_min: usize, n_max: usize) -> Dataset {
    let dims = params.dims();
    let subjects = (0..n_subjects)
        .map(|i| {
            let n = rng.gen_range(n_min..=n_max);
            let obs = (0..n).map(|_| random_observation(rng, dims.p, dims.q, 0.0)).collect();
            let mut w: Vec<f64> = (0..dims.d).map(|_| normal(rng)).collect();
            w[0] = 1.0;
            let mut s = Subject::new(format!("s{i}"), w, obs);
            simulate_responses(rng, &mut s, params);
            s
        })
        .collect();
    Dataset::new(subjects).unwrap()
}

/// `h_i(u)` summed term by term without log-sum-exp.
pub fn direct_h_value(subject: &Subject, u: &DVector<f64>, params: &ModelParams) -> f64 {
    let q = u.len() as f64;
    let sigma_inv = params.sigma.clone().try_inverse().unwrap();
    let r = u - &params.kappa * &subject.w;
    let prior = -0.5 * (q * (2.0 * std::f64::consts::PI).ln() + params.sigma.determinant().ln())
        - 0.5 * r.dot(&(&sigma_inv * &r));
    let mut total = prior;
    for o in &subject.obs {
        let eta: Vec<f64> = (0..params.beta.nrows())
            .map(|k| params.alpha.row(k).transpose().dot(&o.x).exp())
            .collect();
        let norm: f64 = eta.iter().sum();
        let mut dens = 0.0;
        for (k, e) in eta.iter().enumerate() {
            let mean = params.beta.row(k).transpose().dot(&o.x) + o.z.dot(u);
            let v = params.sigma2[k];
            dens += e / norm * (-(o.y - mean).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        }
        total += dens.ln();
    }
    total
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, u: &DVector<f64>, step: f64) -> DVector<f64> {
    DVector::from_fn(u.len(), |a, _| {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[a] += step;
        dn[a] -= step;
        (f(&up) - f(&dn)) / (2.0 * step)
    })
}

/// Negative central finite-difference Jacobian of a gradient map, symmetrized.
pub fn fd_neg_jacobian(g: impl Fn(&DVector<f64>) -> DVector<f64>, u: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let n = u.len();
    let mut jac = DMatrix::zeros(n, n);
    for a in 0..n {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[a] += step;
        dn[a] -= step;
        let col = (g(&up) - g(&dn)) / (2.0 * step);
        jac.set_column(a, &col);
    }
    -(&jac + jac.transpose()) * 0.5
}

/// `û = (Σ⁻¹ + Σ_j z zᵀ/σ²)⁻¹ (Σ⁻¹ κ w + Σ_j z (y − x·β)/σ²)` for a single expert.
pub fn closed_form_mode(subject: &Subject, params: &ModelParams) -> DVector<f64> {
    let s2 = params.sigma2[0];
    let sigma_inv = params.sigma.clone().try_inverse().unwrap();
    let mut lhs = sigma_inv.clone();
    let mut rhs = &sigma_inv * (&params.kappa * &subject.w);
    for o in &subject.obs {
        lhs += &o.z * o.z.transpose() / s2;
        rhs += &o.z * ((o.y - params.beta.row(0).transpose().dot(&o.x)) / s2);
    }
    lhs.lu().solve(&rhs).unwrap()
}

/// Whether the exact negative Hessian is positive definite at 50 points between `a` and `b`.
pub fn concave_on_segment(subject: &Subject, params: &ModelParams, a: &DVector<f64>, b: &DVector<f64>) -> bool {
    (0..=50).all(|i| {
        let t = i as f64 / 50.0;
        let u = a * (1.0 - t) + b * t;
        let h = fd_neg_jacobian(
            |v| fd_gradient(|w| direct_h_value(subject, w, params), v, 1e-4),
            &u,
            1e-3,
        );
        h.symmetric_eigenvalues().min() > 1e-6
    })
}

/// Exact single-expert marginal: `Σ_i log N_{n_i}(y_i; X_i β + Z_i κ w_i, Z_i Σ Z_iᵀ + σ² I)`.
pub fn gaussian_marginal_loglik(ds: &Dataset, params: &ModelParams) -> f64 {
    let s2 = params.sigma2[0];
    let mut total = 0.0;
    for s in ds.subjects() {
        let n = s.obs.len();
        let mean_u = &params.kappa * &s.w;
        let mut mean = DVector::zeros(n);
        let mut z = DMatrix::zeros(n, params.sigma.nrows());
        let mut y = DVector::zeros(n);
        for (j, o) in s.obs.iter().enumerate() {
            mean[j] = params.beta.row(0).transpose().dot(&o.x) + o.z.dot(&mean_u);
            z.set_row(j, &o.z.transpose());
            y[j] = o.y;
        }
        let cov = &z * &params.sigma * z.transpose() + DMatrix::identity(n, n) * s2;
        let r = y - mean;
        let inv = cov.clone().try_inverse().unwrap();
        total += -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + r.dot(&(inv * &r)));
    }
    total
}

/// Brute-force trapezoid integration of the `q = 1` marginal likelihood.
///
/// The integrand's peak is located by a coarse scan, its curvature by finite
/// differences, and `nodes` trapezoid points cover ±12 posterior sd.
pub fn quadrature_loglik_q1(ds: &Dataset, params: &ModelParams, nodes: usize) -> f64 {
    assert_eq!(params.sigma.nrows(), 1);
    let mut total = 0.0;
    for s in ds.subjects() {
        let h = |u: f64| direct_h_value(s, &DVector::from_element(1, u), params);
        let centre = (&params.kappa * &s.w)[0];
        let prior_sd = params.sigma[(0, 0)].sqrt();
        let (mut best_u, mut best_h) = (centre, h(centre));
        for i in 0..=4000 {
            let u = centre - 20.0 * prior_sd + 40.0 * prior_sd * i as f64 / 4000.0;
            let v = h(u);
            if v > best_h {
                best_h = v;
                best_u = u;
            }
        }
        let eps = 1e-4;
        let curv = -(h(best_u + eps) - 2.0 * best_h + h(best_u - eps)) / (eps * eps);
        let sd = 1.0 / curv.max(1e-8).sqrt();
        let (lo, hi) = (best_u - 12.0 * sd, best_u + 12.0 * sd);
        let step = (hi - lo) / (nodes - 1) as f64;
        let mut acc = 0.0;
        for i in 0..nodes {
            let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
            acc += w * (h(lo + step * i as f64) - best_h).exp();
        }
        total += best_h + (acc * step).ln();
    }
    total
}
