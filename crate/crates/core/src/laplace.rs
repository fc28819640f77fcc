//! Per-subject inner problem of the Laplace approximation.
//!
//! For subject `i` the log-integrand is
//!
//! ```text
//! h_i(u) = log φ_q(u; κ w_i, Σ) + Σ_j log Σ_k π_k(v_ij) φ(y_ij; x_ij·β_k + z_ij·u, σ_k²)
//! ```
//!
//! The mode `û_i` is found by damped Newton using the always positive-definite
//! curvature `Σ⁻¹ + Σ_j Σ_k γ̃_ijk z z^T / σ_k²` as the metric, and the same
//! matrix at the mode enters `ℓ_LA`.

use nalgebra::{DMatrix, DVector};

use crate::error::{MemoeError, Result};
use crate::linalg::{self, SPD_EIG_FLOOR};
use crate::model::{self, Dataset, ModelParams, Subject, LN_2PI};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeConfig {
    /// Convergence threshold on `‖∇h‖∞`.
    pub tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 100,
            max_halvings: 30,
        }
    }
}

/// Random-effect posterior summary for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPosterior {
    pub u_hat: DVector<f64>,
    /// Curvature (simplified negative Hessian) at the mode.
    pub h: DMatrix<f64>,
    pub h_inv: DMatrix<f64>,
    pub log_det_h: f64,
    pub h_at_mode: f64,
    pub newton_iters: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Curvature factorization needed an eigenvalue floor.
    pub floored: bool,
}

impl SubjectPosterior {
    /// This subject's contribution to `ℓ_LA`.
    pub fn laplace_term(&self) -> f64 {
        self.h_at_mode + 0.5 * self.u_hat.len() as f64 * LN_2PI - 0.5 * self.log_det_h
    }
}

/// Factored random-effect prior `N(κ w, Σ)`, shared by all subjects.
#[derive(Debug, Clone)]
pub struct RandomEffectPrior {
    pub sigma_inv: DMatrix<f64>,
    pub log_det: f64,
}

impl RandomEffectPrior {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let chol = params
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| MemoeError::Decomposition("random-effect covariance is not positive definite".into()))?;
        let l = chol.l_dirty();
        let log_det = 2.0 * (0..params.sigma.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            sigma_inv: chol.inverse(),
            log_det,
        })
    }
}

/// Everything about one subject that does not depend on `u`.
pub(crate) struct SubjectTerms<'a> {
    subject: &'a Subject,
    k: usize,
    /// `log π_k(v_ij)`, row-major `n_i x K`.
    log_pi: Vec<f64>,
    /// `x_ij · β_k`, row-major `n_i x K`.
    xb: Vec<f64>,
    sigma2: Vec<f64>,
    prior_mean: DVector<f64>,
    prior: &'a RandomEffectPrior,
}

/// Quantities evaluated at one value of `u`.
pub(crate) struct Eval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub fisher: DMatrix<f64>,
}

impl<'a> SubjectTerms<'a> {
    pub fn new(subject: &'a Subject, params: &ModelParams, prior: &'a RandomEffectPrior) -> Self {
        let k = params.n_experts();
        let n = subject.obs.len();
        let mut log_pi = vec![0.0; n * k];
        let mut xb = vec![0.0; n * k];
        for (j, o) in subject.obs.iter().enumerate() {
            model::log_gate_probs_into(&params.gating_input(o), &params.alpha, &mut log_pi[j * k..(j + 1) * k]);
            for kk in 0..k {
                xb[j * k + kk] = linalg::row_dot(&params.beta, kk, &o.x);
            }
        }
        Self {
            subject,
            k,
            log_pi,
            xb,
            sigma2: params.sigma2.iter().copied().collect(),
            prior_mean: &params.kappa * &subject.w,
            prior,
        }
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    fn prior_logpdf(&self, u: &DVector<f64>) -> f64 {
        let q = u.len();
        let s = &self.prior.sigma_inv;
        let mut quad = 0.0;
        for b in 0..q {
            let rb = u[b] - self.prior_mean[b];
            for a in 0..q {
                quad += (u[a] - self.prior_mean[a]) * s[(a, b)] * rb;
            }
        }
        -0.5 * (q as f64 * LN_2PI + self.prior.log_det + quad)
    }

    /// Fill `buf` with `log π_k + log φ_k` for observation `j`; return the log-sum-exp.
    #[inline]
    fn joint_terms(&self, j: usize, zu: f64, buf: &mut [f64]) -> f64 {
        let y = self.subject.obs[j].y;
        let base = j * self.k;
        for k in 0..self.k {
            buf[k] = self.log_pi[base + k] + model::normal_logpdf(y, self.xb[base + k] + zu, self.sigma2[k]);
        }
        linalg::log_sum_exp(buf)
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        let mut buf = vec![0.0; self.k];
        let mut total = self.prior_logpdf(u);
        for (j, o) in self.subject.obs.iter().enumerate() {
            total += self.joint_terms(j, o.z.dot(u), &mut buf);
        }
        total
    }

    /// Conditional responsibilities `γ̃_ijk(u)`, row-major `n_i x K`.
    pub fn responsibilities(&self, u: &DVector<f64>) -> Vec<f64> {
        let mut buf = vec![0.0; self.k];
        let mut out = Vec::with_capacity(self.subject.obs.len() * self.k);
        for (j, o) in self.subject.obs.iter().enumerate() {
            let lse = self.joint_terms(j, o.z.dot(u), &mut buf);
            out.extend(buf.iter().map(|t| (t - lse).exp()));
        }
        out
    }

    /// Value, gradient and simplified curvature in one pass.
    pub fn eval(&self, u: &DVector<f64>) -> Eval {
        let q = u.len();
        let mut buf = vec![0.0; self.k];
        let mut value = self.prior_logpdf(u);
        let mut grad = DVector::zeros(q);
        for b in 0..q {
            let rb = u[b] - self.prior_mean[b];
            for a in 0..q {
                grad[a] -= self.prior.sigma_inv[(a, b)] * rb;
            }
        }
        let mut fisher = self.prior.sigma_inv.clone();
        for (j, o) in self.subject.obs.iter().enumerate() {
            let zu = o.z.dot(u);
            let lse = self.joint_terms(j, zu, &mut buf);
            value += lse;
            let mut score = 0.0;
            let mut curv = 0.0;
            for k in 0..self.k {
                let g = (buf[k] - lse).exp();
                let e = o.y - self.xb[j * self.k + k] - zu;
                score += g * e / self.sigma2[k];
                curv += g / self.sigma2[k];
            }
            grad.axpy(score, &o.z, 1.0);
            for a in 0..q {
                for b in 0..q {
                    fisher[(a, b)] += curv * o.z[a] * o.z[b];
                }
            }
        }
        Eval { value, grad, fisher }
    }

    /// Full negative Hessian of `h_i`, including the score-variance term.
    pub fn hess_exact(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let q = u.len();
        let mut buf = vec![0.0; self.k];
        let mut hess = self.prior.sigma_inv.clone();
        for (j, o) in self.subject.obs.iter().enumerate() {
            let zu = o.z.dot(u);
            let lse = self.joint_terms(j, zu, &mut buf);
            let mut mean_score = 0.0;
            let mut second = 0.0;
            for k in 0..self.k {
                let g = (buf[k] - lse).exp();
                let s2 = self.sigma2[k];
                let e = o.y - self.xb[j * self.k + k] - zu;
                mean_score += g * e / s2;
                second += g * (e * e / (s2 * s2) - 1.0 / s2);
            }
            let coef = mean_score * mean_score - second;
            for a in 0..q {
                for b in 0..q {
                    hess[(a, b)] += coef * o.z[a] * o.z[b];
                }
            }
        }
        hess
    }

    fn posterior(&self, u: DVector<f64>, eval: Eval, newton_iters: usize, tol: f64) -> SubjectPosterior {
        let factor = linalg::spd_factor(&eval.fisher, SPD_EIG_FLOOR);
        let grad_norm = eval.grad.amax();
        SubjectPosterior {
            u_hat: u,
            h: eval.fisher,
            h_inv: factor.inverse,
            log_det_h: factor.log_det,
            h_at_mode: eval.value,
            newton_iters,
            grad_norm,
            converged: grad_norm < tol,
            floored: factor.floored,
        }
    }

    /// Damped Newton ascent on `h_i` from `start`.
    pub fn find_mode(&self, start: DVector<f64>, cfg: &ModeConfig) -> SubjectPosterior {
        let mut u = start;
        let mut cur = self.eval(&u);
        let mut iters = 0;
        while iters < cfg.max_iters && cur.grad.amax() >= cfg.tol && cur.value.is_finite() {
            let step = match cur.fisher.clone().cholesky() {
                Some(chol) => chol.solve(&cur.grad),
                None => linalg::solve_spd_ridge(&cur.fisher, &cur.grad).0,
            };
            let slack = 4.0 * f64::EPSILON * cur.value.abs().max(1.0);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let cand = &u + &step * t;
                let val = self.value(&cand);
                if val.is_finite() && val >= cur.value - slack {
                    accepted = Some(cand);
                    break;
                }
                t *= 0.5;
            }
            let Some(next) = accepted else { break };
            iters += 1;
            let moved = (&next - &u).amax();
            u = next;
            cur = self.eval(&u);
            if moved == 0.0 {
                break;
            }
        }
        self.posterior(u, cur, iters, cfg.tol)
    }

    /// Posterior summary at a fixed `u` without optimizing.
    pub fn posterior_at(&self, u: DVector<f64>, cfg: &ModeConfig) -> SubjectPosterior {
        let eval = self.eval(&u);
        self.posterior(u, eval, 0, cfg.tol)
    }
}

pub(crate) fn check_subject(subject: &Subject, u: &DVector<f64>, params: &ModelParams) -> Result<()> {
    let dims = params.dims();
    if u.len() != dims.q || subject.w.len() != dims.d {
        return Err(MemoeError::Dimension("subject does not match parameter dimensions".into()));
    }
    if subject.obs.iter().any(|o| o.x.len() != dims.p || o.z.len() != dims.q) {
        return Err(MemoeError::Dimension("observation does not match parameter dimensions".into()));
    }
    Ok(())
}

/// `h_i(u; Ψ)`.
pub fn h_value(subject: &Subject, u: &DVector<f64>, params: &ModelParams) -> Result<f64> {
    check_subject(subject, u, params)?;
    let prior = RandomEffectPrior::new(params)?;
    Ok(SubjectTerms::new(subject, params, &prior).value(u))
}

/// `∇_u h_i(u; Ψ)`.
pub fn h_grad(subject: &Subject, u: &DVector<f64>, params: &ModelParams) -> Result<DVector<f64>> {
    check_subject(subject, u, params)?;
    let prior = RandomEffectPrior::new(params)?;
    Ok(SubjectTerms::new(subject, params, &prior).eval(u).grad)
}

/// Exact negative Hessian `-∇²_u h_i(u; Ψ)`; symmetric, not necessarily positive definite.
pub fn h_hess_exact(subject: &Subject, u: &DVector<f64>, params: &ModelParams) -> Result<DMatrix<f64>> {
    check_subject(subject, u, params)?;
    let prior = RandomEffectPrior::new(params)?;
    Ok(SubjectTerms::new(subject, params, &prior).hess_exact(u))
}

/// Simplified negative Hessian `Σ⁻¹ + Σ_j Σ_k γ̃_ijk z z^T / σ_k²`; always positive definite.
pub fn h_hess_fisher(subject: &Subject, u: &DVector<f64>, params: &ModelParams) -> Result<DMatrix<f64>> {
    check_subject(subject, u, params)?;
    let prior = RandomEffectPrior::new(params)?;
    Ok(SubjectTerms::new(subject, params, &prior).eval(u).fisher)
}

/// Random-effect mode for one subject, starting from `start` or `κ w_i`.
pub fn find_mode(
    subject: &Subject,
    params: &ModelParams,
    cfg: &ModeConfig,
    start: Option<&DVector<f64>>,
) -> Result<SubjectPosterior> {
    let q = params.dims().q;
    let u0 = start.cloned().unwrap_or_else(|| DVector::zeros(q));
    check_subject(subject, &u0, params)?;
    let prior = RandomEffectPrior::new(params)?;
    let terms = SubjectTerms::new(subject, params, &prior);
    let u0 = start.cloned().unwrap_or_else(|| terms.prior_mean().clone());
    Ok(terms.find_mode(u0, cfg))
}

/// Laplace-approximated log-likelihood together with every subject's posterior.
pub fn laplace_loglik(
    dataset: &Dataset,
    params: &ModelParams,
    cfg: &ModeConfig,
) -> Result<(f64, Vec<SubjectPosterior>)> {
    laplace_loglik_warm(dataset, params, cfg, None)
}

/// As [`laplace_loglik`], warm-starting each mode search from `warm`.
pub fn laplace_loglik_warm(
    dataset: &Dataset,
    params: &ModelParams,
    cfg: &ModeConfig,
    warm: Option<&[SubjectPosterior]>,
) -> Result<(f64, Vec<SubjectPosterior>)> {
    params.validate(dataset.dims())?;
    if let Some(w) = warm {
        if w.len() != dataset.n_subjects() {
            return Err(MemoeError::Dimension("warm-start length differs from subject count".into()));
        }
    }
    let prior = RandomEffectPrior::new(params)?;
    let posteriors = par::map_range(dataset.n_subjects(), |i| {
        let terms = SubjectTerms::new(&dataset.subjects()[i], params, &prior);
        let start = match warm {
            Some(w) => w[i].u_hat.clone(),
            None => terms.prior_mean().clone(),
        };
        terms.find_mode(start, cfg)
    });
    let terms: Vec<f64> = posteriors.iter().map(SubjectPosterior::laplace_term).collect();
    Ok((linalg::pairwise_sum(&terms), posteriors))
}
