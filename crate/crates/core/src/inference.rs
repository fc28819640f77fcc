//! Robust sandwich variance for the expert coefficients.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{FittedModel, RandomEffects};
use crate::error::{MemoeError, Result};
use crate::laplace::{ModeConfig, RandomEffectPrior, SubjectPosterior, SubjectTerms};
use crate::linalg;
use crate::model::{Dataset, ModelParams, Subject};
use crate::par;

/// Two-sided 95% normal quantile used for Wald intervals.
pub const WALD_Z95: f64 = 1.959_963_984_540_054;
/// Relative asymmetry of the finite-difference `Ĵ` that aborts the estimate.
pub const J_ASYMMETRY_ABORT: f64 = 1e-2;

/// `Σ_j γ_jk e_jk(û) x_j / σ_k²` for one subject, with `γ` evaluated at `posterior.u_hat`.
pub fn score_beta(subject: &Subject, posterior: &SubjectPosterior, params: &ModelParams, k: usize) -> Result<DVector<f64>> {
    crate::laplace::check_subject(subject, &posterior.u_hat, params)?;
    if k >= params.n_experts() {
        return Err(MemoeError::Dimension(format!("expert {k} out of range")));
    }
    let prior = RandomEffectPrior::new(params)?;
    let terms = SubjectTerms::new(subject, params, &prior);
    Ok(score_from_terms(&terms, subject, &posterior.u_hat, params, k))
}

fn score_from_terms(terms: &SubjectTerms, subject: &Subject, u: &DVector<f64>, params: &ModelParams, k: usize) -> DVector<f64> {
    let gamma = terms.responsibilities(u);
    let kk = params.n_experts();
    let beta_k = params.beta.row(k).transpose();
    let mut s = DVector::zeros(params.beta.ncols());
    for (j, o) in subject.obs.iter().enumerate() {
        let e = o.y - beta_k.dot(&o.x) - o.z.dot(u);
        s.axpy(gamma[j * kk + k] * e / params.sigma2[k], &o.x, 1.0);
    }
    s
}

/// Re-solve every subject's mode at `params` (warm-started) and return the scores for expert `k`.
fn scores_at(
    dataset: &Dataset,
    params: &ModelParams,
    warm: &[SubjectPosterior],
    k: usize,
    random_effects: RandomEffects,
    cfg: &ModeConfig,
) -> Result<Vec<DVector<f64>>> {
    let prior = RandomEffectPrior::new(params)?;
    Ok(par::map_range(dataset.n_subjects(), |i| {
        let s = &dataset.subjects()[i];
        let terms = SubjectTerms::new(s, params, &prior);
        let u = match random_effects {
            RandomEffects::Off => DVector::zeros(warm[i].u_hat.len()),
            _ => terms.find_mode(warm[i].u_hat.clone(), cfg).u_hat,
        };
        score_from_terms(&terms, s, &u, params, k)
    }))
}

fn sum_vectors(vs: &[DVector<f64>], dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |c, _| {
        let col: Vec<f64> = vs.iter().map(|v| v[c]).collect();
        linalg::pairwise_sum(&col)
    })
}

/// Sandwich pieces for one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSandwich {
    pub j_hat: DMatrix<f64>,
    pub k_hat: DMatrix<f64>,
    /// `Ĵ⁻¹ K̂ Ĵ⁻¹`.
    pub v_hat: DMatrix<f64>,
    /// `sqrt(diag(V̂) / N)`.
    pub se: DVector<f64>,
    pub beta: DVector<f64>,
    /// Relative asymmetry of `Ĵ` before symmetrization.
    pub j_asymmetry: f64,
    pub pseudo_inverse: bool,
}

impl ExpertSandwich {
    /// 95% Wald interval `β̂ ± 1.96 se` for each coordinate.
    pub fn wald_95(&self) -> Vec<(f64, f64)> {
        self.beta
            .iter()
            .zip(self.se.iter())
            .map(|(b, s)| (b - WALD_Z95 * s, b + WALD_Z95 * s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub experts: Vec<ExpertSandwich>,
    pub n_subjects: usize,
}

/// Empirical sandwich `V̂ = Ĵ⁻¹ K̂ Ĵ⁻¹` for every expert's `β_k`.
///
/// `K̂` averages outer products of per-subject scores. `Ĵ` is minus the average
/// derivative of the scores, taken by central differences in `β_k` with step
/// `1e-5 (1 + |β_kc|)`; each perturbed evaluation re-solves the modes.
pub fn sandwich(fitted: &FittedModel, dataset: &Dataset) -> Result<SandwichReport> {
    let params = &fitted.params;
    params.validate(dataset.dims())?;
    if fitted.posteriors.len() != dataset.n_subjects() {
        return Err(MemoeError::Dimension("fitted posteriors do not match the dataset".into()));
    }
    let n = dataset.n_subjects() as f64;
    let p = dataset.dims().p;
    let cfg = fitted.config.mode_config();
    let re = fitted.random_effects;
    let mut experts = Vec::with_capacity(params.n_experts());
    for k in 0..params.n_experts() {
        let scores = scores_at(dataset, params, &fitted.posteriors, k, re, &cfg)?;
        let mut k_hat = DMatrix::zeros(p, p);
        for s in &scores {
            k_hat.ger(1.0 / n, s, s, 1.0);
        }
        let mut jac = DMatrix::zeros(p, p);
        for c in 0..p {
            let step = 1e-5 * (1.0 + params.beta[(k, c)].abs());
            let mut up = params.clone();
            up.beta[(k, c)] += step;
            let mut dn = params.clone();
            dn.beta[(k, c)] -= step;
            let s_up = sum_vectors(&scores_at(dataset, &up, &fitted.posteriors, k, re, &cfg)?, p);
            let s_dn = sum_vectors(&scores_at(dataset, &dn, &fitted.posteriors, k, re, &cfg)?, p);
            jac.set_column(c, &(-(s_up - s_dn) / (2.0 * step * n)));
        }
        let scale = jac.amax().max(f64::MIN_POSITIVE);
        let j_asymmetry = linalg::asymmetry(&jac) / scale;
        if j_asymmetry > J_ASYMMETRY_ABORT {
            return Err(MemoeError::Fit(format!(
                "expert {k}: finite-difference J has relative asymmetry {j_asymmetry:.3e}"
            )));
        }
        if j_asymmetry > 1e-4 {
            warn!("expert {k}: finite-difference J asymmetry {j_asymmetry:.3e}");
        }
        let j_hat = linalg::symmetrize(&jac);
        let (j_inv, pseudo_inverse) = match j_hat.clone().cholesky() {
            Some(ch) => (ch.inverse(), false),
            None => match j_hat.clone().try_inverse() {
                Some(inv) => (inv, false),
                None => {
                    warn!("expert {k}: J is singular; using pseudo-inverse");
                    (linalg::pseudo_inverse(&j_hat), true)
                }
            },
        };
        let v_hat = linalg::symmetrize(&(&j_inv * &k_hat * &j_inv));
        let se = v_hat.diagonal().map(|v| (v.max(0.0) / n).sqrt());
        experts.push(ExpertSandwich {
            j_hat,
            k_hat,
            v_hat,
            se,
            beta: params.beta.row(k).transpose(),
            j_asymmetry,
            pseudo_inverse,
        });
    }
    Ok(SandwichReport {
        experts,
        n_subjects: dataset.n_subjects(),
    })
}
