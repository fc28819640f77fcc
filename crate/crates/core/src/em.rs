//! Laplace-EM fitting.
//!
//! Each iteration computes random-effect modes, curvatures and
//! responsibilities at the current parameters (E-step), then maximizes the
//! minorizing surrogate block by block in the order α, β, σ², κ, Σ (M-step).

use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MemoeError, Result};
use crate::laplace::{ModeConfig, RandomEffectPrior, SubjectPosterior, SubjectTerms};
use crate::linalg;
use crate::model::{self, Dataset, GatingFeatures, ModelParams, LN_2PI};
use crate::par;

/// Expert mass below which an expert is treated as dead and frozen.
pub const DEGENERATE_MASS: f64 = 1e-8;
/// Largest difference between two experts' gating coefficients.
pub const GATING_CLAMP: f64 = 50.0;
/// Relative `ℓ_LA` decrease that aborts a run.
pub const DIP_ABORT: f64 = 1e-4;
/// Relative `ℓ_LA` decrease tolerated silently.
pub const DIP_SLACK: f64 = 1e-8;
/// Final-iterate gradient norm above which a mode counts as failed.
const MODE_FAILURE: f64 = 1e-3;

/// How the random effects enter the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    /// Covariate-dependent mean `κ w` and free covariance.
    #[default]
    Full,
    /// `κ` held at zero.
    ZeroMean,
    /// No random effects: `û ≡ 0`, `κ = 0`, `Σ` clamped to the eigenvalue floor.
    Off,
}

impl RandomEffects {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::ZeroMean => "zero_mean",
            Self::Off => "off",
        }
    }
}

impl FromStr for RandomEffects {
    type Err = MemoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "zero_mean" | "zero-mean" => Ok(Self::ZeroMean),
            "off" | "none" => Ok(Self::Off),
            other => Err(MemoeError::Config(format!("unknown random_effects '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of experts.
    pub k: usize,
    pub max_em_iters: usize,
    pub em_rel_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub sigma2_floor: f64,
    pub sigma_eig_floor: f64,
    pub mode_tol: f64,
    pub mode_max_iters: usize,
    pub gating_newton_iters: usize,
    pub gating: GatingFeatures,
    pub random_effects: RandomEffects,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 2,
            max_em_iters: 500,
            em_rel_tol: 1e-6,
            n_starts: 5,
            seed: 0,
            sigma2_floor: 1e-6,
            sigma_eig_floor: 1e-8,
            mode_tol: 1e-8,
            mode_max_iters: 100,
            gating_newton_iters: 50,
            gating: GatingFeatures::X,
            random_effects: RandomEffects::Full,
        }
    }
}

impl FitConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn mode_config(&self) -> ModeConfig {
        ModeConfig {
            tol: self.mode_tol,
            max_iters: self.mode_max_iters,
            ..ModeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(MemoeError::Config("k must be at least 1".into()));
        }
        if self.n_starts == 0 {
            return Err(MemoeError::Config("n_starts must be at least 1".into()));
        }
        let positive = [
            ("em_rel_tol", self.em_rel_tol),
            ("sigma2_floor", self.sigma2_floor),
            ("sigma_eig_floor", self.sigma_eig_floor),
            ("mode_tol", self.mode_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MemoeError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Responsibilities `γ_ijk`, stored flat in observation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k: usize,
    /// Index of each subject's first observation.
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn from_subjects(k: usize, per_subject: Vec<Vec<f64>>) -> Self {
        let mut offsets = Vec::with_capacity(per_subject.len());
        let mut values = Vec::with_capacity(per_subject.iter().map(Vec::len).sum());
        for s in per_subject {
            offsets.push(values.len() / k);
            values.extend(s);
        }
        Self { k, offsets, values }
    }

    pub fn n_experts(&self) -> usize {
        self.k
    }

    pub fn n_obs(&self) -> usize {
        self.values.len() / self.k
    }

    /// Row for global observation index `n`.
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.k..(n + 1) * self.k]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(self.offsets[i] + j) * self.k + k]
    }

    pub fn subject_offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Largest `|Σ_k γ_ijk − 1|`.
    pub fn max_row_error(&self) -> f64 {
        self.values
            .chunks(self.k)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `Σ_ij γ_ijk` per expert.
    pub fn expert_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.k];
        for r in self.values.chunks(self.k) {
            for (m, g) in mass.iter_mut().zip(r) {
                *m += g;
            }
        }
        mass
    }
}

/// Result of one E-step.
#[derive(Debug, Clone)]
pub struct EmState {
    pub posteriors: Vec<SubjectPosterior>,
    pub gamma: Responsibilities,
    /// `ℓ_LA` at the parameters the E-step was run with.
    pub loglik: f64,
}

/// Modes, curvatures and responsibilities at `params`.
pub fn e_step(
    dataset: &Dataset,
    params: &ModelParams,
    prev: Option<&[SubjectPosterior]>,
    cfg: &FitConfig,
) -> Result<EmState> {
    params.validate(dataset.dims())?;
    if prev.is_some_and(|p| p.len() != dataset.n_subjects()) {
        return Err(MemoeError::Dimension("previous posteriors do not match subjects".into()));
    }
    let prior = RandomEffectPrior::new(params)?;
    let mode_cfg = cfg.mode_config();
    let q = dataset.dims().q;
    let results = par::map_range(dataset.n_subjects(), |i| {
        let terms = SubjectTerms::new(&dataset.subjects()[i], params, &prior);
        let post = match cfg.random_effects {
            RandomEffects::Off => terms.posterior_at(DVector::zeros(q), &mode_cfg),
            _ => {
                let start = prev.map_or_else(|| terms.prior_mean().clone(), |p| p[i].u_hat.clone());
                terms.find_mode(start, &mode_cfg)
            }
        };
        let gamma = terms.responsibilities(&post.u_hat);
        (post, gamma)
    });
    let (posteriors, gammas): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let terms: Vec<f64> = posteriors.iter().map(SubjectPosterior::laplace_term).collect();
    Ok(EmState {
        loglik: linalg::pairwise_sum(&terms),
        gamma: Responsibilities::from_subjects(params.n_experts(), gammas),
        posteriors,
    })
}

/// Surrogate `Q_LA(Ψ | Ψ^(t))` built from the E-step `state` computed at `Ψ^(t)`.
///
/// The curvature inside the trace term is `Σ⁻¹ + Σ_jk γ^(t)_ijk z zᵀ / σ_k²` with the
/// responsibilities held at their iteration-`t` values.
pub fn q_surrogate(dataset: &Dataset, params: &ModelParams, state: &EmState) -> Result<f64> {
    params.validate(dataset.dims())?;
    let prior = RandomEffectPrior::new(params)?;
    let k = params.n_experts();
    let q = dataset.dims().q;
    let per_subject: Vec<f64> = par::map_range(dataset.n_subjects(), |i| {
        let s = &dataset.subjects()[i];
        let post = &state.posteriors[i];
        let offset = state.gamma.subject_offset(i);
        let mut total = model::mvn_logpdf_factored(&post.u_hat, &(&params.kappa * &s.w), &prior.sigma_inv, prior.log_det);
        let mut curvature = prior.sigma_inv.clone();
        for (j, o) in s.obs.iter().enumerate() {
            let log_pi = model::log_gate_probs(&params.gating_input(o), &params.alpha);
            let zu = o.z.dot(&post.u_hat);
            let row = state.gamma.row(offset + j);
            let mut weight = 0.0;
            for kk in 0..k {
                let g = row[kk];
                if g > 0.0 {
                    let mean = linalg::row_dot(&params.beta, kk, &o.x) + zu;
                    total += g * (log_pi[kk] + model::normal_logpdf(o.y, mean, params.sigma2[kk]) - g.ln());
                }
                weight += g / params.sigma2[kk];
            }
            for a in 0..q {
                for b in 0..q {
                    curvature[(a, b)] += weight * o.z[a] * o.z[b];
                }
            }
        }
        total - 0.5 * (&post.h_inv * &curvature).trace()
    });
    Ok(linalg::pairwise_sum(&per_subject))
}

/// Gating inputs for every observation, in dataset order.
pub fn gating_inputs(dataset: &Dataset, gating: GatingFeatures) -> Vec<DVector<f64>> {
    dataset
        .subjects()
        .iter()
        .flat_map(|s| s.obs.iter().map(move |o| gating.input(&o.x, &o.z).into_owned()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct AlphaUpdate {
    pub alpha: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// A coefficient hit the magnitude clamp (separable soft targets).
    pub clamped: bool,
}

/// `Σ_n Σ_k γ_nk log π_k(v_n; α)`.
pub fn gating_objective(inputs: &[DVector<f64>], gamma: &Responsibilities, alpha: &DMatrix<f64>) -> f64 {
    let mut log_pi = vec![0.0; gamma.n_obs() * gamma.n_experts()];
    gating_objective_into(inputs, gamma, alpha, &mut log_pi)
}

/// [`gating_objective`], leaving the log gate probabilities in `log_pi` (row-major).
fn gating_objective_into(inputs: &[DVector<f64>], gamma: &Responsibilities, alpha: &DMatrix<f64>, log_pi: &mut [f64]) -> f64 {
    let k = gamma.n_experts();
    let terms: Vec<f64> = inputs
        .iter()
        .zip(log_pi.chunks_mut(k))
        .enumerate()
        .map(|(n, (v, lp))| {
            model::log_gate_probs_into(v, alpha, lp);
            gamma.row(n).iter().zip(lp.iter()).map(|(g, l)| if *g > 0.0 { g * l } else { 0.0 }).sum()
        })
        .collect();
    linalg::pairwise_sum(&terms)
}

/// Newton ascent on the soft-target multinomial logit with the last row fixed at zero.
pub fn m_step_alpha(
    inputs: &[DVector<f64>],
    gamma: &Responsibilities,
    alpha_init: &DMatrix<f64>,
    max_iters: usize,
) -> Result<AlphaUpdate> {
    let k = gamma.n_experts();
    if inputs.len() != gamma.n_obs() {
        return Err(MemoeError::Dimension("gating inputs and responsibilities differ in length".into()));
    }
    if alpha_init.nrows() != k {
        return Err(MemoeError::Dimension("alpha rows differ from expert count".into()));
    }
    let g = alpha_init.ncols();
    let mut alpha = alpha_init.clone();
    for c in 0..g {
        alpha[(k - 1, c)] = 0.0;
    }
    if k == 1 {
        return Ok(AlphaUpdate {
            alpha,
            iterations: 0,
            converged: true,
            clamped: false,
        });
    }
    let m = (k - 1) * g;
    let mut log_pi = vec![0.0; inputs.len() * k];
    let mut cand_log_pi = log_pi.clone();
    let mut objective = gating_objective_into(inputs, gamma, &alpha, &mut log_pi);
    let mut clamped = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let mut grad = DVector::zeros(m);
        let mut info = DMatrix::zeros(m, m);
        let mut pi = vec![0.0; k];
        for (n, v) in inputs.iter().enumerate() {
            for (p, l) in pi.iter_mut().zip(&log_pi[n * k..(n + 1) * k]) {
                *p = l.exp();
            }
            let row = gamma.row(n);
            let mass: f64 = row.iter().sum();
            for a in 0..k - 1 {
                let r = row[a] - mass * pi[a];
                for c in 0..g {
                    grad[a * g + c] += r * v[c];
                }
                for b in 0..k - 1 {
                    let w = mass * pi[a] * ((a == b) as u8 as f64 - pi[b]);
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..g {
                        let wc = w * v[c];
                        for e in 0..g {
                            info[(a * g + c, b * g + e)] += wc * v[e];
                        }
                    }
                }
            }
        }
        if grad.amax() < 1e-8 {
            converged = true;
            break;
        }
        let (step, _) = linalg::solve_spd_ridge(&info, &grad);
        let slack = 4.0 * f64::EPSILON * objective.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let mut cand = alpha.clone();
            for a in 0..k - 1 {
                for c in 0..g {
                    cand[(a, c)] += t * step[a * g + c];
                }
            }
            let hit = clamp_gating_spread(&mut cand);
            let obj = gating_objective_into(inputs, gamma, &cand, &mut cand_log_pi);
            if obj.is_finite() && obj >= objective - slack {
                accepted = Some((cand, obj, hit));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, obj, hit)) = accepted else { break };
        iterations += 1;
        clamped |= hit;
        std::mem::swap(&mut log_pi, &mut cand_log_pi);
        let moved = (&cand - &alpha).amax();
        alpha = cand;
        objective = obj;
        if moved == 0.0 {
            break;
        }
    }
    if clamped {
        warn!("gating coefficients clamped at magnitude {GATING_CLAMP}");
    }
    Ok(AlphaUpdate {
        alpha,
        iterations,
        converged,
        clamped,
    })
}

/// Limit every pairwise difference of gating rows to `GATING_CLAMP` per column
/// by clipping each column to its midpoint ± `GATING_CLAMP / 2`, then restore the
/// zero reference row. Returns whether anything was clipped.
fn clamp_gating_spread(alpha: &mut DMatrix<f64>) -> bool {
    let k = alpha.nrows();
    let half = 0.5 * GATING_CLAMP;
    let mut hit = false;
    for c in 0..alpha.ncols() {
        let col = alpha.column(c);
        let (lo, hi) = (col.min(), col.max());
        if hi - lo <= GATING_CLAMP {
            continue;
        }
        hit = true;
        let mid = 0.5 * (lo + hi);
        for r in 0..k {
            alpha[(r, c)] = alpha[(r, c)].clamp(mid - half, mid + half);
        }
        let reference = alpha[(k - 1, c)];
        for r in 0..k {
            alpha[(r, c)] -= reference;
        }
    }
    hit
}

/// Per-expert weighted least squares on `y − z·û`:
/// `β_k = (Σ γ x xᵀ/σ_k²)⁻¹ Σ γ x (y − z·û)/σ_k²`. Experts with negligible mass keep `prev`.
pub fn m_step_beta(
    dataset: &Dataset,
    gamma: &Responsibilities,
    posteriors: &[SubjectPosterior],
    sigma2: &DVector<f64>,
    prev: &DMatrix<f64>,
) -> (DMatrix<f64>, usize) {
    let k = gamma.n_experts();
    let p = dataset.dims().p;
    let mut grams = vec![DMatrix::<f64>::zeros(p, p); k];
    let mut rhs = vec![DVector::<f64>::zeros(p); k];
    let mut mass = vec![0.0; k];
    let mut n = 0;
    for (s, post) in dataset.subjects().iter().zip(posteriors) {
        for o in &s.obs {
            let target = o.y - o.z.dot(&post.u_hat);
            for kk in 0..k {
                let g = gamma.row(n)[kk];
                mass[kk] += g;
                let w = g / sigma2[kk];
                grams[kk].ger(w, &o.x, &o.x, 1.0);
                rhs[kk].axpy(w * target, &o.x, 1.0);
            }
            n += 1;
        }
    }
    let mut beta = prev.clone();
    let mut ridged = 0;
    for kk in 0..k {
        if mass[kk] < DEGENERATE_MASS {
            continue;
        }
        let (b, r) = linalg::solve_spd_ridge(&grams[kk], &rhs[kk]);
        if r {
            warn!("expert {kk}: weighted Gram matrix is rank deficient; ridge added");
            ridged += 1;
        }
        beta.set_row(kk, &b.transpose());
    }
    (beta, ridged)
}

/// `σ_k² = Σ γ [(y − x·β_k − z·û)² + zᵀ H⁻¹ z] / Σ γ`, floored. Returns the
/// variances and a per-expert flag for experts held at `prev` because their mass vanished.
pub fn m_step_sigma2(
    dataset: &Dataset,
    gamma: &Responsibilities,
    posteriors: &[SubjectPosterior],
    beta: &DMatrix<f64>,
    prev: &DVector<f64>,
    floor: f64,
) -> (DVector<f64>, Vec<bool>) {
    let k = gamma.n_experts();
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    let mut n = 0;
    for (s, post) in dataset.subjects().iter().zip(posteriors) {
        for o in &s.obs {
            let zu = o.z.dot(&post.u_hat);
            let corr = linalg::quad_form(&post.h_inv, &o.z);
            for kk in 0..k {
                let g = gamma.row(n)[kk];
                let e = o.y - linalg::row_dot(beta, kk, &o.x) - zu;
                num[kk] += g * (e * e + corr);
                den[kk] += g;
            }
            n += 1;
        }
    }
    let mut degenerate = vec![false; k];
    let sigma2 = DVector::from_fn(k, |kk, _| {
        if den[kk] < DEGENERATE_MASS {
            degenerate[kk] = true;
            prev[kk]
        } else {
            (num[kk] / den[kk]).max(floor)
        }
    });
    (sigma2, degenerate)
}

/// `κ = (Σ û wᵀ)(Σ w wᵀ)⁻¹`.
pub fn m_step_kappa(dataset: &Dataset, posteriors: &[SubjectPosterior]) -> DMatrix<f64> {
    let dims = dataset.dims();
    let mut cross = DMatrix::zeros(dims.d, dims.q);
    for (s, post) in dataset.subjects().iter().zip(posteriors) {
        cross += &s.w * post.u_hat.transpose();
    }
    let (inv, ridged) = linalg::inverse_spd_ridge(&dataset.w_gram());
    if ridged {
        warn!("subject covariate Gram matrix is singular; ridge added");
    }
    (inv * cross).transpose()
}

/// `Σ = N⁻¹ Σ_i [(û − κ w)(û − κ w)ᵀ + H⁻¹]`, symmetrized and eigenvalue-floored.
pub fn m_step_sigma(
    dataset: &Dataset,
    posteriors: &[SubjectPosterior],
    kappa: &DMatrix<f64>,
    eig_floor: f64,
) -> DMatrix<f64> {
    let q = dataset.dims().q;
    let mut acc = DMatrix::zeros(q, q);
    for (s, post) in dataset.subjects().iter().zip(posteriors) {
        let r = &post.u_hat - kappa * &s.w;
        acc += &r * r.transpose() + &post.h_inv;
    }
    acc /= dataset.n_subjects() as f64;
    linalg::floor_eigenvalues(&acc, eig_floor)
}

/// Bookkeeping from one M-step.
#[derive(Debug, Clone, Default)]
pub struct MStepInfo {
    pub degenerate: Vec<bool>,
    pub alpha_clamped: bool,
    pub ridge_warnings: usize,
}

/// Full M-step from the E-step `state`.
pub fn m_step(
    dataset: &Dataset,
    params: &ModelParams,
    state: &EmState,
    cfg: &FitConfig,
) -> Result<(ModelParams, MStepInfo)> {
    let inputs = gating_inputs(dataset, params.gating);
    m_step_with_inputs(dataset, &inputs, params, state, cfg)
}

fn m_step_with_inputs(
    dataset: &Dataset,
    inputs: &[DVector<f64>],
    params: &ModelParams,
    state: &EmState,
    cfg: &FitConfig,
) -> Result<(ModelParams, MStepInfo)> {
    let mass = state.gamma.expert_mass();
    let alpha_up = m_step_alpha(inputs, &state.gamma, &params.alpha, cfg.gating_newton_iters)?;
    let (beta, ridged) = m_step_beta(dataset, &state.gamma, &state.posteriors, &params.sigma2, &params.beta);
    let (sigma2, mut degenerate) =
        m_step_sigma2(dataset, &state.gamma, &state.posteriors, &beta, &params.sigma2, cfg.sigma2_floor);
    for (flag, m) in degenerate.iter_mut().zip(&mass) {
        *flag |= *m < DEGENERATE_MASS;
    }
    let dims = dataset.dims();
    let (kappa, sigma) = match cfg.random_effects {
        RandomEffects::Full => {
            let kappa = m_step_kappa(dataset, &state.posteriors);
            let sigma = m_step_sigma(dataset, &state.posteriors, &kappa, cfg.sigma_eig_floor);
            (kappa, sigma)
        }
        RandomEffects::ZeroMean => {
            let kappa = DMatrix::zeros(dims.q, dims.d);
            let sigma = m_step_sigma(dataset, &state.posteriors, &kappa, cfg.sigma_eig_floor);
            (kappa, sigma)
        }
        RandomEffects::Off => (
            DMatrix::zeros(dims.q, dims.d),
            DMatrix::identity(dims.q, dims.q) * cfg.sigma_eig_floor,
        ),
    };
    let next = ModelParams {
        alpha: alpha_up.alpha,
        beta,
        sigma2,
        kappa,
        sigma,
        gating: params.gating,
    };
    Ok((
        next,
        MStepInfo {
            degenerate,
            alpha_clamped: alpha_up.clamped,
            ridge_warnings: ridged,
        },
    ))
}

/// Random-responsibility initialization followed by one M-step at `û = 0`.
pub fn initial_params(dataset: &Dataset, cfg: &FitConfig, rng: &mut impl Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let dims = dataset.dims();
    let k = cfg.k;
    let per_subject: Vec<Vec<f64>> = dataset
        .subjects()
        .iter()
        .map(|s| {
            let mut out = Vec::with_capacity(s.obs.len() * k);
            for _ in &s.obs {
                let draws: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-12).collect();
                let total: f64 = draws.iter().sum();
                let sq: Vec<f64> = draws.iter().map(|d| (d / total).powi(2)).collect();
                let sq_total: f64 = sq.iter().sum();
                out.extend(sq.iter().map(|v| v / sq_total));
            }
            out
        })
        .collect();
    let gamma = Responsibilities::from_subjects(k, per_subject);
    let sigma = match cfg.random_effects {
        RandomEffects::Off => DMatrix::identity(dims.q, dims.q) * cfg.sigma_eig_floor,
        _ => DMatrix::identity(dims.q, dims.q),
    };
    let zero_posteriors: Vec<SubjectPosterior> = (0..dataset.n_subjects())
        .map(|_| SubjectPosterior {
            u_hat: DVector::zeros(dims.q),
            h: DMatrix::identity(dims.q, dims.q),
            h_inv: DMatrix::zeros(dims.q, dims.q),
            log_det_h: 0.0,
            h_at_mode: 0.0,
            newton_iters: 0,
            grad_norm: 0.0,
            converged: true,
            floored: false,
        })
        .collect();
    let g = cfg.gating.dim(dims);
    let inputs = gating_inputs(dataset, cfg.gating);
    let alpha = m_step_alpha(&inputs, &gamma, &DMatrix::zeros(k, g), cfg.gating_newton_iters)?.alpha;
    let ones = DVector::from_element(k, 1.0);
    let (beta, _) = m_step_beta(dataset, &gamma, &zero_posteriors, &ones, &DMatrix::zeros(k, dims.p));
    let (sigma2, _) = m_step_sigma2(dataset, &gamma, &zero_posteriors, &beta, &ones, cfg.sigma2_floor);
    Ok(ModelParams {
        alpha,
        beta,
        sigma2,
        kappa: DMatrix::zeros(dims.q, dims.d),
        sigma,
        gating: cfg.gating,
    })
}

/// Sums frozen at fit time so prediction does not need the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSums {
    /// `Σ_ij γ_ijk x xᵀ / σ_k²`, one matrix per expert.
    pub expert_gram: Vec<DMatrix<f64>>,
    /// `Σ_i w_i w_iᵀ`.
    pub w_gram: DMatrix<f64>,
}

impl DesignSums {
    pub fn compute(dataset: &Dataset, gamma: &Responsibilities, sigma2: &DVector<f64>) -> Self {
        let k = gamma.n_experts();
        let p = dataset.dims().p;
        let mut expert_gram = vec![DMatrix::zeros(p, p); k];
        let mut n = 0;
        for s in dataset.subjects() {
            for o in &s.obs {
                for (kk, gram) in expert_gram.iter_mut().enumerate() {
                    gram.ger(gamma.row(n)[kk] / sigma2[kk], &o.x, &o.x, 1.0);
                }
                n += 1;
            }
        }
        Self {
            expert_gram,
            w_gram: dataset.w_gram(),
        }
    }
}

/// Diagnostics accumulated over one EM run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Largest relative decrease of `ℓ_LA` between consecutive iterations.
    pub max_rel_dip: f64,
    /// Iterations whose decrease exceeded the silent slack.
    pub dip_warnings: usize,
    pub unconverged_modes: usize,
    pub floored_curvatures: usize,
    pub degenerate_experts: Vec<bool>,
    pub alpha_clamped: bool,
    pub ridge_warnings: usize,
    /// Largest `|Σ_k γ − 1|` seen at any iteration.
    pub max_resp_row_error: f64,
    /// Smallest σ_k² after any M-step.
    pub min_sigma2: f64,
    /// Smallest eigenvalue of Σ after any M-step.
    pub min_sigma_eig: f64,
}

/// One completed EM run from a single initialization.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: ModelParams,
    pub state: EmState,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostics: FitDiagnostics,
}

impl EmRun {
    pub fn loglik(&self) -> f64 {
        self.state.loglik
    }
}

fn track_params(diag: &mut FitDiagnostics, params: &ModelParams) {
    diag.min_sigma2 = diag.min_sigma2.min(params.sigma2.min());
    diag.min_sigma_eig = diag.min_sigma_eig.min(linalg::min_eigenvalue(&params.sigma));
}

fn track_state(diag: &mut FitDiagnostics, state: &EmState, cfg: &FitConfig) -> Result<()> {
    diag.max_resp_row_error = diag.max_resp_row_error.max(state.gamma.max_row_error());
    if cfg.random_effects != RandomEffects::Off {
        diag.unconverged_modes = state.posteriors.iter().filter(|p| p.grad_norm >= cfg.mode_tol).count();
    }
    diag.floored_curvatures += state.posteriors.iter().filter(|p| p.floored).count();
    if !state.loglik.is_finite() {
        return Err(MemoeError::Fit("non-finite Laplace log-likelihood".into()));
    }
    Ok(())
}

/// Run Laplace-EM from `init` until the relative change of `ℓ_LA` drops below
/// `em_rel_tol` or `max_em_iters` is reached.
pub fn fit_from(dataset: &Dataset, init: ModelParams, cfg: &FitConfig) -> Result<EmRun> {
    cfg.validate()?;
    init.validate(dataset.dims())?;
    let inputs = gating_inputs(dataset, init.gating);
    let mut diag = FitDiagnostics {
        min_sigma2: f64::INFINITY,
        min_sigma_eig: f64::INFINITY,
        degenerate_experts: vec![false; cfg.k],
        ..FitDiagnostics::default()
    };
    let mut params = init;
    let mut state = e_step(dataset, &params, None, cfg)?;
    track_state(&mut diag, &state, cfg)?;
    let mut trace = vec![state.loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_em_iters {
        let (next, info) = m_step_with_inputs(dataset, &inputs, &params, &state, cfg)?;
        for (flag, d) in diag.degenerate_experts.iter_mut().zip(&info.degenerate) {
            *flag |= *d;
        }
        diag.alpha_clamped |= info.alpha_clamped;
        diag.ridge_warnings += info.ridge_warnings;
        track_params(&mut diag, &next);
        let next_state = e_step(dataset, &next, Some(&state.posteriors), cfg)?;
        track_state(&mut diag, &next_state, cfg)?;
        iterations += 1;
        let prev_ll = state.loglik;
        let new_ll = next_state.loglik;
        let scale = 1.0 + prev_ll.abs();
        if new_ll < prev_ll {
            let dip = (prev_ll - new_ll) / scale;
            diag.max_rel_dip = diag.max_rel_dip.max(dip);
            if dip > DIP_ABORT {
                return Err(MemoeError::Fit(format!(
                    "Laplace log-likelihood fell by {dip:.3e} (relative) at iteration {iterations}"
                )));
            }
            if dip > DIP_SLACK {
                diag.dip_warnings += 1;
                debug!("iteration {iterations}: relative log-likelihood dip {dip:.3e}");
            }
        }
        trace.push(new_ll);
        params = next;
        state = next_state;
        if (new_ll - prev_ll).abs() / scale < cfg.em_rel_tol {
            converged = true;
            break;
        }
    }
    let failed = match cfg.random_effects {
        RandomEffects::Off => 0,
        _ => state.posteriors.iter().filter(|p| p.grad_norm > MODE_FAILURE).count(),
    };
    if failed > 0 {
        return Err(MemoeError::Fit(format!("{failed} random-effect modes failed to converge")));
    }
    if diag.unconverged_modes > 0 {
        warn!("{} random-effect modes stopped above tolerance", diag.unconverged_modes);
    }
    Ok(EmRun {
        params,
        state,
        loglik_trace: trace,
        converged,
        iterations,
        diagnostics: diag,
    })
}

/// Outcome of one random start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: usize,
    pub final_loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// A fitted model: parameters, final E-step quantities and run metadata.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    pub posteriors: Vec<SubjectPosterior>,
    pub gamma: Responsibilities,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub em_iters: usize,
    pub starts: Vec<StartSummary>,
    pub best_start: usize,
    pub diagnostics: FitDiagnostics,
    pub design_sums: DesignSums,
    pub random_effects: RandomEffects,
    pub subject_ids: Vec<String>,
    pub config: FitConfig,
}

impl FittedModel {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }

    fn from_run(dataset: &Dataset, run: EmRun, starts: Vec<StartSummary>, best_start: usize, cfg: &FitConfig) -> Self {
        let design_sums = DesignSums::compute(dataset, &run.state.gamma, &run.params.sigma2);
        Self {
            params: run.params,
            posteriors: run.state.posteriors,
            gamma: run.state.gamma,
            loglik_trace: run.loglik_trace,
            converged: run.converged,
            em_iters: run.iterations,
            starts,
            best_start,
            diagnostics: run.diagnostics,
            design_sums,
            random_effects: cfg.random_effects,
            subject_ids: dataset.subjects().iter().map(|s| s.id.clone()).collect(),
            config: cfg.clone(),
        }
    }

    /// Wrap a single run (e.g. from [`fit_from`]) as a fitted model.
    pub fn from_single_run(dataset: &Dataset, run: EmRun, cfg: &FitConfig) -> Self {
        let summary = StartSummary {
            start: 0,
            final_loglik: Some(run.loglik()),
            iterations: run.iterations,
            converged: run.converged,
            error: None,
        };
        Self::from_run(dataset, run, vec![summary], 0, cfg)
    }
}

/// Seeded generator for random start `start`.
pub fn start_rng(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    rng
}

/// Multi-start Laplace-EM; returns the start with the highest final `ℓ_LA`.
pub fn fit(dataset: &Dataset, cfg: &FitConfig) -> Result<FittedModel> {
    cfg.validate()?;
    let runs: Vec<Result<EmRun>> = par::map_range(cfg.n_starts, |start| {
        let mut rng = start_rng(cfg.seed, start);
        let init = initial_params(dataset, cfg, &mut rng)?;
        fit_from(dataset, init, cfg)
    });
    let starts: Vec<StartSummary> = runs
        .iter()
        .enumerate()
        .map(|(start, r)| match r {
            Ok(run) => StartSummary {
                start,
                final_loglik: Some(run.loglik()),
                iterations: run.iterations,
                converged: run.converged,
                error: None,
            },
            Err(e) => StartSummary {
                start,
                final_loglik: None,
                iterations: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let best = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().ok().map(|run| (i, run.loglik())))
        .fold(None, |acc: Option<(usize, f64)>, (i, ll)| match acc {
            Some((_, best)) if best >= ll => acc,
            _ => Some((i, ll)),
        });
    let Some((best_start, _)) = best else {
        let reasons: Vec<String> = starts.iter().filter_map(|s| s.error.clone()).collect();
        return Err(MemoeError::Fit(format!("all {} starts failed: {}", cfg.n_starts, reasons.join("; "))));
    };
    let run = runs.into_iter().nth(best_start).expect("index in range")?;
    Ok(FittedModel::from_run(dataset, run, starts, best_start, cfg))
}

/// Whether a trace never decreases by more than `slack · (1 + |ℓ|)` per step.
pub fn trace_is_monotone(trace: &[f64], slack: f64) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - slack * (1.0 + w[0].abs()))
}

/// Terms of `ℓ_LA` that the surrogate drops at the tangent point.
pub fn surrogate_offset(state: &EmState) -> f64 {
    state
        .posteriors
        .iter()
        .map(|p| {
            let q = p.u_hat.len() as f64;
            0.5 * q * LN_2PI - 0.5 * p.log_det_h + 0.5 * q
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Observation, Subject};
    use crate::test_util::*;
    use approx::assert_relative_eq;

    fn one_obs_subjects(rows: &[(f64, Vec<f64>)]) -> Dataset {
        Dataset::new(
            rows.iter()
                .enumerate()
                .map(|(i, (y, x))| Subject::new(format!("{i}"), vec![1.0], vec![Observation::new(*y, x.clone(), vec![1.0])]))
                .collect(),
        )
        .unwrap()
    }

    fn zero_posteriors(n: usize, q: usize) -> Vec<SubjectPosterior> {
        (0..n)
            .map(|_| SubjectPosterior {
                u_hat: DVector::zeros(q),
                h: DMatrix::identity(q, q),
                h_inv: DMatrix::zeros(q, q),
                log_det_h: 0.0,
                h_at_mode: 0.0,
                newton_iters: 0,
                grad_norm: 0.0,
                converged: true,
                floored: false,
            })
            .collect()
    }

    #[test]
    fn e_step_identical_experts_gives_gate_probs() {
        let mut rng = start_rng(1, 0);
        let ds = random_lmm_dataset(&mut rng, 6, 3, 2, 1, 2);
        let mut params = random_params(&mut rng, ds.dims(), 3);
        for k in 1..3 {
            let row = params.beta.row(0).clone_owned();
            params.beta.set_row(k, &row);
        }
        params.sigma2 = DVector::from_element(3, 0.7);
        let st = e_step(&ds, &params, None, &FitConfig::with_k(3)).unwrap();
        let mut n = 0;
        for s in ds.subjects() {
            for o in &s.obs {
                let pi = model::gate_probs(&o.x, &params.alpha);
                for k in 0..3 {
                    assert_relative_eq!(st.gamma.row(n)[k], pi[k], epsilon = 1e-12);
                }
                n += 1;
            }
        }
        assert!(st.gamma.max_row_error() < 1e-12);

        let single = random_params(&mut rng, ds.dims(), 1);
        let st = e_step(&ds, &single, None, &FitConfig::with_k(1)).unwrap();
        assert!((0..st.gamma.n_obs()).all(|n| st.gamma.row(n)[0] == 1.0));
    }

    #[test]
    fn alpha_recovers_intercept_logits() {
        let c = [0.2, 0.5, 0.3];
        let n = 50;
        let inputs: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_element(1, 1.0)).collect();
        let gamma = Responsibilities::from_subjects(3, vec![c.repeat(n)]);
        let up = m_step_alpha(&inputs, &gamma, &DMatrix::zeros(3, 1), 50).unwrap();
        assert!(up.converged);
        assert_relative_eq!(up.alpha[(0, 0)], (0.2f64 / 0.3).ln(), epsilon = 1e-9);
        assert_relative_eq!(up.alpha[(1, 0)], (0.5f64 / 0.3).ln(), epsilon = 1e-9);
        assert_eq!(up.alpha[(2, 0)], 0.0);
    }

    #[test]
    fn alpha_self_consistent_and_monotone() {
        let mut rng = start_rng(2, 0);
        let alpha = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, -0.3, 0.8, 0.0, 0.0]);
        let inputs: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_vec(vec![1.0, normal(&mut rng)])).collect();
        let rows: Vec<f64> = inputs.iter().flat_map(|v| model::gate_probs(v, &alpha).iter().copied().collect::<Vec<_>>()).collect();
        let gamma = Responsibilities::from_subjects(3, vec![rows]);
        let up = m_step_alpha(&inputs, &gamma, &alpha, 50).unwrap();
        assert!((&up.alpha - &alpha).amax() < 1e-8);

        // Noisy targets from a zero start: objective must not decrease.
        let noisy: Vec<f64> = (0..200)
            .flat_map(|_| {
                let d: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
                let t: f64 = d.iter().sum();
                d.into_iter().map(move |v| v / t)
            })
            .collect();
        let gamma = Responsibilities::from_subjects(3, vec![noisy]);
        let start = DMatrix::zeros(3, 2);
        let before = gating_objective(&inputs, &gamma, &start);
        let mut prev = before;
        for iters in 1..6 {
            let up = m_step_alpha(&inputs, &gamma, &start, iters).unwrap();
            let obj = gating_objective(&inputs, &gamma, &up.alpha);
            assert!(obj >= prev - 1e-12);
            prev = obj;
        }
    }

    #[test]
    fn alpha_separable_is_clamped() {
        let inputs: Vec<DVector<f64>> = (-5..5).map(|i| DVector::from_vec(vec![0.02 * (i as f64 + 0.5)])).collect();
        let rows: Vec<f64> = inputs.iter().flat_map(|v| if v[0] > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let gamma = Responsibilities::from_subjects(2, vec![rows]);
        let up = m_step_alpha(&inputs, &gamma, &DMatrix::zeros(2, 1), 200).unwrap();
        assert!(up.clamped);
        assert!(up.alpha.amax() <= GATING_CLAMP);
    }

    #[test]
    fn beta_single_expert_is_ols_and_scale_free() {
        let ds = one_obs_subjects(&[(1.0, vec![1.0, 0.0]), (2.0, vec![1.0, 1.0]), (4.0, vec![1.0, 2.0]), (3.5, vec![1.0, 3.0])]);
        let gamma = Responsibilities::from_subjects(1, ds.subjects().iter().map(|_| vec![1.0]).collect());
        let post = zero_posteriors(4, 1);
        let (b, _) = m_step_beta(&ds, &gamma, &post, &DVector::from_element(1, 1.0), &DMatrix::zeros(1, 2));
        // Normal equations by hand: slope 0.95, intercept 1.2.
        assert_relative_eq!(b[(0, 1)], 0.95, epsilon = 1e-12);
        assert_relative_eq!(b[(0, 0)], 1.2, epsilon = 1e-12);
        let (b2, _) = m_step_beta(&ds, &gamma, &post, &DVector::from_element(1, 37.0), &DMatrix::zeros(1, 2));
        assert!((&b - &b2).amax() < 1e-12);
    }

    #[test]
    fn beta_hard_assignment_is_per_expert_ols() {
        let mut rng = start_rng(4, 0);
        let rows: Vec<(f64, Vec<f64>)> = (0..40).map(|_| (normal(&mut rng), vec![1.0, normal(&mut rng)])).collect();
        let ds = one_obs_subjects(&rows);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let gamma = Responsibilities::from_subjects(
            2,
            labels.iter().map(|&l| if l == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect(),
        );
        let post: Vec<SubjectPosterior> = (0..40)
            .map(|_| SubjectPosterior {
                u_hat: DVector::from_element(1, 0.3),
                ..zero_posteriors(1, 1).remove(0)
            })
            .collect();
        let (b, _) = m_step_beta(&ds, &gamma, &post, &DVector::from_vec(vec![1.0, 2.0]), &DMatrix::zeros(2, 2));
        for k in 0..2 {
            // Partition-and-solve oracle via nalgebra's QR least squares.
            let idx: Vec<usize> = (0..40).filter(|i| labels[*i] == k).collect();
            let x = DMatrix::from_fn(idx.len(), 2, |r, c| rows[idx[r]].1[c]);
            let y = DVector::from_fn(idx.len(), |r, _| rows[idx[r]].0 - 0.3);
            let sol = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
            assert!((b.row(k).transpose() - sol).amax() < 1e-10);
        }
    }

    #[test]
    fn sigma2_limits() {
        let ds = one_obs_subjects(&[(1.0, vec![1.0]), (1.0, vec![1.0])]);
        let gamma = Responsibilities::from_subjects(1, vec![vec![1.0], vec![1.0]]);
        let post = zero_posteriors(2, 1);
        let beta = DMatrix::from_element(1, 1, 1.0);
        let (s, deg) = m_step_sigma2(&ds, &gamma, &post, &beta, &DVector::from_element(1, 3.0), 1e-6);
        assert_eq!(s[0], 1e-6);
        assert!(!deg[0]);

        let ds = one_obs_subjects(&[(1.0, vec![1.0]), (3.0, vec![1.0]), (2.5, vec![1.0])]);
        let gamma = Responsibilities::from_subjects(2, vec![vec![1.0, 0.0]; 3]);
        let post = zero_posteriors(3, 1);
        let beta = DMatrix::from_row_slice(2, 1, &[2.0, 0.0]);
        let (s, deg) = m_step_sigma2(&ds, &gamma, &post, &beta, &DVector::from_vec(vec![1.0, 4.0]), 1e-6);
        assert_relative_eq!(s[0], (1.0 + 1.0 + 0.25) / 3.0, epsilon = 1e-15);
        assert!(deg[1]);
        assert_eq!(s[1], 4.0);
    }

    #[test]
    fn kappa_and_sigma_recovery() {
        let mut rng = start_rng(5, 0);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.0, 4.0]);
        let subjects: Vec<Subject> = (0..30)
            .map(|i| Subject::new(format!("{i}"), vec![1.0, normal(&mut rng), normal(&mut rng)], vec![Observation::new(0.0, vec![1.0], vec![1.0, 0.0])]))
            .collect();
        let ds = Dataset::new(subjects).unwrap();
        let post: Vec<SubjectPosterior> = ds
            .subjects()
            .iter()
            .map(|s| SubjectPosterior {
                u_hat: &a * &s.w,
                h_inv: DMatrix::identity(2, 2) * 0.25,
                ..zero_posteriors(1, 2).remove(0)
            })
            .collect();
        let kappa = m_step_kappa(&ds, &post);
        assert!((&kappa - &a).amax() < 1e-10);
        let sigma = m_step_sigma(&ds, &post, &kappa, 1e-8);
        assert!((&sigma - DMatrix::identity(2, 2) * 0.25).amax() < 1e-10);
        assert!(linalg::asymmetry(&sigma) <= 1e-14);

        // d = 1 with w = 1 gives the mean of the modes.
        let ds1 = Dataset::new(
            (0..4)
                .map(|i| Subject::new(format!("{i}"), vec![1.0], vec![Observation::new(0.0, vec![1.0], vec![1.0])]))
                .collect(),
        )
        .unwrap();
        let post1: Vec<SubjectPosterior> = [1.0, 2.0, 4.0, 9.0]
            .iter()
            .map(|&u| SubjectPosterior {
                u_hat: DVector::from_element(1, u),
                ..zero_posteriors(1, 1).remove(0)
            })
            .collect();
        assert_relative_eq!(m_step_kappa(&ds1, &post1)[(0, 0)], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn surrogate_touches_laplace_loglik() {
        let mut rng = start_rng(6, 0);
        for k in [1, 2, 3] {
            let ds = random_lmm_dataset(&mut rng, 15, 4, 2, 2, k);
            let params = random_params(&mut rng, ds.dims(), k);
            let cfg = FitConfig::with_k(k);
            let st = e_step(&ds, &params, None, &cfg).unwrap();
            let q = q_surrogate(&ds, &params, &st).unwrap();
            assert_relative_eq!(q + surrogate_offset(&st), st.loglik, max_relative = 1e-10);
        }
    }

    #[test]
    fn m_step_ascends_surrogate_and_beta_is_stationary() {
        let mut rng = start_rng(7, 0);
        for k in [1, 2] {
            let ds = random_lmm_dataset(&mut rng, 20, 5, 2, 1, k);
            let params = random_params(&mut rng, ds.dims(), k);
            let cfg = FitConfig::with_k(k);
            let st = e_step(&ds, &params, None, &cfg).unwrap();
            let (next, _) = m_step(&ds, &params, &st, &cfg).unwrap();
            let q0 = q_surrogate(&ds, &params, &st).unwrap();
            let q1 = q_surrogate(&ds, &next, &st).unwrap();
            assert!(q1 >= q0 - 1e-9 * q0.abs());

            // Finite-difference gradient of Q in β at the closed-form update.
            for kk in 0..k {
                for c in 0..2 {
                    let h = 1e-5;
                    let mut up = next.clone();
                    up.beta[(kk, c)] += h;
                    let mut dn = next.clone();
                    dn.beta[(kk, c)] -= h;
                    let g = (q_surrogate(&ds, &up, &st).unwrap() - q_surrogate(&ds, &dn, &st).unwrap()) / (2.0 * h);
                    assert!(g.abs() < 1e-4, "dQ/dbeta = {g}");
                }
            }
        }
    }

    #[test]
    fn fit_single_expert_monotone_and_floors() {
        let mut rng = start_rng(8, 0);
        let ds = random_lmm_dataset(&mut rng, 40, 6, 2, 1, 1);
        let cfg = FitConfig {
            n_starts: 2,
            ..FitConfig::with_k(1)
        };
        let fitted = fit(&ds, &cfg).unwrap();
        assert!(trace_is_monotone(&fitted.loglik_trace, DIP_SLACK));
        assert!(fitted.diagnostics.min_sigma2 >= cfg.sigma2_floor);
        assert!(fitted.diagnostics.min_sigma_eig >= cfg.sigma_eig_floor * (1.0 - 1e-9));
        assert!(fitted.diagnostics.max_resp_row_error < 1e-10);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig { k: 0, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { em_rel_tol: 0.0, ..FitConfig::default() }.validate().is_err());
        assert!("zero_mean".parse::<RandomEffects>().unwrap() == RandomEffects::ZeroMean);
        assert!("bogus".parse::<RandomEffects>().is_err());
    }
}
