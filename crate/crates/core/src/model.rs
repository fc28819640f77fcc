//! Data and parameter types plus the elementary densities shared by every
//! other module: the Gaussian log-density, the softmax gate and the
//! per-observation expert mixture.

use std::borrow::Cow;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MemoeError, Result};
use crate::linalg;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One repeated measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    /// Fixed-effect covariates. The caller supplies any intercept column.
    pub x: DVector<f64>,
    /// Random-effect design.
    pub z: DVector<f64>,
}

impl Observation {
    pub fn new(y: f64, x: Vec<f64>, z: Vec<f64>) -> Self {
        Self {
            y,
            x: DVector::from_vec(x),
            z: DVector::from_vec(z),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Subject-level covariates driving the random-effect mean.
    pub w: DVector<f64>,
    pub obs: Vec<Observation>,
}

impl Subject {
    pub fn new(id: impl Into<String>, w: Vec<f64>, obs: Vec<Observation>) -> Self {
        Self {
            id: id.into(),
            w: DVector::from_vec(w),
            obs,
        }
    }
}

/// Dataset-wide covariate dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Fixed-effect covariates per observation.
    pub p: usize,
    /// Random-effect dimension.
    pub q: usize,
    /// Subject-level covariates.
    pub d: usize,
}

/// A validated collection of subjects sharing `(p, q, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<Subject>,
    dims: Dims,
    total_obs: usize,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| MemoeError::Input("dataset has no subjects".into()))?;
        let first_obs = first.obs.first().ok_or_else(|| MemoeError::Subject {
            subject: first.id.clone(),
            message: "no observations".into(),
        })?;
        let dims = Dims {
            p: first_obs.x.len(),
            q: first_obs.z.len(),
            d: first.w.len(),
        };
        let mut total_obs = 0;
        for s in &subjects {
            let bad = |message: String| MemoeError::Subject {
                subject: s.id.clone(),
                message,
            };
            if s.obs.is_empty() {
                return Err(bad("no observations".into()));
            }
            if s.w.len() != dims.d {
                return Err(bad(format!("w has length {}, expected {}", s.w.len(), dims.d)));
            }
            if s.w.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite w".into()));
            }
            for (j, o) in s.obs.iter().enumerate() {
                if o.x.len() != dims.p || o.z.len() != dims.q {
                    return Err(bad(format!(
                        "observation {j} has (p, q) = ({}, {}), expected ({}, {})",
                        o.x.len(),
                        o.z.len(),
                        dims.p,
                        dims.q
                    )));
                }
                if !o.y.is_finite() || o.x.iter().chain(o.z.iter()).any(|v| !v.is_finite()) {
                    return Err(bad(format!("observation {j} has non-finite entries")));
                }
            }
            total_obs += s.obs.len();
        }
        if dims.p == 0 || dims.q == 0 || dims.d == 0 {
            return Err(MemoeError::Dimension(format!(
                "(p, q, d) = ({}, {}, {}); each must be at least 1",
                dims.p, dims.q, dims.d
            )));
        }
        Ok(Self {
            subjects,
            dims,
            total_obs,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_obs(&self) -> usize {
        self.total_obs
    }

    /// New dataset holding the subjects at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.subjects[i].clone()).collect())
    }

    /// `Σ_i w_i w_i^T`.
    pub fn w_gram(&self) -> DMatrix<f64> {
        let d = self.dims.d;
        let mut g = DMatrix::zeros(d, d);
        for s in &self.subjects {
            g += &s.w * s.w.transpose();
        }
        g
    }
}

/// Which covariates feed the gating softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingFeatures {
    /// `v = x`
    #[default]
    X,
    /// `v = (x, z)`
    XZ,
}

impl GatingFeatures {
    pub fn name(self) -> &'static str {
        match self {
            GatingFeatures::X => "x",
            GatingFeatures::XZ => "xz",
        }
    }

    pub fn dim(self, dims: Dims) -> usize {
        match self {
            GatingFeatures::X => dims.p,
            GatingFeatures::XZ => dims.p + dims.q,
        }
    }

    pub fn input<'a>(self, x: &'a DVector<f64>, z: &DVector<f64>) -> Cow<'a, DVector<f64>> {
        match self {
            GatingFeatures::X => Cow::Borrowed(x),
            GatingFeatures::XZ => {
                Cow::Owned(DVector::from_iterator(x.len() + z.len(), x.iter().chain(z.iter()).copied()))
            }
        }
    }
}

impl std::str::FromStr for GatingFeatures {
    type Err = MemoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Self::X),
            "xz" => Ok(Self::XZ),
            other => Err(MemoeError::Config(format!("unknown gating features '{other}'"))),
        }
    }
}

/// Full parameter set of a K-expert model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// K x g gating coefficients; the last row is the zero reference.
    pub alpha: DMatrix<f64>,
    /// K x p expert coefficients, one row per expert.
    pub beta: DMatrix<f64>,
    /// Expert noise variances.
    pub sigma2: DVector<f64>,
    /// q x d random-effect mean map.
    pub kappa: DMatrix<f64>,
    /// q x q random-effect covariance.
    pub sigma: DMatrix<f64>,
    pub gating: GatingFeatures,
}

impl ModelParams {
    pub fn n_experts(&self) -> usize {
        self.beta.nrows()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            p: self.beta.ncols(),
            q: self.sigma.nrows(),
            d: self.kappa.ncols(),
        }
    }

    /// Check shapes against `dims` and the positivity invariants.
    pub fn validate(&self, dims: Dims) -> Result<()> {
        let k = self.n_experts();
        if k == 0 {
            return Err(MemoeError::InvalidParams("need at least one expert".into()));
        }
        let g = self.gating.dim(dims);
        let shape_err = |what: &str, r: usize, c: usize, er: usize, ec: usize| {
            MemoeError::Dimension(format!("{what} is {r}x{c}, expected {er}x{ec}"))
        };
        if self.alpha.shape() != (k, g) {
            return Err(shape_err("alpha", self.alpha.nrows(), self.alpha.ncols(), k, g));
        }
        if self.beta.shape() != (k, dims.p) {
            return Err(shape_err("beta", self.beta.nrows(), self.beta.ncols(), k, dims.p));
        }
        if self.sigma2.len() != k {
            return Err(MemoeError::Dimension(format!(
                "sigma2 has length {}, expected {k}",
                self.sigma2.len()
            )));
        }
        if self.kappa.shape() != (dims.q, dims.d) {
            return Err(shape_err("kappa", self.kappa.nrows(), self.kappa.ncols(), dims.q, dims.d));
        }
        linalg::check_square(&self.sigma, dims.q, "Sigma")?;
        if self.sigma2.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(MemoeError::InvalidParams("noise variances must be positive".into()));
        }
        if self.alpha.row(k - 1).iter().any(|&v| v != 0.0) {
            return Err(MemoeError::InvalidParams("reference gating row must be zero".into()));
        }
        let all = self
            .alpha
            .iter()
            .chain(self.beta.iter())
            .chain(self.kappa.iter())
            .chain(self.sigma.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(MemoeError::InvalidParams("non-finite parameter".into()));
        }
        if dims.q > 0 {
            let scale = self.sigma.amax().max(1.0);
            if linalg::asymmetry(&self.sigma) > 1e-12 * scale {
                return Err(MemoeError::InvalidParams("Sigma is not symmetric".into()));
            }
            if linalg::min_eigenvalue(&self.sigma) <= 0.0 {
                return Err(MemoeError::InvalidParams("Sigma is not positive definite".into()));
            }
        }
        Ok(())
    }

    /// Gating input for one observation under this model's feature policy.
    pub fn gating_input<'a>(&self, obs: &'a Observation) -> Cow<'a, DVector<f64>> {
        self.gating.input(&obs.x, &obs.z)
    }

    /// Expert mean `x^T beta_k` for every expert.
    pub fn expert_means(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.beta * x
    }

    /// Copy with the expert indices permuted: new expert `k` is old expert `perm[k]`.
    /// Gating rows are re-referenced so the last row stays zero.
    pub fn permuted(&self, perm: &[usize]) -> ModelParams {
        let k = self.n_experts();
        assert_eq!(perm.len(), k, "permutation length");
        let mut alpha = DMatrix::zeros(k, self.alpha.ncols());
        let mut beta = DMatrix::zeros(k, self.beta.ncols());
        let mut sigma2 = DVector::zeros(k);
        let reference = self.alpha.row(perm[k - 1]).clone_owned();
        for (new, &old) in perm.iter().enumerate() {
            alpha.set_row(new, &(self.alpha.row(old) - &reference));
            beta.set_row(new, &self.beta.row(old));
            sigma2[new] = self.sigma2[old];
        }
        for c in 0..alpha.ncols() {
            alpha[(k - 1, c)] = 0.0;
        }
        ModelParams {
            alpha,
            beta,
            sigma2,
            ..self.clone()
        }
    }
}

/// Unchecked log-density of `N(mean, var)` at `y`.
#[inline]
pub(crate) fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln()) - r * r / (2.0 * var)
}

/// Log-density of `N(mean, var)` at `y`.
pub fn gaussian_logpdf(y: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(MemoeError::Domain(format!("variance must be positive, got {var}")));
    }
    Ok(normal_logpdf(y, mean, var))
}

/// Log of the softmax gate probabilities, computed with max subtraction.
pub fn log_gate_probs(v: &DVector<f64>, alpha: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(alpha.nrows());
    log_gate_probs_into(v, alpha, out.as_mut_slice());
    out
}

/// [`log_gate_probs`] written into `out`.
pub(crate) fn log_gate_probs_into(v: &DVector<f64>, alpha: &DMatrix<f64>, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = linalg::row_dot(alpha, k, v);
    }
    let lse = linalg::log_sum_exp(out);
    for o in out.iter_mut() {
        *o -= lse;
    }
}

/// Softmax gate probabilities `π_k(v; α)`.
pub fn gate_probs(v: &DVector<f64>, alpha: &DMatrix<f64>) -> DVector<f64> {
    let eta = alpha * v;
    let max = eta.max();
    let ex = eta.map(|e| (e - max).exp());
    let total = ex.sum();
    ex / total
}

/// `log Σ_k π_k φ(y; x·β_k + z·u, σ_k²)` for one observation.
pub fn conditional_mixture_logpdf(obs: &Observation, u: &DVector<f64>, params: &ModelParams) -> f64 {
    let log_pi = log_gate_probs(&params.gating_input(obs), &params.alpha);
    let zu = obs.z.dot(u);
    let terms: Vec<f64> = (0..params.n_experts())
        .map(|k| log_pi[k] + normal_logpdf(obs.y, linalg::row_dot(&params.beta, k, &obs.x) + zu, params.sigma2[k]))
        .collect();
    linalg::log_sum_exp(&terms)
}

/// Log-density of the multivariate normal `N(mean, cov)` at `u`, given the
/// inverse and log-determinant of `cov`.
pub(crate) fn mvn_logpdf_factored(u: &DVector<f64>, mean: &DVector<f64>, cov_inv: &DMatrix<f64>, cov_log_det: f64) -> f64 {
    let r = u - mean;
    -0.5 * (u.len() as f64 * (2.0 * PI).ln() + cov_log_det + linalg::quad_form(cov_inv, &r))
}
