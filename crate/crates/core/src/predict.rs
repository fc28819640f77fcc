//! Point prediction, the predictive mixture for a new covariate tuple and
//! grid-based highest-density prediction sets.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::em::{DesignSums, FittedModel};
use crate::error::{MemoeError, Result};
use crate::linalg;
use crate::model::{self, Dataset, ModelParams, Observation};
use crate::par;

/// Default number of grid cells.
pub const DEFAULT_GRID_CELLS: usize = 2000;
/// Relative shrink of `q` when sizing the grid, so the bounding interval carries
/// strictly more than `1 − q` despite rounding in the cell masses.
pub const GRID_Q_MARGIN: f64 = 1e-9;

/// Covariates for one new observation.
#[derive(Debug, Clone, PartialEq)]
pub struct NewInput {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub w: DVector<f64>,
}

impl NewInput {
    pub fn new(x: Vec<f64>, z: Vec<f64>, w: Vec<f64>) -> Self {
        Self {
            x: DVector::from_vec(x),
            z: DVector::from_vec(z),
            w: DVector::from_vec(w),
        }
    }

    pub fn from_observation(obs: &Observation, w: &DVector<f64>) -> Self {
        Self {
            x: obs.x.clone(),
            z: obs.z.clone(),
            w: w.clone(),
        }
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        let dims = params.dims();
        if self.x.len() != dims.p || self.z.len() != dims.q || self.w.len() != dims.d {
            return Err(MemoeError::Dimension(format!(
                "input has (p, q, d) = ({}, {}, {}), model expects ({}, {}, {})",
                self.x.len(),
                self.z.len(),
                self.w.len(),
                dims.p,
                dims.q,
                dims.d
            )));
        }
        if self.x.iter().chain(self.z.iter()).chain(self.w.iter()).any(|v| !v.is_finite()) {
            return Err(MemoeError::Input("non-finite covariate".into()));
        }
        Ok(())
    }
}

/// Gaussian mixture for a new response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMixture {
    pub pi: DVector<f64>,
    /// Component means `Γ_k = x·β_k + z·κ w`.
    pub mean: DVector<f64>,
    /// Component variances `b_k²`.
    pub var: DVector<f64>,
}

impl PredictiveMixture {
    pub fn new(pi: Vec<f64>, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if pi.len() != mean.len() || pi.len() != var.len() || pi.is_empty() {
            return Err(MemoeError::Dimension("mixture components differ in length".into()));
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(MemoeError::Domain("mixture variances must be positive".into()));
        }
        let total: f64 = pi.iter().sum();
        if pi.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(MemoeError::Domain("mixture weights must form a distribution".into()));
        }
        Ok(Self {
            pi: DVector::from_vec(pi),
            mean: DVector::from_vec(mean),
            var: DVector::from_vec(var),
        })
    }

    pub fn n_components(&self) -> usize {
        self.pi.len()
    }

    pub fn density(&self, y: f64) -> f64 {
        (0..self.n_components())
            .map(|k| self.pi[k] * model::normal_logpdf(y, self.mean[k], self.var[k]).exp())
            .sum()
    }

    /// Mixture probability of `[lo, hi]`.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        (0..self.n_components())
            .map(|k| self.pi[k] * normal_interval_mass(lo, hi, self.mean[k], self.var[k].sqrt()))
            .sum()
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `P(lo ≤ Y ≤ hi)` for `Y ~ N(mean, sd²)`, using the upper tail on the right of the mean.
fn normal_interval_mass(lo: f64, hi: f64, mean: f64, sd: f64) -> f64 {
    let n = std_normal();
    let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
    if a > 0.0 {
        n.sf(a) - n.sf(b)
    } else {
        n.cdf(b) - n.cdf(a)
    }
}

/// `Φ⁻¹(1 − q/2)`, polished by Newton steps on the CDF so the central interval
/// carries `1 − q` to rounding accuracy.
pub fn central_quantile(q: f64) -> f64 {
    let n = std_normal();
    let mut c = n.inverse_cdf(1.0 - q / 2.0);
    for _ in 0..3 {
        c -= (n.sf(c) - q / 2.0) / -n.pdf(c);
    }
    c
}

/// Predictive mixture at a new input. Estimation-variance terms use the design
/// sums frozen at fit time.
pub fn predictive_mixture(input: &NewInput, params: &ModelParams, sums: &DesignSums) -> Result<PredictiveMixture> {
    input.check(params)?;
    let k = params.n_experts();
    if sums.expert_gram.len() != k {
        return Err(MemoeError::Dimension("design sums do not match expert count".into()));
    }
    let pi = model::gate_probs(&params.gating.input(&input.x, &input.z), &params.alpha);
    let re_mean = input.z.dot(&(&params.kappa * &input.w));
    let (w_inv, ridged) = linalg::inverse_spd_ridge(&sums.w_gram);
    if ridged {
        warn!("subject covariate Gram matrix is singular; ridge added");
    }
    let z_var = linalg::quad_form(&params.sigma, &input.z);
    let v_kappa = z_var * linalg::quad_form(&w_inv, &input.w);
    let mut mean = DVector::zeros(k);
    let mut var = DVector::zeros(k);
    for kk in 0..k {
        let (g_inv, ridged) = linalg::inverse_spd_ridge(&sums.expert_gram[kk]);
        if ridged {
            warn!("expert {kk}: weighted design Gram matrix is singular; ridge added");
        }
        mean[kk] = params.beta.row(kk).transpose().dot(&input.x) + re_mean;
        var[kk] = z_var + params.sigma2[kk] + linalg::quad_form(&g_inv, &input.x) + v_kappa;
    }
    Ok(PredictiveMixture { pi, mean, var })
}

fn top_expert(input: &NewInput, params: &ModelParams) -> usize {
    let pi = model::gate_probs(&params.gating.input(&input.x, &input.z), &params.alpha);
    let mut best = 0;
    for k in 1..pi.len() {
        if pi[k] > pi[best] {
            best = k;
        }
    }
    best
}

/// Mean of the most probable expert for a new subject (`u` at its prior mean
/// `κ w`); ties go to the lowest index.
pub fn point_predict(input: &NewInput, params: &ModelParams) -> Result<f64> {
    input.check(params)?;
    let k = top_expert(input, params);
    Ok(params.beta.row(k).transpose().dot(&input.x) + input.z.dot(&(&params.kappa * &input.w)))
}

/// Point prediction for a subject seen in training, using its fitted mode `û`.
pub fn point_predict_known(input: &NewInput, params: &ModelParams, u_hat: &DVector<f64>) -> Result<f64> {
    input.check(params)?;
    if u_hat.len() != input.z.len() {
        return Err(MemoeError::Dimension(format!("mode has length {}, expected {}", u_hat.len(), input.z.len())));
    }
    let k = top_expert(input, params);
    Ok(params.beta.row(k).transpose().dot(&input.x) + input.z.dot(u_hat))
}

/// Random-effect modes of the training subjects, keyed by subject id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectEffects(pub BTreeMap<String, DVector<f64>>);

impl SubjectEffects {
    pub fn from_fitted(fitted: &FittedModel) -> Self {
        Self(
            fitted
                .subject_ids
                .iter()
                .zip(&fitted.posteriors)
                .map(|(id, p)| (id.clone(), p.u_hat.clone()))
                .collect(),
        )
    }

    pub fn get(&self, id: &str) -> Option<&DVector<f64>> {
        self.0.get(id)
    }

    /// [`point_predict_known`] when `id` was seen in training, else [`point_predict`].
    pub fn predict(&self, id: &str, input: &NewInput, params: &ModelParams) -> Result<f64> {
        match self.get(id) {
            Some(u) => point_predict_known(input, params, u),
            None => point_predict(input, params),
        }
    }
}

/// Union of disjoint intervals carrying at least `1 − q` predictive mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Sorted, disjoint `[lo, hi]` intervals.
    pub intervals: Vec<(f64, f64)>,
    pub achieved_mass: f64,
    pub q: f64,
    pub cells: usize,
    pub delta: f64,
    pub bounds: (f64, f64),
}

impl PredictionSet {
    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    pub fn contains(&self, y: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= y && y <= hi)
    }
}

/// Grid approximation to the highest-density region of `mixture`.
///
/// The bounding interval spans every component's central `1 − q` interval. It is
/// cut into `cells` equal cells whose exact masses come from normal CDF
/// differences; cells are taken in decreasing midpoint density (ties by index)
/// until the mass reaches `1 − q`, and adjacent cells are merged.
pub fn prediction_set(mixture: &PredictiveMixture, q: f64, cells: usize) -> Result<PredictionSet> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MemoeError::Domain(format!("q must lie in (0, 1), got {q}")));
    }
    if cells < 10 {
        return Err(MemoeError::Domain(format!("grid needs at least 10 cells, got {cells}")));
    }
    let c_q = central_quantile(q * (1.0 - GRID_Q_MARGIN));
    let sd: Vec<f64> = mixture.var.iter().map(|v| v.sqrt()).collect();
    let k = mixture.n_components();
    let lo = (0..k).map(|i| mixture.mean[i] - c_q * sd[i]).fold(f64::INFINITY, f64::min);
    let hi = (0..k).map(|i| mixture.mean[i] + c_q * sd[i]).fold(f64::NEG_INFINITY, f64::max);
    let delta = (hi - lo) / cells as f64;
    let edge = |r: usize| if r == cells { hi } else { lo + r as f64 * delta };

    let mut mass = vec![0.0; cells];
    let mut height = vec![0.0; cells];
    for r in 0..cells {
        let (a, b) = (edge(r), edge(r + 1));
        mass[r] = mixture.mass(a, b);
        height[r] = mixture.density(0.5 * (a + b));
    }
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| height[b].total_cmp(&height[a]).then(a.cmp(&b)));

    let target = 1.0 - q;
    let mut selected = vec![false; cells];
    let mut acc = 0.0;
    for &r in &order {
        selected[r] = true;
        acc += mass[r];
        if acc >= target {
            break;
        }
    }
    if acc < target {
        return Err(MemoeError::Domain(format!(
            "bounding interval carries only {acc:.6} mass, below {target}"
        )));
    }

    let mut intervals = Vec::new();
    let mut r = 0;
    while r < cells {
        if !selected[r] {
            r += 1;
            continue;
        }
        let start = r;
        while r < cells && selected[r] {
            r += 1;
        }
        intervals.push((edge(start), edge(r)));
    }
    Ok(PredictionSet {
        intervals,
        achieved_mass: acc,
        q,
        cells,
        delta,
        bounds: (lo, hi),
    })
}

/// Predictive mixture followed by [`prediction_set`].
pub fn prediction_set_for(
    input: &NewInput,
    params: &ModelParams,
    sums: &DesignSums,
    q: f64,
    cells: usize,
) -> Result<PredictionSet> {
    prediction_set(&predictive_mixture(input, params, sums)?, q, cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of responses inside their prediction set.
    pub coverage: f64,
    /// Mean total length of the prediction sets.
    pub mean_length: f64,
    pub n: usize,
}

fn test_inputs(test: &Dataset) -> Vec<(NewInput, f64)> {
    test.subjects()
        .iter()
        .flat_map(|s| s.obs.iter().map(move |o| (NewInput::from_observation(o, &s.w), o.y)))
        .collect()
}

/// Empirical coverage and mean length of the `(1 − q)` prediction sets over every test observation.
pub fn coverage_eval(test: &Dataset, params: &ModelParams, sums: &DesignSums, q: f64, cells: usize) -> Result<CoverageReport> {
    let inputs = test_inputs(test);
    if inputs.is_empty() {
        return Err(MemoeError::Input("empty test set".into()));
    }
    let results = par::map(&inputs, |(input, y)| {
        prediction_set_for(input, params, sums, q, cells).map(|set| (set.contains(*y), set.total_length()))
    });
    let mut hits = 0usize;
    let mut lengths = Vec::with_capacity(results.len());
    for r in results {
        let (inside, len) = r?;
        hits += inside as usize;
        lengths.push(len);
    }
    let n = lengths.len();
    Ok(CoverageReport {
        coverage: hits as f64 / n as f64,
        mean_length: linalg::pairwise_sum(&lengths) / n as f64,
        n,
    })
}

/// Mean squared error of point predictions over every test observation; subjects
/// present in `effects` use their fitted modes.
pub fn pmse_with_effects(test: &Dataset, params: &ModelParams, effects: &SubjectEffects) -> Result<f64> {
    let inputs: Vec<(&str, NewInput, f64)> = test
        .subjects()
        .iter()
        .flat_map(|s| s.obs.iter().map(move |o| (s.id.as_str(), NewInput::from_observation(o, &s.w), o.y)))
        .collect();
    if inputs.is_empty() {
        return Err(MemoeError::Input("empty test set".into()));
    }
    let sq: Vec<f64> = par::map(&inputs, |(id, input, y)| effects.predict(id, input, params).map(|p| (y - p).powi(2)))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(linalg::pairwise_sum(&sq) / sq.len() as f64)
}

/// Mean squared error of [`point_predict`] over every test observation.
pub fn pmse(test: &Dataset, params: &ModelParams) -> Result<f64> {
    let inputs = test_inputs(test);
    if inputs.is_empty() {
        return Err(MemoeError::Input("empty test set".into()));
    }
    let sq: Vec<f64> = par::map(&inputs, |(input, y)| point_predict(input, params).map(|p| (y - p).powi(2)))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(linalg::pairwise_sum(&sq) / sq.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GatingFeatures;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn central_quantile_is_accurate() {
        let n = std_normal();
        for q in [0.01, 0.05, 0.2, 0.5] {
            let c = central_quantile(q);
            assert!((n.sf(c) - q / 2.0).abs() < 1e-16);
        }
    }

    fn single(mean: f64, var: f64) -> PredictiveMixture {
        PredictiveMixture::new(vec![1.0], vec![mean], vec![var]).unwrap()
    }

    fn params_1d(beta: &[f64], alpha: &[f64]) -> ModelParams {
        let k = beta.len();
        ModelParams {
            alpha: DMatrix::from_row_slice(k, 1, alpha),
            beta: DMatrix::from_row_slice(k, 1, beta),
            sigma2: DVector::from_element(k, 1.0),
            kappa: DMatrix::from_element(1, 1, 0.5),
            sigma: DMatrix::from_element(1, 1, 2.0),
            gating: GatingFeatures::X,
        }
    }

    #[test]
    fn single_gaussian_set_is_central_interval() {
        let (mean, var) = (1.5, 4.0);
        let set = prediction_set(&single(mean, var), 0.05, 2000).unwrap();
        assert_eq!(set.intervals.len(), 1);
        let (lo, hi) = set.intervals[0];
        let half = 1.959_964 * 2.0;
        assert!((lo - (mean - half)).abs() <= set.delta + 1e-9);
        assert!((hi - (mean + half)).abs() <= set.delta + 1e-9);
        let fmax = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
        assert!(set.achieved_mass >= 0.95);
        assert!(set.achieved_mass <= 0.95 + 2.0 * set.delta * fmax);
    }

    #[test]
    fn two_spikes_give_two_intervals() {
        let m = PredictiveMixture::new(vec![0.5, 0.5], vec![-10.0, 10.0], vec![1.0, 1.0]).unwrap();
        let set = prediction_set(&m, 0.05, 2000).unwrap();
        assert_eq!(set.intervals.len(), 2);
        // Each spike needs 0.475 of the mixture, i.e. 0.95 of its own mass.
        let half = central_quantile(1.0 - 0.475 / 0.5);
        assert_relative_eq!(half, 1.959_964, epsilon = 1e-6);
        let (a, b) = (set.intervals[0], set.intervals[1]);
        for (iv, c) in [(a, -10.0), (b, 10.0)] {
            assert!((iv.0 - (c - half)).abs() <= 2.0 * set.delta);
            assert!((iv.1 - (c + half)).abs() <= 2.0 * set.delta);
        }
    }

    #[test]
    fn selection_is_minimal_and_level_monotone() {
        let m = PredictiveMixture::new(vec![0.3, 0.7], vec![0.0, 3.0], vec![1.0, 2.0]).unwrap();
        let wide = prediction_set(&m, 0.05, 2000).unwrap();
        let narrow = prediction_set(&m, 0.5, 2000).unwrap();
        assert!(narrow.total_length() < wide.total_length());
        let smallest_cell = wide
            .intervals
            .iter()
            .flat_map(|&(lo, hi)| [m.mass(lo, lo + wide.delta), m.mass(hi - wide.delta, hi)])
            .fold(f64::INFINITY, f64::min);
        assert!(wide.achieved_mass - smallest_cell < 0.95);
    }

    #[test]
    fn mixture_variance_terms() {
        let params = params_1d(&[2.0], &[0.0]);
        let sums = DesignSums {
            expert_gram: vec![DMatrix::from_element(1, 1, 1e300)],
            w_gram: DMatrix::from_element(1, 1, 1e300),
        };
        let input = NewInput::new(vec![1.0], vec![0.0], vec![1.0]);
        let m = predictive_mixture(&input, &params, &sums).unwrap();
        assert_relative_eq!(m.var[0], 1.0, epsilon = 1e-12);

        // q = d = 1: V(κ) = w² z² s / W by hand.
        let sums = DesignSums {
            expert_gram: vec![DMatrix::from_element(1, 1, 4.0)],
            w_gram: DMatrix::from_element(1, 1, 8.0),
        };
        let input = NewInput::new(vec![3.0], vec![1.5], vec![2.0]);
        let m = predictive_mixture(&input, &params, &sums).unwrap();
        let expected = 1.5 * 1.5 * 2.0 + 1.0 + 9.0 / 4.0 + 4.0 * 2.25 * 2.0 / 8.0;
        assert_relative_eq!(m.var[0], expected, epsilon = 1e-12);
        assert_relative_eq!(m.mean[0], 6.0 + 1.5 * 0.5 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn point_prediction_rules() {
        let input = NewInput::new(vec![1.0], vec![0.0], vec![1.0]);
        let p = params_1d(&[4.0, -7.0], &[(0.9f64 / 0.1).ln(), 0.0]);
        assert_eq!(point_predict(&input, &p).unwrap(), 4.0);
        let p = params_1d(&[4.0, -7.0], &[0.0, 0.0]);
        assert_eq!(point_predict(&input, &p).unwrap(), 4.0);
        let p = params_1d(&[4.0, -7.0], &[-1.0, 0.0]);
        assert_eq!(point_predict(&input, &p).unwrap(), -7.0);
    }

    proptest! {
        #[test]
        fn mass_meets_level_and_sets_are_disjoint(
            w in proptest::collection::vec(0.05f64..1.0, 1..4),
            means in proptest::collection::vec(-20.0f64..20.0, 3),
            sds in proptest::collection::vec(0.1f64..5.0, 3),
            qi in 0usize..4,
        ) {
            let k = w.len();
            let total: f64 = w.iter().sum();
            let pi: Vec<f64> = w.iter().map(|v| v / total).collect();
            let m = PredictiveMixture::new(pi, means[..k].to_vec(), sds[..k].iter().map(|s| s * s).collect()).unwrap();
            let q = [0.01, 0.05, 0.2, 0.5][qi];
            let set = prediction_set(&m, q, 2000).unwrap();
            prop_assert!(set.achieved_mass >= 1.0 - q);
            for pair in set.intervals.windows(2) {
                prop_assert!(pair[0].1 < pair[1].0);
            }
            prop_assert!(set.intervals.iter().all(|(lo, hi)| lo < hi));
        }

        #[test]
        fn affine_equivariance(a in 0.2f64..5.0, b in -10.0f64..10.0) {
            let m = PredictiveMixture::new(vec![0.4, 0.6], vec![-2.0, 3.0], vec![1.0, 0.5]).unwrap();
            let t = PredictiveMixture::new(vec![0.4, 0.6], vec![-2.0 * a + b, 3.0 * a + b], vec![a * a, 0.5 * a * a]).unwrap();
            let s = prediction_set(&m, 0.1, 2000).unwrap();
            let st = prediction_set(&t, 0.1, 2000).unwrap();
            prop_assert_eq!(s.intervals.len(), st.intervals.len());
            for (x, y) in s.intervals.iter().zip(&st.intervals) {
                prop_assert!((x.0 * a + b - y.0).abs() <= 2.0 * st.delta);
                prop_assert!((x.1 * a + b - y.1).abs() <= 2.0 * st.delta);
            }
        }
    }
}
