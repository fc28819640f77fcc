//! Simulation designs, baseline fits, label alignment and study scoring.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::em::{self, FitConfig, FittedModel, RandomEffects};
use crate::error::{MemoeError, Result};
use crate::model::{self, Dataset, Observation, Subject};
use crate::predict::{self, SubjectEffects};
use crate::io::{fmt_f64, LongCsvSchema};

const P: usize = 5;

const BETA: [[f64; P]; 3] = [
    [3.0, -3.0, 1.0, -1.0, 0.0],
    [-5.0, 5.0, 0.0, 2.0, -2.0],
    [1.0, -2.0, 3.0, 1.0, -4.0],
];
const ALPHA: [[f64; P]; 3] = [
    [6.0, -5.0, 3.0, 2.0, 1.0],
    [-4.0, 2.0, -7.0, 5.0, -3.0],
    [2.0, -1.0, 4.0, -3.0, 6.0],
];
const KAPPA_CASE2: [f64; 4] = [2.0, 5.0, -1.0, 5.0];
const KAPPA_CASE3: [f64; 4] = [5.0, -3.0, 2.0, 1.0];
const SIGMA_CASE3: [f64; 3] = [1.0, 1.2, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimDesign {
    Example1,
    Example2,
    Example3Case1,
    Example3Case2,
    Example3Case3,
}

impl SimDesign {
    pub const ALL: [SimDesign; 5] = [
        Self::Example1,
        Self::Example2,
        Self::Example3Case1,
        Self::Example3Case2,
        Self::Example3Case3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Example1 => "example1",
            Self::Example2 => "example2",
            Self::Example3Case1 => "example3_case1",
            Self::Example3Case2 => "example3_case2",
            Self::Example3Case3 => "example3_case3",
        }
    }

    pub fn n_experts(self) -> usize {
        match self {
            Self::Example2 => 1,
            Self::Example3Case3 => 3,
            _ => 2,
        }
    }

    /// How the 80/20 train/test split is drawn.
    pub fn truth(self, tau: f64) -> Truth {
        let k = self.n_experts();
        let rows = |src: &[[f64; P]; 3]| DMatrix::from_fn(k, P, |r, c| src[r][c]);
        let (beta, alpha) = match self {
            Self::Example2 => (rows(&BETA), DMatrix::zeros(1, P)),
            _ => (rows(&BETA), rows(&ALPHA)),
        };
        let sigma2 = match self {
            Self::Example3Case3 => DVector::from_fn(3, |r, _| SIGMA_CASE3[r] * SIGMA_CASE3[r]),
            _ => DVector::from_element(k, 1.0),
        };
        let (kappa, tau) = match self {
            Self::Example1 => (DMatrix::zeros(1, 1), 0.0),
            Self::Example2 => (DMatrix::zeros(1, 1), tau),
            Self::Example3Case1 => (DMatrix::zeros(1, 4), tau),
            Self::Example3Case2 => (DMatrix::from_row_slice(1, 4, &KAPPA_CASE2), tau),
            Self::Example3Case3 => (DMatrix::from_row_slice(1, 4, &KAPPA_CASE3), tau),
        };
        Truth {
            alpha,
            beta,
            sigma2,
            kappa,
            tau,
        }
    }

    /// Column layout of generated data: `x1..x5` without intercept, a random
    /// intercept, and `w` = (1, w1, ...).
    pub fn schema(self) -> LongCsvSchema {
        LongCsvSchema {
            x_cols: (1..=P).map(|c| format!("x{c}")).collect(),
            add_intercept_x: false,
            w_cols: (1..self.truth(0.0).kappa.ncols()).map(|c| format!("w{c}")).collect(),
            ..LongCsvSchema::default()
        }
    }

    fn layout(self) -> (usize, usize) {
        match self {
            Self::Example1 => (1500, 1),
            _ => (100, 15),
        }
    }

    /// Draw one dataset. Per subject the draws are, in order: the non-constant
    /// entries of `w`, the random-effect noise, then per observation `x`, the
    /// expert label and the response noise.
    pub fn generate(self, tau: f64, rng: &mut impl Rng) -> Result<Simulated> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(MemoeError::InvalidParams(format!("tau must be non-negative, got {tau}")));
        }
        let truth = self.truth(tau);
        let (n_subjects, n_per) = self.layout();
        let d = truth.kappa.ncols();
        let tau_sd = truth.tau.sqrt();
        let mut subjects = Vec::with_capacity(n_subjects);
        let mut labels = Vec::with_capacity(n_subjects * n_per);
        let mut effects = Vec::with_capacity(n_subjects);
        for i in 0..n_subjects {
            let mut w = vec![1.0; d];
            for v in w.iter_mut().skip(1) {
                *v = StandardNormal.sample(rng);
            }
            let noise: f64 = match self {
                Self::Example1 => 0.0,
                _ => StandardNormal.sample(rng),
            };
            let u = truth.kappa.row(0).transpose().dot(&DVector::from_column_slice(&w)) + tau_sd * noise;
            effects.push(u);
            let mut obs = Vec::with_capacity(n_per);
            for _ in 0..n_per {
                let x: Vec<f64> = (0..P).map(|_| StandardNormal.sample(rng)).collect();
                let xv = DVector::from_column_slice(&x);
                let k = if truth.beta.nrows() == 1 {
                    0
                } else {
                    let pi = model::gate_probs(&xv, &truth.alpha);
                    sample_index(pi.as_slice(), rng.gen::<f64>())
                };
                let eps: f64 = StandardNormal.sample(rng);
                let y = truth.beta.row(k).transpose().dot(&xv) + u + truth.sigma2[k].sqrt() * eps;
                labels.push(k);
                obs.push(Observation::new(y, x, vec![1.0]));
            }
            subjects.push(Subject::new(format!("{i}"), w, obs));
        }
        Ok(Simulated {
            dataset: Dataset::new(subjects)?,
            labels,
            effects,
            truth,
        })
    }
}

impl fmt::Display for SimDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimDesign {
    type Err = MemoeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| MemoeError::Config(format!("unknown design '{s}'")))
    }
}

fn sample_index(probs: &[f64], draw: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Data-generating parameters. `alpha` has one row per expert as used in
/// generation (not reference-coded); `kappa` is `1 × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub sigma2: DVector<f64>,
    pub kappa: DMatrix<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    /// True expert label per observation, in dataset order.
    pub labels: Vec<usize>,
    /// True random effect per subject.
    pub effects: Vec<f64>,
    pub truth: Truth,
}

/// Seeded generator for replication `rep`.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

pub fn gen_example1(seed: u64) -> Result<Simulated> {
    SimDesign::Example1.generate(0.0, &mut rep_rng(seed, 0))
}

pub fn gen_example2(tau: f64, seed: u64) -> Result<Simulated> {
    SimDesign::Example2.generate(tau, &mut rep_rng(seed, 0))
}

pub fn gen_example3(case: u8, tau: f64, seed: u64) -> Result<Simulated> {
    let design = match case {
        1 => SimDesign::Example3Case1,
        2 => SimDesign::Example3Case2,
        3 => SimDesign::Example3Case3,
        other => return Err(MemoeError::Config(format!("unknown Example 3 case {other}"))),
    };
    design.generate(tau, &mut rep_rng(seed, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Memoe,
    Remoe,
    Moe,
    Lmm,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Memoe, Self::Remoe, Self::Moe, Self::Lmm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Memoe => "memoe",
            Self::Remoe => "remoe",
            Self::Moe => "moe",
            Self::Lmm => "lmm",
        }
    }

    /// Fit configuration for this method given the full-model config.
    pub fn config(self, base: &FitConfig) -> FitConfig {
        let mut cfg = base.clone();
        match self {
            Self::Memoe => cfg.random_effects = RandomEffects::Full,
            Self::Remoe => cfg.random_effects = RandomEffects::ZeroMean,
            Self::Moe => cfg.random_effects = RandomEffects::Off,
            Self::Lmm => {
                cfg.k = 1;
                cfg.random_effects = RandomEffects::Full;
            }
        }
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MemoeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MemoeError::Config(format!("unknown method '{s}'")))
    }
}

/// Fit `method` as a restricted version of the full model.
pub fn fit_baseline(dataset: &Dataset, method: Method, cfg: &FitConfig) -> Result<FittedModel> {
    em::fit(dataset, &method.config(cfg))
}

fn beta_distance(est: &DMatrix<f64>, a: usize, reference: &DMatrix<f64>, b: usize) -> f64 {
    (est.row(a) - reference.row(b)).norm_squared()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for perm in permutations(k - 1) {
        for pos in 0..=perm.len() {
            let mut p = perm.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Permutation `perm` minimizing `Σ_k ‖β̂_{perm[k]} − β_k‖²`, so estimated expert
/// `perm[k]` plays reference expert `k`. Exhaustive search; ties go to the
/// lexicographically first permutation.
pub fn align_experts(estimated: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Vec<usize>> {
    let k = reference.nrows();
    if estimated.nrows() != k || estimated.ncols() != reference.ncols() {
        return Err(MemoeError::Dimension(format!(
            "cannot align {}x{} experts with {}x{}",
            estimated.nrows(),
            estimated.ncols(),
            k,
            reference.ncols()
        )));
    }
    if k > 8 {
        return Err(MemoeError::Dimension(format!("exhaustive alignment supports K <= 8, got {k}")));
    }
    let mut best = (f64::INFINITY, Vec::new());
    for perm in permutations(k) {
        let cost: f64 = (0..k).map(|r| beta_distance(estimated, perm[r], reference, r)).sum();
        if cost < best.0 {
            best = (cost, perm);
        }
    }
    Ok(best.1)
}

/// Nearest estimated expert for every reference expert, allowing reuse. Used
/// when the fitted model has a different number of experts (e.g. LMM).
pub fn nearest_experts(estimated: &DMatrix<f64>, reference: &DMatrix<f64>) -> Vec<usize> {
    (0..reference.nrows())
        .map(|r| {
            (0..estimated.nrows())
                .min_by(|&a, &b| {
                    beta_distance(estimated, a, reference, r).total_cmp(&beta_distance(estimated, b, reference, r))
                })
                .expect("at least one expert")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    BySubject,
    ByObservation,
}

impl FromStr for SplitPolicy {
    type Err = MemoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject" | "by_subject" => Ok(Self::BySubject),
            "observation" | "by_observation" => Ok(Self::ByObservation),
            other => Err(MemoeError::Config(format!("unknown split policy '{other}'"))),
        }
    }
}

/// Random train/test split with `round(test_frac · n)` units held out.
pub fn split(dataset: &Dataset, policy: SplitPolicy, test_frac: f64, rng: &mut impl Rng) -> Result<(Dataset, Dataset)> {
    match policy {
        SplitPolicy::BySubject => {
            let n = dataset.n_subjects();
            let n_test = (test_frac * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let (test, train) = idx.split_at(n_test);
            let (mut test, mut train) = (test.to_vec(), train.to_vec());
            test.sort_unstable();
            train.sort_unstable();
            Ok((dataset.select(&train)?, dataset.select(&test)?))
        }
        SplitPolicy::ByObservation => {
            let cells: Vec<(usize, usize)> = dataset
                .subjects()
                .iter()
                .enumerate()
                .flat_map(|(i, s)| (0..s.obs.len()).map(move |j| (i, j)))
                .collect();
            let n_test = (test_frac * cells.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..cells.len()).collect();
            order.shuffle(rng);
            let mut in_test = vec![false; cells.len()];
            for &c in &order[..n_test] {
                in_test[c] = true;
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            let mut c = 0;
            for s in dataset.subjects() {
                let (mut tr, mut te) = (Vec::new(), Vec::new());
                for o in &s.obs {
                    if in_test[c] { &mut te } else { &mut tr }.push(o.clone());
                    c += 1;
                }
                if !tr.is_empty() {
                    train.push(Subject { obs: tr, ..s.clone() });
                }
                if !te.is_empty() {
                    test.push(Subject { obs: te, ..s.clone() });
                }
            }
            Ok((Dataset::new(train)?, Dataset::new(test)?))
        }
    }
}

/// Everything measured for one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub tau: f64,
    pub rep: usize,
    pub method: Method,
    pub error: Option<String>,
    /// `β̂ − β` per reference expert after alignment.
    pub beta_dev: Vec<Vec<f64>>,
    /// Mean absolute gate-probability error over test inputs after alignment.
    pub gate_error: f64,
    pub pmse: f64,
    pub coverage: f64,
    pub mean_length: f64,
    pub loglik: f64,
    pub trace_monotone: bool,
    pub max_rel_dip: f64,
    pub max_resp_row_error: f64,
    pub min_sigma2: f64,
    pub min_sigma_eig: f64,
    pub em_iters: usize,
    pub converged: bool,
}

impl RepRecord {
    fn failed(tau: f64, rep: usize, method: Method, err: String) -> Self {
        Self {
            tau,
            rep,
            method,
            error: Some(err),
            beta_dev: Vec::new(),
            gate_error: f64::NAN,
            pmse: f64::NAN,
            coverage: f64::NAN,
            mean_length: f64::NAN,
            loglik: f64::NAN,
            trace_monotone: false,
            max_rel_dip: f64::NAN,
            max_resp_row_error: f64::NAN,
            min_sigma2: f64::NAN,
            min_sigma_eig: f64::NAN,
            em_iters: 0,
            converged: false,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: SimDesign,
    pub taus: Vec<f64>,
    pub n_reps: usize,
    pub methods: Vec<Method>,
    pub fit: FitConfig,
    pub seed: u64,
    pub test_frac: f64,
    pub split: SplitPolicy,
    /// Prediction-set level `q`.
    pub q: f64,
    pub grid_cells: usize,
    /// Failure fraction above which the study errors out.
    pub max_failure_rate: f64,
}

impl StudyConfig {
    pub fn new(design: SimDesign, taus: Vec<f64>, n_reps: usize, methods: Vec<Method>, seed: u64) -> Self {
        Self {
            design,
            taus,
            n_reps,
            methods,
            fit: FitConfig {
                seed,
                ..FitConfig::with_k(design.n_experts().max(1))
            },
            seed,
            test_frac: 0.2,
            split: SplitPolicy::ByObservation,
            q: 0.05,
            grid_cells: predict::DEFAULT_GRID_CELLS,
            max_failure_rate: 0.1,
        }
    }
}

/// True gate probabilities in reference-expert order.
fn true_gates(truth: &Truth, x: &DVector<f64>) -> DVector<f64> {
    if truth.beta.nrows() == 1 {
        DVector::from_element(1, 1.0)
    } else {
        model::gate_probs(x, &truth.alpha)
    }
}

fn score_fit(
    fitted: &FittedModel,
    train_truth: &Truth,
    test: &Dataset,
    cfg: &StudyConfig,
    tau: f64,
    rep: usize,
    method: Method,
) -> Result<RepRecord> {
    let params = &fitted.params;
    let mapping = if params.n_experts() == train_truth.beta.nrows() {
        align_experts(&params.beta, &train_truth.beta)?
    } else {
        nearest_experts(&params.beta, &train_truth.beta)
    };
    let beta_dev = mapping
        .iter()
        .enumerate()
        .map(|(r, &e)| (params.beta.row(e) - train_truth.beta.row(r)).iter().copied().collect())
        .collect();
    let mut gate_abs = Vec::new();
    for s in test.subjects() {
        for o in &s.obs {
            let est = model::gate_probs(&params.gating.input(&o.x, &o.z), &params.alpha);
            let truth = true_gates(train_truth, &o.x);
            for (r, &e) in mapping.iter().enumerate() {
                gate_abs.push((est[e] - truth[r]).abs());
            }
        }
    }
    let cov = predict::coverage_eval(test, params, &fitted.design_sums, cfg.q, cfg.grid_cells)?;
    let diag = &fitted.diagnostics;
    Ok(RepRecord {
        tau,
        rep,
        method,
        error: None,
        beta_dev,
        gate_error: gate_abs.iter().sum::<f64>() / gate_abs.len().max(1) as f64,
        pmse: predict::pmse_with_effects(test, params, &SubjectEffects::from_fitted(fitted))?,
        coverage: cov.coverage,
        mean_length: cov.mean_length,
        loglik: fitted.loglik(),
        trace_monotone: em::trace_is_monotone(&fitted.loglik_trace, em::DIP_SLACK),
        max_rel_dip: diag.max_rel_dip,
        max_resp_row_error: diag.max_resp_row_error,
        min_sigma2: diag.min_sigma2,
        min_sigma_eig: diag.min_sigma_eig,
        em_iters: fitted.em_iters,
        converged: fitted.converged,
    })
}

/// One replication at one `tau`: generate, split, fit every method and score it.
pub fn run_replication(cfg: &StudyConfig, tau: f64, rep: usize) -> Result<Vec<RepRecord>> {
    let mut rng = rep_rng(cfg.seed, rep);
    let sim = cfg.design.generate(tau, &mut rng)?;
    let mut split_rng = rep_rng(cfg.seed ^ 0x5eed_5eed_5eed_5eed, rep);
    let (train, test) = split(&sim.dataset, cfg.split, cfg.test_frac, &mut split_rng)?;
    let fit_cfg = FitConfig {
        seed: cfg.fit.seed.wrapping_add(rep as u64),
        ..cfg.fit.clone()
    };
    Ok(cfg
        .methods
        .iter()
        .map(|&method| {
            fit_baseline(&train, method, &fit_cfg)
                .and_then(|fitted| score_fit(&fitted, &sim.truth, &test, cfg, tau, rep, method))
                .unwrap_or_else(|e| RepRecord::failed(tau, rep, method, e.to_string()))
        })
        .collect())
}

/// Aggregated metrics for one method at one `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub tau: f64,
    pub method: Method,
    pub reps: usize,
    pub failures: usize,
    /// Per reference expert: mean over coordinates of `|mean_r(β̂_c − β_c)|`.
    pub beta_bias: Vec<f64>,
    /// Per reference expert: mean over coordinates of `mean_r (β̂_c − β_c)²`.
    pub beta_mse: Vec<f64>,
    /// Per reference expert and coordinate: `mean_r(β̂_c − β_c)`.
    pub beta_mean_dev: Vec<Vec<f64>>,
    pub gate_error: f64,
    pub pmse: f64,
    pub coverage: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub design: SimDesign,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<RepRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        crate::linalg::pairwise_sum(&v) / v.len() as f64
    }
}

fn summarize(tau: f64, method: Method, records: &[&RepRecord]) -> MethodSummary {
    let ok: Vec<&&RepRecord> = records.iter().filter(|r| r.ok()).collect();
    let n_ref = ok.first().map_or(0, |r| r.beta_dev.len());
    let mut beta_bias = Vec::with_capacity(n_ref);
    let mut beta_mse = Vec::with_capacity(n_ref);
    let mut beta_mean_dev = Vec::with_capacity(n_ref);
    for e in 0..n_ref {
        let p = ok[0].beta_dev[e].len();
        let mdev: Vec<f64> = (0..p).map(|c| mean(ok.iter().map(|r| r.beta_dev[e][c]))).collect();
        let mse: Vec<f64> = (0..p).map(|c| mean(ok.iter().map(|r| r.beta_dev[e][c].powi(2)))).collect();
        beta_bias.push(mean(mdev.iter().map(|v| v.abs())));
        beta_mse.push(mean(mse.into_iter()));
        beta_mean_dev.push(mdev);
    }
    MethodSummary {
        tau,
        method,
        reps: records.len(),
        failures: records.len() - ok.len(),
        beta_bias,
        beta_mse,
        beta_mean_dev,
        gate_error: mean(ok.iter().map(|r| r.gate_error)),
        pmse: mean(ok.iter().map(|r| r.pmse)),
        coverage: mean(ok.iter().map(|r| r.coverage)),
        mean_length: mean(ok.iter().map(|r| r.mean_length)),
    }
}

/// Run the full study: every `tau`, every replication, every method.
/// Replications run in parallel; records come back in (tau, rep, method) order.
pub fn run_study(cfg: &StudyConfig) -> Result<SimReport> {
    if cfg.n_reps == 0 || cfg.taus.is_empty() || cfg.methods.is_empty() {
        return Err(MemoeError::Config("study needs at least one tau, replication and method".into()));
    }
    let jobs: Vec<(f64, usize)> = cfg.taus.iter().flat_map(|&t| (0..cfg.n_reps).map(move |r| (t, r))).collect();
    let results = crate::par::map(&jobs, |&(tau, rep)| run_replication(cfg, tau, rep));
    let mut records = Vec::with_capacity(jobs.len() * cfg.methods.len());
    for r in results {
        records.extend(r?);
    }
    let mut summaries = Vec::new();
    for &tau in &cfg.taus {
        for &method in &cfg.methods {
            let recs: Vec<&RepRecord> = records.iter().filter(|r| r.tau == tau && r.method == method).collect();
            let s = summarize(tau, method, &recs);
            info!(
                "{} tau={tau} {method}: {} / {} failed, pmse {:.4}",
                cfg.design, s.failures, s.reps, s.pmse
            );
            if s.failures as f64 > cfg.max_failure_rate * s.reps as f64 {
                let first = recs.iter().find_map(|r| r.error.clone()).unwrap_or_default();
                return Err(MemoeError::Fit(format!(
                    "{} tau={tau} {method}: {} of {} replications failed (first: {first})",
                    cfg.design, s.failures, s.reps
                )));
            }
            summaries.push(s);
        }
    }
    Ok(SimReport {
        design: cfg.design,
        summaries,
        records,
    })
}

impl SimReport {
    pub fn summary(&self, tau: f64, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.tau == tau && s.method == method)
    }

    pub fn records_for(&self, tau: f64, method: Method) -> Vec<&RepRecord> {
        self.records.iter().filter(|r| r.tau == tau && r.method == method).collect()
    }

    /// One row per (tau, method, reference expert).
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "design", "tau", "method", "expert", "beta_bias", "beta_mse", "gate_error", "pmse", "coverage",
            "mean_length", "reps", "failures",
        ])?;
        for s in &self.summaries {
            for e in 0..s.beta_bias.len().max(1) {
                let (bias, mse) = (s.beta_bias.get(e).copied(), s.beta_mse.get(e).copied());
                w.write_record([
                    self.design.name().to_string(),
                    fmt_f64(s.tau),
                    s.method.name().to_string(),
                    (e + 1).to_string(),
                    fmt_f64(bias.unwrap_or(f64::NAN)),
                    fmt_f64(mse.unwrap_or(f64::NAN)),
                    fmt_f64(s.gate_error),
                    fmt_f64(s.pmse),
                    fmt_f64(s.coverage),
                    fmt_f64(s.mean_length),
                    s.reps.to_string(),
                    s.failures.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (tau, replication, method).
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "design", "tau", "rep", "method", "pmse", "coverage", "mean_length", "gate_error", "loglik", "em_iters",
            "converged", "trace_monotone", "error",
        ])?;
        for r in &self.records {
            w.write_record([
                self.design.name().to_string(),
                fmt_f64(r.tau),
                r.rep.to_string(),
                r.method.name().to_string(),
                fmt_f64(r.pmse),
                fmt_f64(r.coverage),
                fmt_f64(r.mean_length),
                fmt_f64(r.gate_error),
                fmt_f64(r.loglik),
                r.em_iters.to_string(),
                r.converged.to_string(),
                r.trace_monotone.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Decimal encoding with 17 significant digits.
