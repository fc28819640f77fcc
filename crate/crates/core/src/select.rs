//! Choosing the number of experts by subject-level cross-validation.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::em::{self, FitConfig};
use crate::error::{MemoeError, Result};
use crate::model::Dataset;
use crate::predict;

/// Outcome of one (K, fold) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FoldOutcome {
    Rmse(f64),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub folds: Vec<FoldOutcome>,
    /// Mean RMSE over the folds that succeeded.
    pub mean_rmse: Option<f64>,
    pub disqualified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub selected: usize,
    pub scores: Vec<KScore>,
    /// Fold index of every subject.
    pub assignment: Vec<usize>,
}

/// Assign subjects to `folds` folds of near-equal size after a seeded shuffle.
pub fn fold_assignment(n_subjects: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > n_subjects {
        return Err(MemoeError::Input(format!("{folds} folds for {n_subjects} subjects")));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut em::start_rng(seed, usize::MAX));
    let mut out = vec![0; n_subjects];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos % folds;
    }
    Ok(out)
}

fn fold_rmse(train: &Dataset, test: &Dataset, cfg: &FitConfig) -> FoldOutcome {
    let fitted = match em::fit(train, cfg) {
        Ok(f) => f,
        Err(e) => return FoldOutcome::Failed(e.to_string()),
    };
    if let Some(k) = fitted.diagnostics.degenerate_experts.iter().position(|&d| d) {
        return FoldOutcome::Failed(format!("expert {k} lost all responsibility"));
    }
    match predict::pmse(test, &fitted.params) {
        Ok(m) => FoldOutcome::Rmse(m.sqrt()),
        Err(e) => FoldOutcome::Failed(e.to_string()),
    }
}

/// Cross-validated RMSE of point predictions for every K in `k_range`; returns
/// the K with the smallest mean RMSE. A K with more than half of its folds failed
/// is disqualified.
pub fn select_k(dataset: &Dataset, k_range: &[usize], folds: usize, cfg: &FitConfig, seed: u64) -> Result<SelectionTable> {
    if k_range.is_empty() {
        return Err(MemoeError::Input("empty K range".into()));
    }
    let assignment = fold_assignment(dataset.n_subjects(), folds, seed)?;
    let splits: Vec<(Dataset, Dataset)> = (0..folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..dataset.n_subjects()).partition(|&i| assignment[i] == f);
            Ok((dataset.select(&train)?, dataset.select(&test)?))
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let kcfg = FitConfig { k, ..cfg.clone() };
        kcfg.validate()?;
        let outcomes: Vec<FoldOutcome> = splits.iter().map(|(train, test)| fold_rmse(train, test, &kcfg)).collect();
        let ok: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| match o {
                FoldOutcome::Rmse(r) => Some(*r),
                FoldOutcome::Failed(_) => None,
            })
            .collect();
        let failed = folds - ok.len();
        let disqualified = 2 * failed > folds;
        if failed > 0 {
            warn!("K={k}: {failed} of {folds} folds failed");
        }
        scores.push(KScore {
            k,
            mean_rmse: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
            folds: outcomes,
            disqualified,
        });
    }
    let selected = scores
        .iter()
        .filter(|s| !s.disqualified)
        .filter_map(|s| s.mean_rmse.map(|r| (s.k, r)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .ok_or_else(|| MemoeError::Fit("every K was disqualified".into()))?;
    Ok(SelectionTable {
        selected,
        scores,
        assignment,
    })
}
