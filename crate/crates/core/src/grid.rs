//! Per-state sweep relating cross-condition similarity to how well a
//! single-state classifier separates the conditions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::{Modality, PreprocessedDataset};
use crate::protonet::{evaluate, field_queries, train_protonet, FewShotTask, ProtoConfig, ProtoError};
use crate::similarity::{cross_condition_matrices, SimilarityError};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("dataset has no states")]
    Empty,
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub state: String,
    pub modality: Modality,
    pub mean_ssim: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub seed: u64,
    pub config: ProtoConfig,
    pub rows: Vec<GridRow>,
    /// Rank correlation of `mean_ssim` against `recall`; absent when either
    /// column is constant.
    pub spearman: Option<f64>,
}

impl GridReport {
    pub fn min_ssim(&self) -> Option<&GridRow> {
        self.rows.iter().min_by(|a, b| a.mean_ssim.total_cmp(&b.mean_ssim))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<14} {:>9} {:>9} {:>9}\n", "state", "ssim", "precision", "recall");
        for r in &self.rows {
            out += &format!("{:<14} {:>9.4} {:>9.3} {:>9.3}\n", r.state, r.mean_ssim, r.precision, r.recall);
        }
        match self.spearman {
            Some(rho) => out += &format!("spearman(ssim, recall) = {rho:.4}\n"),
            None => out += "spearman(ssim, recall) undefined: constant column\n",
        }
        out
    }
}

/// Budget for the per-state models: one training episode, six field shots
/// per condition. Longer training drives every state to perfect recall on
/// this generator, which leaves nothing to rank.
pub fn sweep_config() -> ProtoConfig {
    ProtoConfig {
        epochs: 1,
        eval_shots: 6,
        ..ProtoConfig::default()
    }
}

/// Trains one classifier per state of `virtual_set` and scores it on field
/// queries from the same generator seed.
pub fn evaluate_grid(virtual_set: &PreprocessedDataset, seed: u64, config: &ProtoConfig) -> Result<GridReport, GridError> {
    if virtual_set.states.is_empty() {
        return Err(GridError::Empty);
    }
    let matrices = cross_condition_matrices(virtual_set)?;
    let mut rows = Vec::with_capacity(virtual_set.states.len());
    for (state, matrix) in virtual_set.states.iter().zip(&matrices) {
        let task = FewShotTask::generate(&[*state], seed, config.query_pool)?;
        let model = train_protonet(&task, config, seed)?.model;
        let report = evaluate(&model, &field_queries(&[*state], seed, config.eval_shots)?)?;
        rows.push(GridRow {
            state: state.id(),
            modality: state.modality,
            mean_ssim: matrix.mean_off_diagonal(),
            precision: report.precision,
            recall: report.recall,
        });
    }
    let ssim: Vec<f64> = rows.iter().map(|r| r.mean_ssim).collect();
    let recall: Vec<f64> = rows.iter().map(|r| r.recall).collect();
    Ok(GridReport {
        seed,
        config: config.clone(),
        spearman: spearman(&ssim, &recall),
        rows,
    })
}

/// 1-based ranks with ties sharing the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
