//! Evaluation report: one row per (suite, method, K, seed) cell plus
//! mean/std aggregation over seeds and composition-weight summaries.

use serde::Serialize;

use crate::compose::CompositionWeights;
use crate::tasks::KShot;

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub suite: String,
    pub regime: String,
    pub method: String,
    /// Ablation qualifier (`n=3`, `r=8`, ...); empty for plain runs.
    pub detail: String,
    pub k: KShot,
    pub seed: u64,
    pub accuracy: f64,
    pub theta: usize,
}

/// Mean softmax weight of each upstream task across sites, for one learned
/// cell.
#[derive(Debug, Clone, Serialize)]
pub struct WeightSummary {
    pub suite: String,
    pub method: String,
    pub detail: String,
    pub k: KShot,
    pub seed: u64,
    pub upstream: Vec<String>,
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellFailure {
    pub suite: String,
    pub method: String,
    pub k: KShot,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub suite: String,
    pub method: String,
    pub detail: String,
    pub k: KShot,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub theta: usize,
}

/// Full per-site weights of one learned cell, kept out of the JSON report
/// and exported as heatmap grids instead.
#[derive(Debug, Clone)]
pub struct WeightDump {
    pub tag: String,
    pub weights: CompositionWeights,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub weight_summaries: Vec<WeightSummary>,
    pub weight_dumps: Vec<WeightDump>,
    pub failures: Vec<CellFailure>,
    pub incomplete: bool,
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.weight_summaries.extend(other.weight_summaries);
        self.weight_dumps.extend(other.weight_dumps);
        self.failures.extend(other.failures);
        self.incomplete |= other.incomplete;
    }

    /// Mean and population std over seeds, grouped by (suite, method,
    /// detail, k) in first-appearance order.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<(String, String, String, KShot)> = Vec::new();
        for row in &self.rows {
            let key = (
                row.suite.clone(),
                row.method.clone(),
                row.detail.clone(),
                row.k,
            );
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(suite, method, detail, k)| {
                let cells: Vec<&ReportRow> = self
                    .rows
                    .iter()
                    .filter(|r| {
                        r.suite == suite && r.method == method && r.detail == detail && r.k == k
                    })
                    .collect();
                let n = cells.len() as f64;
                let mean = cells.iter().map(|r| r.accuracy).sum::<f64>() / n;
                let var = cells
                    .iter()
                    .map(|r| (r.accuracy - mean) * (r.accuracy - mean))
                    .sum::<f64>()
                    / n;
                AggregateRow {
                    suite,
                    method,
                    detail,
                    k,
                    mean,
                    std: var.sqrt(),
                    seeds: cells.len(),
                    theta: cells[0].theta,
                }
            })
            .collect()
    }
}
