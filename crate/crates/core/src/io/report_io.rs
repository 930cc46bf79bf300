//! Report serialization.
//!
//! CSV schema v1 (fixed column order, one header comment line):
//!   rows:       suite,regime,method,detail,k,seed,accuracy,theta
//!   aggregates: suite,method,detail,k,mean,std,seeds,theta
//!   weights:    suite,method,detail,k,seed,upstream,mean_weight
//! Accuracies are printed with six decimals; identical runs produce
//! byte-identical files. The JSON report carries rows, aggregates, weight
//! summaries, failures, and the config hash in one machine-readable object.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::EvalReport;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn header(kind: &str, config_hash: &str) -> String {
    format!("# lora-compose {kind} schema={REPORT_SCHEMA_VERSION} config={config_hash}\n")
}

pub fn report_csv(report: &EvalReport, config_hash: &str) -> String {
    let mut out = header("report", config_hash);
    out.push_str("suite,regime,method,detail,k,seed,accuracy,theta\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{}\n",
            r.suite, r.regime, r.method, r.detail, r.k, r.seed, r.accuracy, r.theta
        ));
    }
    out
}

pub fn aggregates_csv(report: &EvalReport, config_hash: &str) -> String {
    let mut out = header("aggregates", config_hash);
    out.push_str("suite,method,detail,k,mean,std,seeds,theta\n");
    for a in report.aggregates() {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{},{}\n",
            a.suite, a.method, a.detail, a.k, a.mean, a.std, a.seeds, a.theta
        ));
    }
    out
}

/// Long-format per-upstream mean weights of every learned cell.
pub fn weight_summaries_csv(report: &EvalReport, config_hash: &str) -> String {
    let mut out = header("weights", config_hash);
    out.push_str("suite,method,detail,k,seed,upstream,mean_weight\n");
    for w in &report.weight_summaries {
        for (upstream, weight) in w.upstream.iter().zip(&w.mean_weights) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6}\n",
                w.suite, w.method, w.detail, w.k, w.seed, upstream, weight
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct JsonReport<'a> {
    schema: u32,
    config: &'a str,
    incomplete: bool,
    rows: &'a [crate::train::ReportRow],
    aggregates: Vec<crate::train::AggregateRow>,
    weight_summaries: &'a [crate::train::WeightSummary],
    failures: &'a [crate::train::CellFailure],
}

pub fn report_json(report: &EvalReport, config_hash: &str) -> Result<String> {
    let json = JsonReport {
        schema: REPORT_SCHEMA_VERSION,
        config: config_hash,
        incomplete: report.incomplete,
        rows: &report.rows,
        aggregates: report.aggregates(),
        weight_summaries: &report.weight_summaries,
        failures: &report.failures,
    };
    serde_json::to_string_pretty(&json).map_err(|e| Error::Format(format!("report json: {e}")))
}
