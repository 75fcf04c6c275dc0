//! Replay report types and their JSON/CSV serialization.
//!
//! CSV schema (versioned in the leading comment line):
//! `step,layer,head,metric,value`. Vector-valued step data (per-token score
//! differences) is flattened to summary metrics in CSV; the JSON form keeps
//! the full vectors.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_SCHEMA_VERSION: &str = "orthoquant-report v1";

/// Metrics for one decode step of one (layer, query head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// `‖attn_fp − attn_q‖₂`.
    pub actual_deviation: f64,
    pub bound_stated: f64,
    pub bound_proof: f64,
    pub value_error_sum: f64,
    pub key_ip_error_sum: f64,
    /// Post-softmax `|weight_fp − weight_q|` per cached token.
    pub score_abs_diff: Vec<f64>,
    /// Pre-softmax `|logit_fp − logit_q|` per cached token.
    pub logit_abs_diff: Vec<f64>,
}

/// All decode steps of one (layer, query head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub layer: usize,
    pub query_head: usize,
    pub steps: Vec<StepReport>,
}

/// Pooled statistics of a replay under one quantizer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSummary {
    pub label: String,
    pub mean_score_diff: f64,
    pub p95_score_diff: f64,
    pub max_score_diff: f64,
    pub mean_actual_deviation: f64,
    pub max_actual_deviation: f64,
    pub reports: Vec<DeviationReport>,
}

impl QuantizerSummary {
    pub fn from_reports(label: &str, reports: Vec<DeviationReport>) -> Self {
        let mut diffs: Vec<f64> = Vec::new();
        let mut deviations: Vec<f64> = Vec::new();
        for report in &reports {
            for step in &report.steps {
                diffs.extend_from_slice(&step.score_abs_diff);
                deviations.push(step.actual_deviation);
            }
        }
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let max = |xs: &[f64]| xs.iter().copied().fold(0.0f64, f64::max);
        Self {
            label: label.to_string(),
            mean_score_diff: mean(&diffs),
            p95_score_diff: percentile(&mut diffs.clone(), 0.95),
            max_score_diff: max(&diffs),
            mean_actual_deviation: mean(&deviations),
            max_actual_deviation: max(&deviations),
            reports,
        }
    }
}

/// Primary quantizer vs baseline over the same trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub primary: QuantizerSummary,
    pub baseline: QuantizerSummary,
}

/// Lower-nearest-rank percentile of a sample (deterministic).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let idx = ((values.len() as f64 - 1.0) * q).ceil() as usize;
    values[idx.min(values.len() - 1)]
}

fn step_metrics(step: &StepReport) -> Vec<(&'static str, f64)> {
    let mut scores = step.score_abs_diff.clone();
    let mut logits = step.logit_abs_diff.clone();
    let n = scores.len().max(1) as f64;
    vec![
        ("actual_deviation", step.actual_deviation),
        ("bound_stated", step.bound_stated),
        ("bound_proof", step.bound_proof),
        ("value_error_sum", step.value_error_sum),
        ("key_ip_error_sum", step.key_ip_error_sum),
        ("score_diff_mean", step.score_abs_diff.iter().sum::<f64>() / n),
        (
            "score_diff_max",
            step.score_abs_diff.iter().copied().fold(0.0, f64::max),
        ),
        ("score_diff_p95", percentile(&mut scores, 0.95)),
        ("logit_diff_mean", step.logit_abs_diff.iter().sum::<f64>() / n),
        ("logit_diff_p95", percentile(&mut logits, 0.95)),
    ]
}

/// Write reports as CSV rows `step,layer,head,metric,value`.
pub fn write_csv(reports: &[DeviationReport], path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "# {CSV_SCHEMA_VERSION}")?;
    writeln!(out, "step,layer,head,metric,value")?;
    for report in reports {
        for step in &report.steps {
            for (metric, value) in step_metrics(step) {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    step.step, report.layer, report.query_head, metric, value
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
