//! Masked attention replay over full-precision vs quantized caches.
//!
//! For every decode step the harness computes the causal last-row attention
//! twice — once from the original tensors, once from the materialized cache —
//! and records the output deviation, the analytic deviation bounds, and the
//! per-token attention-score differences.
//!
//! Two bound variants are tracked. Both share the structure
//! `c/(2√d) · Σᵢ|q·(kᵢ − kᵢ_deq)| + Σᵢ‖vᵢ − vᵢ_deq‖`: the stated form uses
//! `c = Σᵢ‖vᵢ − vᵢ_deq‖`, the proof form uses `c = ‖V_deq‖_F`. Only the proof
//! form is asserted against measured deviations; the other is reported.

use nalgebra::{DMatrix, DVector};

use crate::cache::{prefill, CacheConfig, KvCache};
use crate::error::{Error, Result};
use crate::report::{ComparisonReport, DeviationReport, QuantizerSummary, StepReport};
use crate::rope::apply_rope;
use crate::trace::TraceData;

/// Shape and masking of one attention head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub head_dim: usize,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            causal: true,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Stable softmax over `q·kᵢ/√d`; weights are nonnegative and sum to one.
pub fn softmax_weights(q: &DVector<f64>, keys: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = keys.nrows();
    if n == 0 {
        return Err(Error::EmptyAttention);
    }
    if keys.ncols() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            actual: keys.ncols(),
        });
    }
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut logits = DVector::zeros(n);
    for i in 0..n {
        logits[i] = keys.row(i).transpose().dot(q) * scale;
    }
    let max = logits.max();
    let mut weights = logits.map(|z| (z - max).exp());
    let total: f64 = weights.iter().sum();
    weights /= total;
    Ok(weights)
}

/// Causal last-row attention: `softmax(qKᵀ/√d)·V`.
pub fn attend(
    q: &DVector<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if keys.nrows() != values.nrows() {
        return Err(Error::DimensionMismatch {
            expected: keys.nrows(),
            actual: values.nrows(),
        });
    }
    let weights = softmax_weights(q, keys)?;
    Ok(values.transpose() * weights)
}

/// Both attention-deviation bounds plus the raw error sums they are built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub bound_stated: f64,
    pub bound_proof: f64,
    pub value_error_sum: f64,
    pub key_ip_error_sum: f64,
}

/// Evaluate the deviation bounds for one query against paired exact/dequantized caches.
pub fn theorem_bound(
    q: &DVector<f64>,
    keys_fp: &DMatrix<f64>,
    keys_deq: &DMatrix<f64>,
    values_fp: &DMatrix<f64>,
    values_deq: &DMatrix<f64>,
) -> Result<BoundTerms> {
    let n = keys_fp.nrows();
    let d = q.len();
    for mat in [keys_fp, keys_deq, values_fp, values_deq] {
        if mat.nrows() != n || mat.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                actual: mat.nrows() * mat.ncols(),
            });
        }
    }
    let mut value_error_sum = 0.0;
    let mut key_ip_error_sum = 0.0;
    for i in 0..n {
        value_error_sum += (values_fp.row(i) - values_deq.row(i)).norm();
        let diff = (keys_fp.row(i) - keys_deq.row(i)).transpose();
        key_ip_error_sum += diff.dot(q).abs();
    }
    let scale = 2.0 * (d as f64).sqrt();
    let bound_stated = value_error_sum / scale * key_ip_error_sum + value_error_sum;
    let bound_proof = values_deq.norm() / scale * key_ip_error_sum + value_error_sum;
    Ok(BoundTerms {
        bound_stated,
        bound_proof,
        value_error_sum,
        key_ip_error_sum,
    })
}

/// Result of replaying one trace against one cache configuration.
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub reports: Vec<DeviationReport>,
    pub final_cache: KvCache,
}

fn reference_keys(
    trace: &TraceData,
    layer: usize,
    head: usize,
    cfg: &CacheConfig,
) -> Result<DMatrix<f64>> {
    let src = &trace.keys[layer][head];
    if !cfg.rotary {
        return Ok(src.clone());
    }
    let mut out = src.clone();
    for i in 0..src.nrows() {
        let roped = apply_rope(&src.row(i).transpose(), i as i64, cfg.theta_base)?;
        for c in 0..src.ncols() {
            out[(i, c)] = roped[c];
        }
    }
    Ok(out)
}

fn reference_query(
    trace: &TraceData,
    layer: usize,
    query_head: usize,
    token: usize,
    cfg: &CacheConfig,
) -> Result<DVector<f64>> {
    let raw = trace.queries[layer][query_head].row(token).transpose();
    if cfg.rotary {
        apply_rope(&raw, token as i64, cfg.theta_base)
    } else {
        Ok(raw)
    }
}

fn step_report(
    step: usize,
    q: &DVector<f64>,
    keys_fp: &DMatrix<f64>,
    values_fp: &DMatrix<f64>,
    keys_q: &DMatrix<f64>,
    values_q: &DMatrix<f64>,
) -> Result<StepReport> {
    let n = keys_fp.nrows();
    let scale = 1.0 / (q.len() as f64).sqrt();
    let weights_fp = softmax_weights(q, keys_fp)?;
    let weights_q = softmax_weights(q, keys_q)?;
    let attn_fp = values_fp.transpose() * &weights_fp;
    let attn_q = values_q.transpose() * &weights_q;

    let mut score_abs_diff = Vec::with_capacity(n);
    let mut logit_abs_diff = Vec::with_capacity(n);
    for i in 0..n {
        score_abs_diff.push((weights_fp[i] - weights_q[i]).abs());
        let logit_fp = keys_fp.row(i).transpose().dot(q) * scale;
        let logit_q = keys_q.row(i).transpose().dot(q) * scale;
        logit_abs_diff.push((logit_fp - logit_q).abs());
    }
    let bounds = theorem_bound(q, keys_fp, keys_q, values_fp, values_q)?;
    Ok(StepReport {
        step,
        actual_deviation: (attn_fp - attn_q).norm(),
        bound_stated: bounds.bound_stated,
        bound_proof: bounds.bound_proof,
        value_error_sum: bounds.value_error_sum,
        key_ip_error_sum: bounds.key_ip_error_sum,
        score_abs_diff,
        logit_abs_diff,
    })
}

/// Prefill on the trace prompt, then decode the remaining tokens while
/// comparing attention from the cache against the full-precision tensors.
pub fn replay_trace(trace: &TraceData, cfg: &CacheConfig) -> Result<ReplayOutcome> {
    trace.validate()?;
    let m = &trace.manifest;
    cfg.validate(m.head_dim)?;
    let (mut cache, states) = prefill(trace, cfg)?;
    let gqa = m.gqa_group();

    let mut fp_keys = Vec::with_capacity(m.layers);
    for layer in 0..m.layers {
        let mut per_head = Vec::with_capacity(m.kv_heads);
        for head in 0..m.kv_heads {
            per_head.push(reference_keys(trace, layer, head, cfg)?);
        }
        fp_keys.push(per_head);
    }

    let mut reports: Vec<DeviationReport> = (0..m.layers)
        .flat_map(|layer| {
            (0..m.query_heads).map(move |qh| DeviationReport {
                layer,
                query_head: qh,
                steps: Vec::new(),
            })
        })
        .collect();

    for token in m.prompt_len..m.tokens {
        cache.append_from_trace(&states, trace, token)?;
        let n = token + 1;
        for layer in 0..m.layers {
            for head in 0..m.kv_heads {
                let (keys_q, values_q) = cache.materialize_head(layer, head)?;
                let keys_fp = fp_keys[layer][head].rows(0, n).clone_owned();
                let values_fp = trace.values[layer][head].rows(0, n).clone_owned();
                for q_local in 0..gqa {
                    let qh = head * gqa + q_local;
                    let q = reference_query(trace, layer, qh, token, cfg)?;
                    let report =
                        step_report(token, &q, &keys_fp, &values_fp, &keys_q, &values_q)?;
                    reports[layer * m.query_heads + qh].steps.push(report);
                }
            }
        }
    }
    Ok(ReplayOutcome {
        reports,
        final_cache: cache,
    })
}

/// Replay where the "quantized" side is the full-precision data itself.
/// Every difference metric is exactly zero; used as a harness self-check.
pub fn replay_full_precision(trace: &TraceData, cfg: &CacheConfig) -> Result<Vec<DeviationReport>> {
    trace.validate()?;
    let m = &trace.manifest;
    let gqa = m.gqa_group();
    let mut reports: Vec<DeviationReport> = (0..m.layers)
        .flat_map(|layer| {
            (0..m.query_heads).map(move |qh| DeviationReport {
                layer,
                query_head: qh,
                steps: Vec::new(),
            })
        })
        .collect();
    for token in m.prompt_len..m.tokens {
        let n = token + 1;
        for layer in 0..m.layers {
            for head in 0..m.kv_heads {
                let keys = reference_keys(trace, layer, head, cfg)?.rows(0, n).clone_owned();
                let values = trace.values[layer][head].rows(0, n).clone_owned();
                for q_local in 0..gqa {
                    let qh = head * gqa + q_local;
                    let q = reference_query(trace, layer, qh, token, cfg)?;
                    let report = step_report(token, &q, &keys, &values, &keys, &values)?;
                    reports[layer * m.query_heads + qh].steps.push(report);
                }
            }
        }
    }
    Ok(reports)
}

/// Replay the trace under two configurations and summarize both.
pub fn compare_quantizers(
    trace: &TraceData,
    cfg_primary: &CacheConfig,
    cfg_baseline: &CacheConfig,
) -> Result<ComparisonReport> {
    let primary = replay_trace(trace, cfg_primary)?;
    let baseline = replay_trace(trace, cfg_baseline)?;
    Ok(ComparisonReport {
        primary: QuantizerSummary::from_reports("primary", primary.reports),
        baseline: QuantizerSummary::from_reports("baseline", baseline.reports),
    })
}
