//! Training objectives for the policy head.
//!
//! Sign convention: `q` is a READ score. The covariance label is
//! `log P(s|a_t) - log P(s|a_T)`, the negated information gain, so
//! minimizing `mean(q * BN(label))` makes `q` track the gain.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::math::{sigmoid, softplus};
use crate::policy::PolicyVariant;

/// Which label-fitting term drives the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Covariance,
    /// Ablation: regress `q` onto the raw information gain.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mono: f64,
    /// Keeps q on a logit scale. The covariance term alone has no scale, so
    /// small values let q drift to magnitudes where the alignment BCE
    /// saturates.
    pub lambda_l2: f64,
    pub lambda_align: f64,
    pub tau: f64,
    pub bn_epsilon: f64,
    pub mono_margin: f64,
    pub objective: Objective,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mono: 0.1,
            lambda_l2: 1.0,
            lambda_align: 1.0,
            tau: 0.5,
            bn_epsilon: 1e-5,
            mono_margin: 0.0,
            objective: Objective::Covariance,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_mono", self.lambda_mono),
            ("lambda_l2", self.lambda_l2),
            ("lambda_align", self.lambda_align),
            ("mono_margin", self.mono_margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LabError::config(field, "must be finite and nonnegative"));
            }
        }
        if !(self.tau > 0.0) {
            return Err(LabError::config("tau", "must be positive"));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(LabError::config("bn_epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// One `(utterance, t, n)` training point with its oracle labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub t_audio: f64,
    pub token_index: usize,
    pub label_partial_logp: f64,
    pub label_full_logp: f64,
    pub t_star: Option<f64>,
    pub aligned: bool,
    /// Features of token `n + 1` at the same `t`, feeding the monotonicity term.
    pub next_features: Option<Vec<f64>>,
}

impl LabeledExample {
    /// `log P(s|a_t) - log P(s|a_T)`.
    pub fn cov_label(&self) -> f64 {
        self.label_partial_logp - self.label_full_logp
    }

    pub fn info_gain(&self) -> f64 {
        self.label_full_logp - self.label_partial_logp
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(LabError::Shape { expected: a, got: b });
    }
    Ok(())
}

/// Whitens `values` with the population standard deviation; `epsilon` is
/// added to the deviation, so a constant batch maps to zeros.
pub fn batch_normalize(values: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(LabError::Batch {
            min: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    Ok(values.iter().map(|v| (v - mean) / denom).collect())
}

pub fn cov_loss(q: &[f64], labels_partial_minus_full: &[f64], epsilon: f64) -> Result<f64> {
    same_len(q.len(), labels_partial_minus_full.len())?;
    let z = batch_normalize(labels_partial_minus_full, epsilon)?;
    Ok(q.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / q.len() as f64)
}

/// Hinge penalty on decreases along a token sequence at fixed audio.
pub fn mono_loss(q_sequence: &[f64]) -> f64 {
    q_sequence.windows(2).map(|w| (w[0] - w[1]).max(0.0)).sum()
}

pub fn l2_loss(q: &[f64]) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.iter().map(|v| v * v).sum::<f64>() / q.len() as f64
}

/// Soft READ target: near 1 well before the boundary, near 0 well after it.
pub fn align_target(t_audio: f64, t_star: f64, tau: f64) -> f64 {
    sigmoid((t_star - t_audio) / tau)
}

/// A mean over a masked subset; `empty` is set when nothing was selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub empty: bool,
}

/// Binary cross-entropy with `q` read as a logit. Entries whose mask is false
/// are skipped.
pub fn bce_align_loss(q_logits: &[f64], targets: &[f64], mask: &[bool]) -> Result<MaskedLoss> {
    same_len(q_logits.len(), targets.len())?;
    same_len(q_logits.len(), mask.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&q, &y), &m) in q_logits.iter().zip(targets).zip(mask) {
        if m {
            sum += softplus(q) - y * q;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(MaskedLoss {
            value: 0.0,
            empty: true,
        });
    }
    Ok(MaskedLoss {
        value: sum / count as f64,
        empty: false,
    })
}

pub fn mse_label_loss(q: &[f64], labels: &[f64]) -> Result<f64> {
    same_len(q.len(), labels.len())?;
    if q.is_empty() {
        return Ok(0.0);
    }
    Ok(q.iter().zip(labels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / q.len() as f64)
}

/// Policy outputs and targets for one training batch.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub q: &'a [f64],
    /// `log P(s|a_t) - log P(s|a_T)` per example.
    pub labels: &'a [f64],
    /// Score of the following token at the same audio, when one exists.
    pub q_next: &'a [Option<f64>],
    pub align_targets: &'a [f64],
    pub align_mask: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Covariance term, or the MSE term under [`Objective::Mse`].
    pub cov: f64,
    pub mono: f64,
    pub l2: f64,
    pub align: f64,
    /// Alignment was requested but no example in the batch was aligned.
    pub align_empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub terms: LossTerms,
    /// dL/dq for each example.
    pub grad_q: Vec<f64>,
    /// dL/dq_next; zero where there is no following token.
    pub grad_q_next: Vec<f64>,
}

/// The full objective for `variant` with its gradient in `q`.
///
/// Every term enters the total multiplied by its weight; the breakdown
/// reports unweighted values.
pub fn total_loss(
    variant: PolicyVariant,
    batch: &LossBatch<'_>,
    weights: &LossWeights,
) -> Result<LossOutput> {
    let b = batch.q.len();
    same_len(b, batch.labels.len())?;
    same_len(b, batch.q_next.len())?;
    same_len(b, batch.align_targets.len())?;
    same_len(b, batch.align_mask.len())?;
    if b < 2 {
        return Err(LabError::Batch { min: 2, got: b });
    }
    let inv_b = 1.0 / b as f64;
    let mut grad_q = vec![0.0; b];
    let mut grad_q_next = vec![0.0; b];

    let primary = match weights.objective {
        Objective::Covariance => {
            let z = batch_normalize(batch.labels, weights.bn_epsilon)?;
            grad_q.iter_mut().zip(&z).for_each(|(g, zi)| *g += zi * inv_b);
            batch.q.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() * inv_b
        }
        Objective::Mse => {
            let gain: Vec<f64> = batch.labels.iter().map(|l| -l).collect();
            for ((g, q), f) in grad_q.iter_mut().zip(batch.q).zip(&gain) {
                *g += 2.0 * (q - f) * inv_b;
            }
            mse_label_loss(batch.q, &gain)?
        }
    };

    let l2 = l2_loss(batch.q);
    for (g, q) in grad_q.iter_mut().zip(batch.q) {
        *g += weights.lambda_l2 * 2.0 * q * inv_b;
    }

    let pairs = batch.q_next.iter().filter(|q| q.is_some()).count();
    let mut mono = 0.0;
    if pairs > 0 {
        let inv_p = 1.0 / pairs as f64;
        for (i, next) in batch.q_next.iter().enumerate() {
            if let Some(qn) = next {
                let gap = batch.q[i] - qn + weights.mono_margin;
                if gap > 0.0 {
                    mono += gap * inv_p;
                    grad_q[i] += weights.lambda_mono * inv_p;
                    grad_q_next[i] -= weights.lambda_mono * inv_p;
                }
            }
        }
    }

    let mut align = 0.0;
    let mut align_empty = false;
    if variant.uses_alignment() {
        let bce = bce_align_loss(batch.q, batch.align_targets, batch.align_mask)?;
        align = bce.value;
        align_empty = bce.empty;
        if !bce.empty {
            let count = batch.align_mask.iter().filter(|m| **m).count() as f64;
            for (i, g) in grad_q.iter_mut().enumerate() {
                if batch.align_mask[i] {
                    *g += weights.lambda_align * (sigmoid(batch.q[i]) - batch.align_targets[i]) / count;
                }
            }
        }
    }

    let total = primary
        + weights.lambda_mono * mono
        + weights.lambda_l2 * l2
        + if variant.uses_alignment() {
            weights.lambda_align * align
        } else {
            0.0
        };
    Ok(LossOutput {
        terms: LossTerms {
            total,
            cov: primary,
            mono,
            l2,
            align,
            align_empty,
        },
        grad_q,
        grad_q_next,
    })
}
