//! Attention-bias ratios, per-head locality and syntactic scores, threshold
//! curves and head maps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::mask::MaskKind;
use crate::scalar::Scalar;

use super::sets::{TokenSets, DEFAULT_WINDOW};

/// `(mean of row over subset) / (mean of row over all positions)`.
pub fn attention_bias(row: &[f64], subset: &BTreeSet<usize>) -> Option<f64> {
    attention_bias_against(row, row, subset)
}

/// Numerator from `row`, denominator from `reference`. Masked heads use the
/// coefficients they actually apply as `row` and the raw softmax as
/// `reference`. `None` for an empty subset or an all-zero reference.
///
/// Both rows are divided by the reference maximum first; the ratio is
/// unchanged, and a uniform row then scores exactly 1.
pub fn attention_bias_against(row: &[f64], reference: &[f64], subset: &BTreeSet<usize>) -> Option<f64> {
    if subset.is_empty() {
        return None;
    }
    let scale = reference.iter().copied().fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let den = reference.iter().map(|v| v / scale).sum::<f64>() / reference.len() as f64;
    let num = subset.iter().map(|&j| row[j] / scale).sum::<f64>() / subset.len() as f64;
    Some(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasOptions {
    pub window: usize,
    /// Whether token `i` counts toward its own local subset.
    pub include_self: bool,
    /// Score masked heads on the raw softmax instead of the masked coefficients.
    pub raw_alpha: bool,
}

impl Default for BiasOptions {
    fn default() -> Self {
        BiasOptions { window: DEFAULT_WINDOW, include_self: true, raw_alpha: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub mask: Option<MaskKind>,
    pub locality: Option<f64>,
    pub syntactic: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Token-averaged scores of every recorded head for one sentence.
pub fn sentence_head_scores<T: Scalar>(records: &[AttentionRecord<T>], sets: &[TokenSets], opts: &BiasOptions) -> Vec<HeadScore> {
    records
        .iter()
        .map(|rec| {
            let used = if opts.raw_alpha { &rec.alpha } else { &rec.alpha_tilde };
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..used.rows())
                .map(|i| {
                    let r = used.row(i).iter().map(|v| v.as_f64()).collect();
                    let a = rec.alpha.row(i).iter().map(|v| v.as_f64()).collect();
                    (r, a)
                })
                .collect();
            let locality = mean(sets.iter().map(|s| {
                let mut subset = s.local.clone();
                if !opts.include_self {
                    subset.remove(&s.i);
                }
                attention_bias_against(&rows[s.i].0, &rows[s.i].1, &subset)
            }));
            let syntactic = mean(sets.iter().map(|s| attention_bias_against(&rows[s.i].0, &rows[s.i].1, &s.syntactic)));
            HeadScore { layer: rec.layer, head: rec.head, mask: rec.mask, locality, syntactic }
        })
        .collect()
}

/// Uniform average of per-sentence scores, head by head; sentences where a
/// score is undefined are skipped for that score.
pub fn average_scores(per_sentence: &[Vec<HeadScore>]) -> Vec<HeadScore> {
    let Some(first) = per_sentence.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(h, proto)| HeadScore {
            locality: mean(per_sentence.iter().map(|s| s[h].locality)),
            syntactic: mean(per_sentence.iter().map(|s| s[h].syntactic)),
            ..proto.clone()
        })
        .collect()
}

/// Fraction of scores strictly greater than each threshold.
pub fn threshold_curve(scores: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if scores.is_empty() {
                0.0
            } else {
                scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64
            }
        })
        .collect()
}

/// Thresholds 1 through 5.
pub const CURVE_THRESHOLDS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
pub const HEADMAP_THRESHOLD: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fraction_local: f64,
    pub fraction_syntactic: f64,
}

/// Curves over the heads that have each score defined.
pub fn bias_curves(scores: &[HeadScore], thresholds: &[f64]) -> Vec<CurvePoint> {
    let local: Vec<f64> = scores.iter().filter_map(|s| s.locality).collect();
    let syntactic: Vec<f64> = scores.iter().filter_map(|s| s.syntactic).collect();
    let fl = threshold_curve(&local, thresholds);
    let fs = threshold_curve(&syntactic, thresholds);
    thresholds
        .iter()
        .zip(fl.into_iter().zip(fs))
        .map(|(&threshold, (fraction_local, fraction_syntactic))| CurvePoint { threshold, fraction_local, fraction_syntactic })
        .collect()
}
