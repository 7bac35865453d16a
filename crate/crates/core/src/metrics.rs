//! Rank and linear correlation metrics with the relaxed-threshold protocol.
//!
//! Undefined values (too few items, zero variance, no comparable pairs) are
//! `None`, never `0`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Thresholds of the relaxed SRCC columns R0, R0.02, R0.05 and R0.1.
pub const RELAXED_THRESHOLDS: [f64; 4] = [0.0, 0.02, 0.05, 0.1];

/// 1-based fractional ranks; tied values share their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson linear correlation (PLCC), two-pass.
pub fn plcc(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    // exact test: a rounded mean leaves spurious variance in constant data
    let constant = |x: &[f64]| x.iter().all(|&v| v == x[0]);
    if constant(a) || constant(b) {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / libm::sqrt(va * vb)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson over fractional ranks.
pub fn srcc(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    plcc(&fractional_ranks(a), &fractional_ranks(b))
}

/// SRCC after snapping every prediction within `threshold` of its ground
/// truth onto that ground truth.
pub fn relaxed_srcc(pred: &[f64], gt: &[f64], threshold: f64) -> Option<f64> {
    if pred.len() != gt.len() {
        return None;
    }
    let snapped: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if (p - g).abs() <= threshold { g } else { p })
        .collect();
    srcc(&snapped, gt)
}

/// Fraction of ground-truth-ordered pairs whose predicted order agrees.
/// Pairs tied in the ground truth are skipped; predicted ties score 0.5.
pub fn pairwise_accuracy(pred: &[f64], gt: &[f64]) -> Option<f64> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return None;
    }
    let (mut hits, mut total) = (0.0, 0usize);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            if gt[i] == gt[j] {
                continue;
            }
            total += 1;
            let dp = pred[i] - pred[j];
            if dp == 0.0 {
                hits += 0.5;
            } else if (dp > 0.0) == (gt[i] > gt[j]) {
                hits += 1.0;
            }
        }
    }
    (total > 0).then(|| hits / total as f64)
}

/// Per-sequence min–max normalisation to `[0, 1]`; a constant input maps to 0.5.
pub fn min_max_normalize(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; x.len()];
    }
    x.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub srcc: Option<f64>,
    /// Relaxed SRCC at each of [`RELAXED_THRESHOLDS`].
    pub relaxed_srcc: [Option<f64>; 4],
    pub plcc: Option<f64>,
    pub pairwise_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub sequences: usize,
    pub srcc: Option<f64>,
    pub relaxed_srcc: [Option<f64>; 4],
    pub plcc: Option<f64>,
    pub pairwise_accuracy_mean: Option<f64>,
    pub pairwise_accuracy_std: Option<f64>,
    /// Number of sequences where SRCC was defined.
    pub srcc_defined: usize,
}

/// Metrics for one sequence. Predictions are min–max normalised first so the
/// relaxed thresholds act on the same `[0, 1]` scale as the ground truth.
pub fn sequence_metrics(id: &str, pred: &[f64], gt: &[f64]) -> SequenceMetrics {
    let norm = min_max_normalize(pred);
    SequenceMetrics {
        id: id.into(),
        srcc: srcc(&norm, gt),
        relaxed_srcc: RELAXED_THRESHOLDS.map(|t| relaxed_srcc(&norm, gt, t)),
        plcc: plcc(&norm, gt),
        pairwise_accuracy: pairwise_accuracy(&norm, gt),
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ((n > 0).then(|| sum / n as f64), n)
}

/// Equal-weight average over sequences of each defined per-sequence value.
pub fn aggregate(per_sequence: &[SequenceMetrics]) -> AggregateMetrics {
    let (srcc, srcc_defined) = mean_defined(per_sequence.iter().map(|m| m.srcc));
    let relaxed = core::array::from_fn(|k| mean_defined(per_sequence.iter().map(|m| m.relaxed_srcc[k])).0);
    let (plcc, _) = mean_defined(per_sequence.iter().map(|m| m.plcc));
    let accs: Vec<f64> = per_sequence.iter().filter_map(|m| m.pairwise_accuracy).collect();
    let (acc_mean, acc_std) = if accs.is_empty() {
        (None, None)
    } else {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        (Some(mean), Some(libm::sqrt(var)))
    };
    AggregateMetrics {
        sequences: per_sequence.len(),
        srcc,
        relaxed_srcc: relaxed,
        plcc,
        pairwise_accuracy_mean: acc_mean,
        pairwise_accuracy_std: acc_std,
        srcc_defined,
    }
}

/// Where a report's numbers came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub checkpoint: String,
    pub seed: u64,
    pub split: String,
    pub annotation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub relaxed_thresholds: [f64; 4],
    pub aggregate: AggregateMetrics,
    pub per_sequence: Vec<SequenceMetrics>,
}

impl EvalReport {
    /// `items` holds `(sequence id, predictions, ground-truth scores)`.
    pub fn new<'a>(provenance: Provenance, items: impl IntoIterator<Item = (&'a str, &'a [f64], &'a [f64])>) -> Self {
        let per_sequence: Vec<SequenceMetrics> = items
            .into_iter()
            .map(|(id, pred, gt)| sequence_metrics(id, pred, gt))
            .collect();
        EvalReport {
            provenance,
            relaxed_thresholds: RELAXED_THRESHOLDS,
            aggregate: aggregate(&per_sequence),
            per_sequence,
        }
    }
}
