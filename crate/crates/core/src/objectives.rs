//! Grouping-rank margin loss and the combined objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub group_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            group_epsilon: 0.02,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.group_epsilon >= 0.0) {
            return Err(Error::Config("alpha, beta and group_epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_dist: f64,
    pub l_mrg: f64,
    pub l_fnl: f64,
    pub n_pairs: usize,
    pub n_groups: usize,
}

/// `relu((S_i − S_j) − (Ŝ_i − Ŝ_j))` for a pair with `S_i ≥ S_j`.
pub fn margin_pair_loss(s_i: f64, s_j: f64, p_i: f64, p_j: f64) -> f64 {
    ((s_i - s_j) - (p_i - p_j)).max(0.0)
}

/// Ordered cross-group pairs `(i, j)` with `S_i > S_j`, `i` outer, `j` inner.
pub fn cross_group_pairs(scores: &[f64], groups: &[Vec<usize>]) -> Result<Vec<(usize, usize)>> {
    let mut group_of = vec![usize::MAX; scores.len()];
    for (k, g) in groups.iter().enumerate() {
        for &i in g {
            if i >= scores.len() || group_of[i] != usize::MAX {
                return Err(Error::Invalid(format!(
                    "groups are not a partition of {} frames",
                    scores.len()
                )));
            }
            group_of[i] = k;
        }
    }
    if group_of.contains(&usize::MAX) {
        return Err(Error::Invalid(format!("groups do not cover all {} frames", scores.len())));
    }
    let mut pairs = Vec::new();
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if group_of[i] != group_of[j] && scores[i] > scores[j] {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}

/// Mean margin loss over cross-group pairs, with the pair count. Plain `f64`
/// evaluation, used for reporting.
pub fn margin_loss_value(scores: &[f64], pred: &[f64], groups: &[Vec<usize>]) -> Result<(f64, usize)> {
    if pred.len() != scores.len() {
        return Err(Error::dim(
            "margin_loss",
            "frames",
            format!("{} predictions for {} scores", pred.len(), scores.len()),
        ));
    }
    let pairs = cross_group_pairs(scores, groups)?;
    if pairs.is_empty() {
        return Ok((0.0, 0));
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| margin_pair_loss(scores[i], scores[j], pred[i], pred[j]))
        .sum();
    Ok((sum / pairs.len() as f64, pairs.len()))
}

/// Differentiable margin loss on predicted scores `pred` (shape `[T]`).
/// With no cross-group pairs the loss is a constant zero.
pub fn margin_loss<T: Real>(g: &mut Graph<T>, pred: Var, scores: &[f64], groups: &[Vec<usize>]) -> Result<(Var, usize)> {
    if g.shape(pred) != [scores.len()] {
        return Err(Error::dim(
            "margin_loss",
            "frames",
            format!("predictions {:?} for {} scores", g.shape(pred), scores.len()),
        ));
    }
    let pairs = cross_group_pairs(scores, groups)?;
    if pairs.is_empty() {
        return Ok((g.input(Tensor::scalar(T::zero())), 0));
    }
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let gaps: Vec<f64> = pairs.iter().map(|&(i, j)| scores[i] - scores[j]).collect();
    let pi = g.select(pred, 0, &is)?;
    let pj = g.select(pred, 0, &js)?;
    let d = g.sub(pi, pj)?;
    let gap = g.input(Tensor::from_f64(&[pairs.len()], &gaps)?);
    let slack = g.sub(gap, d)?;
    let hinge = g.relu(slack);
    Ok((g.mean(hinge, &[])?, pairs.len()))
}

pub fn total_loss(l_dist: f64, l_mrg: f64, cfg: &LossConfig) -> f64 {
    cfg.alpha * l_dist + cfg.beta * l_mrg
}

/// `α·l_dist + β·l_mrg` on the graph; `l_dist` is absent in subjective mode.
pub fn total_loss_var<T: Real>(g: &mut Graph<T>, l_dist: Option<Var>, l_mrg: Var, cfg: &LossConfig) -> Result<Var> {
    let m = g.affine(l_mrg, cfg.beta, 0.0);
    match l_dist {
        Some(d) => {
            let d = g.affine(d, cfg.alpha, 0.0);
            g.add(d, m)
        }
        None => Ok(m),
    }
}
