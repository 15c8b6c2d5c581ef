//! Malicious-neighbor detection and the exclusion latch.
//!
//! Each benign client keeps a row of aggregation weights over its
//! neighborhood. Per round it scores every active neighbor's gradient
//! tracking variable against its own, folds the normalized scores into the
//! weights, and permanently zeroes (latches) any neighbor whose weight falls
//! to `threshold_factor / |N_i|`. Latching is what arms the one-shot
//! mitigation in the aggregation engine: a latched neighbor's recording
//! variable is gated out of every subsequent tracking update.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    /// Score by `exp(-||gamma_j - gamma_i||_2)`.
    Consistency,
    /// Score by `(1 + cos(gamma_j, gamma_i)) / 2`.
    Similarity,
    /// Leave weights untouched.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub kind: DetectionKind,
    /// The latch cut is `threshold_factor / |N_i|`.
    pub threshold_factor: f64,
    /// Permanently exclude neighbors that reach the cut.
    pub latch: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            kind: DetectionKind::Consistency,
            threshold_factor: 0.1,
            latch: true,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_factor > 0.0 && self.threshold_factor < 1.0) {
            return Err(Error::Config(format!(
                "detection.threshold_factor must lie in (0, 1), got {}",
                self.threshold_factor
            )));
        }
        Ok(())
    }

    pub fn cut(&self, degree: usize) -> f64 {
        self.threshold_factor / degree as f64
    }
}

/// One client's aggregation weights over its neighborhood, plus the set of
/// permanently excluded neighbors.
///
/// Invariants: excluded neighbors carry weight exactly zero, every weight is
/// non-negative, and the weights of non-excluded neighbors sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    self_id: usize,
    weights: BTreeMap<usize, f64>,
    excluded: BTreeSet<usize>,
}

impl WeightRow {
    /// Uniform `1/|N_i|` row over the neighborhood.
    pub fn uniform(self_id: usize, neighborhood: &BTreeSet<usize>) -> WeightRow {
        let w = 1.0 / neighborhood.len() as f64;
        WeightRow {
            self_id,
            weights: neighborhood.iter().map(|&j| (j, w)).collect(),
            excluded: BTreeSet::new(),
        }
    }

    pub fn self_id(&self) -> usize {
        self.self_id
    }

    /// Weight for a neighbor; zero for excluded or unknown ids.
    pub fn weight(&self, j: usize) -> f64 {
        if self.excluded.contains(&j) {
            0.0
        } else {
            self.weights.get(&j).copied().unwrap_or(0.0)
        }
    }

    /// Non-excluded neighbor ids in ascending order.
    pub fn active_ids(&self) -> Vec<usize> {
        self.weights
            .keys()
            .copied()
            .filter(|j| !self.excluded.contains(j))
            .collect()
    }

    pub fn excluded(&self) -> &BTreeSet<usize> {
        &self.excluded
    }

    pub fn is_excluded(&self, j: usize) -> bool {
        self.excluded.contains(&j)
    }

    pub fn n_active(&self) -> usize {
        self.weights.len() - self.excluded.len()
    }

    pub fn active_sum(&self) -> f64 {
        self.active_ids().iter().map(|&j| self.weight(j)).sum()
    }

    fn set(&mut self, j: usize, w: f64) {
        self.weights.insert(j, w);
    }

    fn exclude(&mut self, j: usize) {
        self.excluded.insert(j);
        self.weights.insert(j, 0.0);
    }
}

/// Consistency scores: `s_ij = exp(-||gamma_j - gamma_i||_2)`, so the self
/// term is always one.
fn consistency_score(own: &ParamVec, other: &ParamVec) -> f64 {
    (-own.l2_dist(other)).exp()
}

/// Cosine-based scores mapped into `[0, 1]`. The cosine of the zero vector is
/// one against itself and zero against anything else.
fn similarity_score(own: &ParamVec, other: &ParamVec) -> f64 {
    let no = own.l2_norm();
    let nt = other.l2_norm();
    let cos = if no == 0.0 && nt == 0.0 {
        1.0
    } else if no == 0.0 || nt == 0.0 {
        0.0
    } else {
        own.dot(other) / (no * nt)
    };
    (1.0 + cos) / 2.0
}

fn adjust(
    own_gamma: &ParamVec,
    neighbor_gammas: &BTreeMap<usize, &ParamVec>,
    row: &WeightRow,
    score: impl Fn(&ParamVec, &ParamVec) -> f64,
) -> Result<WeightRow> {
    let active = row.active_ids();
    if active.is_empty() {
        return Err(Error::Protocol("no active neighbors to adjust".into()));
    }
    if active.len() != neighbor_gammas.len() || active.iter().any(|j| !neighbor_gammas.contains_key(j))
    {
        return Err(Error::Protocol(
            "tracking variables must cover exactly the active neighbor set".into(),
        ));
    }

    // Both normalizations run over the active set only; excluded neighbors
    // stay at zero.
    let scores: Vec<f64> = active
        .iter()
        .map(|j| score(own_gamma, neighbor_gammas[j]))
        .collect();
    let score_sum: f64 = scores.iter().sum();
    if score_sum <= 0.0 || !score_sum.is_finite() {
        return Err(Error::Protocol(
            "consistency scores sum to zero; cannot normalize".into(),
        ));
    }
    let mixed: Vec<f64> = active
        .iter()
        .zip(&scores)
        .map(|(&j, &s)| row.weight(j) + s / score_sum)
        .collect();
    let mixed_sum: f64 = mixed.iter().sum();

    let mut out = row.clone();
    for (&j, &m) in active.iter().zip(&mixed) {
        out.set(j, m / mixed_sum);
    }
    Ok(out)
}

/// Fold consistency levels into the weight row (two-stage normalization).
pub fn consistency_adjust(
    own_gamma: &ParamVec,
    neighbor_gammas: &BTreeMap<usize, &ParamVec>,
    row: &WeightRow,
) -> Result<WeightRow> {
    adjust(own_gamma, neighbor_gammas, row, consistency_score)
}

/// Same two-stage normalization with the cosine-based score.
pub fn similarity_adjust(
    own_gamma: &ParamVec,
    neighbor_gammas: &BTreeMap<usize, &ParamVec>,
    row: &WeightRow,
) -> Result<WeightRow> {
    adjust(own_gamma, neighbor_gammas, row, similarity_score)
}

/// Move every active neighbor whose weight has fallen to the cut
/// (`threshold_factor / degree`, compared with `<=`) into the excluded set
/// and renormalize the survivors. The self weight never latches.
pub fn apply_latch(
    row: &WeightRow,
    degree: usize,
    config: &DetectionConfig,
) -> Result<(WeightRow, BTreeSet<usize>)> {
    apply_latch_impl(row, degree, config, true)
}

/// Latch without renormalizing. Exists for the self-check's mutation probe;
/// it deliberately breaks the row-stochasticity invariant.
pub fn apply_latch_skipping_renormalization(
    row: &WeightRow,
    degree: usize,
    config: &DetectionConfig,
) -> Result<(WeightRow, BTreeSet<usize>)> {
    apply_latch_impl(row, degree, config, false)
}

fn apply_latch_impl(
    row: &WeightRow,
    degree: usize,
    config: &DetectionConfig,
    renormalize: bool,
) -> Result<(WeightRow, BTreeSet<usize>)> {
    let cut = config.cut(degree);
    let mut out = row.clone();
    let mut newly = BTreeSet::new();
    for j in row.active_ids() {
        if j == row.self_id() {
            continue;
        }
        if row.weight(j) <= cut {
            out.exclude(j);
            newly.insert(j);
        }
    }
    if newly.is_empty() {
        return Ok((out, newly));
    }
    let active = out.active_ids();
    if active.is_empty() {
        return Err(Error::Protocol("latch excluded the entire neighborhood".into()));
    }
    if renormalize {
        let sum: f64 = active.iter().map(|&j| out.weight(j)).sum();
        if sum <= 0.0 {
            return Err(Error::Protocol("surviving weights sum to zero".into()));
        }
        for j in active {
            let w = out.weight(j);
            out.set(j, w / sum);
        }
    }
    Ok((out, newly))
}
