//! Per-round evaluation quantities.
//!
//! Accuracy metrics are evaluated on the designated benign client (the one
//! with the lowest id): at consensus every benign model weight coincides, and
//! before consensus the choice is simply recorded output convention.

use crate::engine::ClientState;
use crate::error::{Error, Result};
use crate::model::{eval_loss_grad, predict, Batch, ModelSpec, ParamVec};

/// One row of per-round output.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    /// Fraction of clean test examples classified correctly; in [0, 1].
    pub test_accuracy: f64,
    /// Fraction of triggered test examples classified as the attacker's
    /// target; in [0, 1].
    pub attack_accuracy: f64,
    /// `|| sum_i gamma_i - sum_i grad_i(theta_i) ||_2` over benign clients.
    pub tracking_residual: f64,
    /// Max pairwise model-weight distance over benign clients.
    pub consensus_error: f64,
    /// Total number of (benign client, neighbor) exclusion pairs.
    pub n_excluded: usize,
    pub wall_time_ms: f64,
}

/// Fraction of test examples whose prediction matches the true label.
pub fn test_accuracy(model: &ModelSpec, params: &ParamVec, clean_test: &Batch) -> Result<f64> {
    if clean_test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let labels = predict(model, params, clean_test)?;
    let hits = labels
        .iter()
        .zip(clean_test.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / clean_test.n_examples() as f64)
}

/// Fraction of triggered test examples classified as the target label
/// (the attack success rate).
pub fn attack_accuracy(
    model: &ModelSpec,
    params: &ParamVec,
    triggered_test: &Batch,
    target_label: usize,
) -> Result<f64> {
    if triggered_test.is_empty() {
        return Err(Error::Input("empty triggered test set".into()));
    }
    let labels = predict(model, params, triggered_test)?;
    let hits = labels.iter().filter(|&&l| l == target_label).count();
    Ok(hits as f64 / triggered_test.n_examples() as f64)
}

fn designated_benign(states: &[ClientState]) -> Result<&ClientState> {
    states
        .iter()
        .find(|s| !s.role.is_malicious())
        .ok_or_else(|| Error::Protocol("no benign client to evaluate".into()))
}

pub fn test_accuracy_of_states(
    models: &[ModelSpec],
    states: &[ClientState],
    clean_test: &Batch,
) -> Result<f64> {
    let probe = designated_benign(states)?;
    test_accuracy(&models[probe.id], &probe.theta, clean_test)
}

pub fn attack_accuracy_of_states(
    models: &[ModelSpec],
    states: &[ClientState],
    triggered_test: &Batch,
    target_label: usize,
) -> Result<f64> {
    let probe = designated_benign(states)?;
    attack_accuracy(&models[probe.id], &probe.theta, triggered_test, target_label)
}

/// `|| sum_i gamma_i - sum_i grad_i(theta_i) ||_2` over benign clients, with
/// full-batch gradients on each client's own shard.
pub fn tracking_residual(states: &[ClientState], models: &[ModelSpec]) -> Result<f64> {
    let benign: Vec<&ClientState> = states.iter().filter(|s| !s.role.is_malicious()).collect();
    if benign.is_empty() {
        return Ok(0.0);
    }
    let dim = benign[0].gamma.dim();
    let mut gamma_sum = ParamVec::zeros(dim);
    let mut grad_sum = ParamVec::zeros(dim);
    for state in benign {
        gamma_sum.add_assign(&state.gamma);
        let (_, grad) = eval_loss_grad(&models[state.id], &state.theta, &state.shard)?;
        grad_sum.add_assign(&grad);
    }
    gamma_sum.sub_assign(&grad_sum);
    Ok(gamma_sum.l2_norm())
}

/// Max pairwise model-weight distance over benign clients; zero when fewer
/// than two benign clients exist.
pub fn consensus_error(states: &[ClientState]) -> f64 {
    let benign: Vec<&ClientState> = states.iter().filter(|s| !s.role.is_malicious()).collect();
    let mut worst = 0.0f64;
    for (k, a) in benign.iter().enumerate() {
        for b in &benign[k + 1..] {
            worst = worst.max(a.theta.l2_dist(&b.theta));
        }
    }
    worst
}
