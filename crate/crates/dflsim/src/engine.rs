//! The round-synchronous aggregation engine.
//!
//! Clients advance in lockstep. At the start of a round every client
//! publishes its model weight and gradient tracking variable into an
//! immutable snapshot; each client then computes its next state from that
//! snapshot and its own private state alone, so steps within a round are
//! mutually independent and order-free.
//!
//! Three aggregation rules are provided:
//!
//! - **purification** (the defense): benign clients accumulate, per neighbor,
//!   a recording variable `beta[j] = sum_t w[j]^t * gamma[j]^t` of everything
//!   they ever aggregated from that neighbor. The tracking update rebuilds
//!   `gamma` from those records each round, gated by a sign function on the
//!   current weight, and subtracts the client's own cumulative `gamma`
//!   history as a compensator. Once detection drives a neighbor's weight to
//!   the cut, the gate zeroes that neighbor's entire record in one round:
//!   every gradient it ever contributed vanishes from the aggregation at
//!   once, while the model weights keep whatever useful displacement the
//!   neighbor's data had already paid for.
//! - **tracking** (DSGT): the standard gradient-tracking baseline.
//! - **descent** (DSGD): plain decentralized SGD, where the published
//!   "tracking" slot simply carries the local gradient.
//!
//! Malicious clients aggregate model weights honestly with their frozen
//! initial row but publish `(1 - pi) * clean + pi * malicious` gradients.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackKind, AttackSpec};
use crate::detection::{self, DetectionConfig, DetectionKind, WeightRow};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::model::{eval_loss_grad, Batch, ModelSpec, ParamVec};
use crate::rng;
use crate::topology::Topology;

/// Which update rule the benign clients run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Recording-variable purification on top of gradient tracking.
    Gpd,
    /// Plain gradient tracking, fixed initial weights.
    Dsgt,
    /// Decentralized SGD, fixed initial weights.
    Dsgd,
}

/// Full-batch gradients by default; minibatch mode draws a fresh seeded
/// batch per (client, round) so results stay schedule-independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

/// Test-only fault injection. All off by default.
#[derive(Clone, Copy, Debug, Default)]
pub struct EngineHooks {
    /// Add a small constant to one benign client's cumulative-gamma
    /// compensator after the given round, to prove the tracking-identity
    /// check can fail.
    pub corrupt_compensator_round: Option<usize>,
    /// Latch without renormalizing the surviving weights, to prove the
    /// row-stochasticity check can fail.
    pub skip_latch_renormalization: bool,
    /// Step clients in reverse id order; results must not change.
    pub reverse_step_order: bool,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub rule: AggregationRule,
    pub detection: DetectionConfig,
    /// Decay step size.
    pub lambda: f64,
    /// Number of rounds.
    pub rounds: usize,
    pub batch: BatchMode,
    pub seed: u64,
    /// Drop malicious clients before round 0 and rebuild the topology over
    /// the benign survivors (the idealized detect-restart bound).
    pub benign_only: bool,
    /// Seeded Laplace noise of this scale added to every benign client's
    /// aggregated tracking variable each round.
    pub laplace_scale: Option<f64>,
    pub hooks: EngineHooks,
}

impl EngineConfig {
    pub fn new(rule: AggregationRule, lambda: f64, rounds: usize, seed: u64) -> EngineConfig {
        EngineConfig {
            rule,
            detection: DetectionConfig::default(),
            lambda,
            rounds,
            batch: BatchMode::Full,
            seed,
            benign_only: false,
            laplace_scale: None,
            hooks: EngineHooks::default(),
        }
    }

    /// Detection disabled, weights frozen at their initial values.
    pub fn without_detection(mut self) -> EngineConfig {
        self.detection.kind = DetectionKind::None;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if let BatchMode::Minibatch(0) = self.batch {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        self.detection.validate()
    }
}

/// Whether a client is honest, and if not, how it attacks.
#[derive(Clone, Debug)]
pub enum Role {
    Benign,
    Malicious(AttackSpec),
}

impl Role {
    pub fn is_malicious(&self) -> bool {
        matches!(self, Role::Malicious(_))
    }
}

/// Everything a simulation needs besides the engine config. One model spec
/// per client: classifiers are usually uniform, quadratic worlds carry a
/// per-client center.
#[derive(Clone, Debug)]
pub struct SimSetup {
    pub models: Vec<ModelSpec>,
    pub topology: Topology,
    pub shards: Vec<Batch>,
    pub roles: Vec<Role>,
    /// Clean test set for accuracy, when the model classifies.
    pub clean_test: Option<Batch>,
    /// Trigger-stamped test set and the attacker's target label.
    pub triggered_test: Option<(Batch, usize)>,
    /// Pre-built poisoned shards overriding the attack's own transform,
    /// indexed by client id. `None` entries fall back to the transform.
    pub poisoned_shards: Option<Vec<Option<Batch>>>,
}

impl SimSetup {
    /// Every client shares the same model spec.
    pub fn uniform(
        model: ModelSpec,
        topology: Topology,
        shards: Vec<Batch>,
        roles: Vec<Role>,
    ) -> SimSetup {
        let models = vec![model; topology.n()];
        SimSetup {
            models,
            topology,
            shards,
            roles,
            clean_test: None,
            triggered_test: None,
            poisoned_shards: None,
        }
    }
}

/// One client's private state between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    /// Model weight.
    pub theta: ParamVec,
    /// Gradient tracking variable.
    pub gamma: ParamVec,
    /// Sum of every gamma this client has held, through the current round.
    pub gamma_cumsum: ParamVec,
    /// Local gradient at the current theta.
    pub last_grad: ParamVec,
    /// Recording variables, one per original neighbor. Benign clients only.
    pub beta: BTreeMap<usize, ParamVec>,
    pub row: WeightRow,
    /// Original neighborhood size; fixes the sign-function cut for good.
    pub degree: usize,
    pub shard: Batch,
    /// Poisoned twin of the shard for data-poisoning attackers.
    pub poisoned_shard: Option<Batch>,
}

/// The immutable per-round exchange: everything published at round start.
#[derive(Clone, Debug)]
pub struct RoundSnapshot {
    pub thetas: Vec<ParamVec>,
    pub gammas: Vec<ParamVec>,
}

impl RoundSnapshot {
    fn publish(states: &[ClientState]) -> RoundSnapshot {
        RoundSnapshot {
            thetas: states.iter().map(|s| s.theta.clone()).collect(),
            gammas: states.iter().map(|s| s.gamma.clone()).collect(),
        }
    }
}

/// Observation hook for tests and diagnostics. Called once per round with
/// the states the round started from, the published snapshot, and the states
/// it produced.
pub trait RoundObserver {
    fn on_round(
        &mut self,
        round: usize,
        before: &[ClientState],
        snapshot: &RoundSnapshot,
        after: &[ClientState],
    );
}

/// No-op observer.
pub struct NullObserver;

impl RoundObserver for NullObserver {
    fn on_round(&mut self, _: usize, _: &[ClientState], _: &RoundSnapshot, _: &[ClientState]) {}
}

pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    /// States after the final round.
    pub clients: Vec<ClientState>,
    /// States right after initialization.
    pub init_clients: Vec<ClientState>,
}

/// Initialize every client: random model weight, tracking variable equal to
/// the full-batch local gradient, uniform weight row, zero recording
/// variables for benign clients.
pub fn init_clients(config: &EngineConfig, setup: &SimSetup) -> Result<Vec<ClientState>> {
    config.validate()?;
    let n = setup.topology.n();
    if setup.shards.len() != n || setup.roles.len() != n || setup.models.len() != n {
        return Err(Error::Config(format!(
            "topology has {n} clients but {} shards, {} roles, {} models were supplied",
            setup.shards.len(),
            setup.roles.len(),
            setup.models.len()
        )));
    }
    let dim = setup.models[0].param_dim();
    if setup.models.iter().any(|m| m.param_dim() != dim) {
        return Err(Error::Config(
            "all client models must share one parameter dimension".into(),
        ));
    }
    if let Some(p) = &setup.poisoned_shards {
        if p.len() != n {
            return Err(Error::Config("poisoned_shards length mismatch".into()));
        }
    }
    for role in &setup.roles {
        if let Role::Malicious(spec) = role {
            spec.validate()?;
        }
    }

    let rows = setup.topology.initial_weights();
    let mut clients = Vec::with_capacity(n);
    for id in 0..n {
        let mut theta = ParamVec::zeros(dim);
        let mut theta_rng = rng::stream(config.seed, "theta0", &[id as u64]);
        for v in theta.as_mut_slice() {
            *v = theta_rng.random_range(-0.1..0.1);
        }
        let shard = setup.shards[id].clone();
        let (_, grad) = eval_loss_grad(&setup.models[id], &theta, &shard)?;
        let role = setup.roles[id].clone();

        let poisoned_shard = match &role {
            Role::Malicious(spec) if spec.kind.is_data_poisoning() => {
                let supplied = setup.poisoned_shards.as_ref().and_then(|p| p[id].clone());
                match supplied {
                    Some(batch) => Some(batch),
                    None => Some(attack::transform_shard(
                        spec,
                        &shard,
                        rng::derive_seed(config.seed, "poison", &[id as u64]),
                    )?),
                }
            }
            _ => None,
        };

        let beta = if role.is_malicious() {
            BTreeMap::new()
        } else {
            setup
                .topology
                .neighbors(id)
                .iter()
                .map(|&j| (j, ParamVec::zeros(dim)))
                .collect()
        };

        clients.push(ClientState {
            id,
            role,
            theta,
            gamma: grad.clone(),
            gamma_cumsum: grad.clone(),
            last_grad: grad,
            beta,
            row: rows[id].clone(),
            degree: setup.topology.degree(id),
            shard,
            poisoned_shard,
        });
    }
    Ok(clients)
}

/// Strip malicious clients out of a setup and rebuild the same topology kind
/// over the survivors, preserving benign id order.
fn reduce_to_benign(setup: &SimSetup) -> Result<SimSetup> {
    let keep: Vec<usize> = (0..setup.topology.n())
        .filter(|&i| !setup.roles[i].is_malicious())
        .collect();
    if keep.len() < 2 {
        return Err(Error::Config(
            "benign-only run needs at least 2 benign clients".into(),
        ));
    }
    let topology = Topology::build(setup.topology.kind(), keep.len()).map_err(|e| {
        Error::Config(format!(
            "cannot rebuild {} topology over {} benign clients: {e}",
            setup.topology.kind().name(),
            keep.len()
        ))
    })?;
    Ok(SimSetup {
        models: keep.iter().map(|&i| setup.models[i].clone()).collect(),
        topology,
        shards: keep.iter().map(|&i| setup.shards[i].clone()).collect(),
        roles: vec![Role::Benign; keep.len()],
        clean_test: setup.clean_test.clone(),
        triggered_test: setup.triggered_test.clone(),
        poisoned_shards: None,
    })
}

pub fn run(config: &EngineConfig, setup: &SimSetup) -> Result<RunOutput> {
    run_observed(config, setup, &mut NullObserver)
}

/// Execute the configured number of synchronous rounds, recording metrics
/// after each. The record for round `t` describes the state the round
/// produced.
pub fn run_observed(
    config: &EngineConfig,
    setup: &SimSetup,
    observer: &mut dyn RoundObserver,
) -> Result<RunOutput> {
    let reduced;
    let setup = if config.benign_only {
        reduced = reduce_to_benign(setup)?;
        &reduced
    } else {
        setup
    };

    let init_clients = init_clients(config, setup)?;
    let mut states = init_clients.clone();
    let mut records = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        let snapshot = RoundSnapshot::publish(&states);
        let started = Instant::now();

        let order: Vec<usize> = if config.hooks.reverse_step_order {
            (0..states.len()).rev().collect()
        } else {
            (0..states.len()).collect()
        };
        let mut next: Vec<Option<ClientState>> = (0..states.len()).map(|_| None).collect();
        for id in order {
            let stepped =
                step_client(&states[id], &snapshot, config, setup, round).map_err(|e| {
                    Error::Engine {
                        round,
                        source: Box::new(e),
                    }
                })?;
            next[id] = Some(stepped);
        }
        let mut new_states: Vec<ClientState> = next.into_iter().map(Option::unwrap).collect();

        if config.hooks.corrupt_compensator_round == Some(round) {
            if let Some(victim) = new_states.iter_mut().find(|s| !s.role.is_malicious()) {
                victim.gamma_cumsum.as_mut_slice()[0] += 1e-3;
            }
        }

        let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;

        for state in &new_states {
            if !(state.theta.is_finite() && state.gamma.is_finite()) {
                return Err(Error::Engine {
                    round,
                    source: Box::new(Error::Input(format!(
                        "client {} produced a non-finite update",
                        state.id
                    ))),
                });
            }
        }

        observer.on_round(round, &states, &snapshot, &new_states);
        states = new_states;

        records.push(build_record(round, &states, setup, wall_time_ms)?);
    }

    Ok(RunOutput {
        records,
        clients: states,
        init_clients,
    })
}

fn build_record(
    round: usize,
    states: &[ClientState],
    setup: &SimSetup,
    wall_time_ms: f64,
) -> Result<MetricsRecord> {
    let classifier = setup.models[0].is_classifier();
    let test_accuracy = match (&setup.clean_test, classifier) {
        (Some(test), true) => metrics::test_accuracy_of_states(&setup.models, states, test)?,
        _ => 0.0,
    };
    let attack_accuracy = match (&setup.triggered_test, classifier) {
        (Some((test, target)), true) => {
            metrics::attack_accuracy_of_states(&setup.models, states, test, *target)?
        }
        _ => 0.0,
    };
    let tracking_residual = metrics::tracking_residual(states, &setup.models)?;
    let consensus_error = metrics::consensus_error(states);
    let n_excluded = states
        .iter()
        .filter(|s| !s.role.is_malicious())
        .map(|s| s.row.excluded().len())
        .sum();
    Ok(MetricsRecord {
        round,
        test_accuracy,
        attack_accuracy,
        tracking_residual,
        consensus_error,
        n_excluded,
        wall_time_ms,
    })
}

fn step_client(
    state: &ClientState,
    snapshot: &RoundSnapshot,
    config: &EngineConfig,
    setup: &SimSetup,
    round: usize,
) -> Result<ClientState> {
    let mut next = match &state.role {
        Role::Malicious(spec) => malicious_step(state, snapshot, config, setup, spec, round)?,
        Role::Benign => match config.rule {
            AggregationRule::Gpd => gpd_benign_step(state, snapshot, config, setup, round)?,
            AggregationRule::Dsgt => dsgt_step(state, snapshot, config, setup, round)?,
            AggregationRule::Dsgd => dsgd_step(state, snapshot, config, setup, round)?,
        },
    };
    if let (Some(scale), Role::Benign) = (config.laplace_scale, &state.role) {
        let mut noise_rng = rng::stream(config.seed, "laplace", &[state.id as u64, round as u64]);
        let cumsum_shift = {
            let gamma = next.gamma.as_mut_slice();
            let mut shift = vec![0.0; gamma.len()];
            for (v, s) in gamma.iter_mut().zip(shift.iter_mut()) {
                let noise = sample_laplace(scale, &mut noise_rng);
                *v += noise;
                *s = noise;
            }
            shift
        };
        // Keep the compensator equal to the sum of published gammas.
        for (c, s) in next.gamma_cumsum.as_mut_slice().iter_mut().zip(&cumsum_shift) {
            *c += s;
        }
    }
    Ok(next)
}

fn sample_laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    // Inverse-CDF sampling on u in (-1/2, 1/2).
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Gradient of the round's batch at `params`: the whole shard under
/// full-batch mode, a seeded draw without replacement otherwise.
fn round_gradient(
    model: &ModelSpec,
    params: &ParamVec,
    shard: &Batch,
    config: &EngineConfig,
    id: usize,
    round: usize,
    stream_tag: &str,
) -> Result<ParamVec> {
    match config.batch {
        BatchMode::Full => Ok(eval_loss_grad(model, params, shard)?.1),
        BatchMode::Minibatch(size) => {
            let n = shard.n_examples();
            let take = size.min(n);
            let mut indices: Vec<usize> = (0..n).collect();
            let mut batch_rng = rng::stream(config.seed, stream_tag, &[id as u64, round as u64]);
            // Partial Fisher-Yates: only the first `take` positions matter.
            for i in 0..take {
                let j = batch_rng.random_range(i..n);
                indices.swap(i, j);
            }
            let batch = shard.subset(&indices[..take]);
            Ok(eval_loss_grad(model, params, &batch)?.1)
        }
    }
}

/// Weighted neighborhood aggregation `sum_j w_ij (theta_j - lambda gamma_j)`.
fn aggregate_theta(
    row: &WeightRow,
    snapshot: &RoundSnapshot,
    lambda: f64,
    dim: usize,
) -> Result<ParamVec> {
    let mut theta = ParamVec::zeros(dim);
    for j in row.active_ids() {
        if j >= snapshot.thetas.len() {
            return Err(Error::Protocol(format!("snapshot missing client {j}")));
        }
        let w = row.weight(j);
        theta.axpy(w, &snapshot.thetas[j]);
        theta.axpy(-w * lambda, &snapshot.gammas[j]);
    }
    Ok(theta)
}

/// The purification update for a benign client, in order:
///
/// 1. fold the snapshot into the recording variables,
/// 2. aggregate the model weight,
/// 3. take the local gradient at the new weight,
/// 4. rebuild the tracking variable from gated records minus the cumulative
///    compensator,
/// 5. extend the compensator,
/// 6. run detection and the latch on the weight row.
fn gpd_benign_step(
    state: &ClientState,
    snapshot: &RoundSnapshot,
    config: &EngineConfig,
    setup: &SimSetup,
    round: usize,
) -> Result<ClientState> {
    let mut next = state.clone();
    let row = &state.row;
    let active = row.active_ids();
    let cut = config.detection.cut(state.degree);

    // (1) beta_ij += w_ij^t * gamma_j^t for every active neighbor, self included.
    for &j in &active {
        if j >= snapshot.gammas.len() {
            return Err(Error::Protocol(format!("snapshot missing client {j}")));
        }
        let w = row.weight(j);
        let beta = next
            .beta
            .get_mut(&j)
            .ok_or_else(|| Error::Protocol(format!("no recording variable for neighbor {j}")))?;
        beta.axpy(w, &snapshot.gammas[j]);
    }

    // (2) model-weight aggregation over the same snapshot.
    next.theta = aggregate_theta(row, snapshot, config.lambda, state.theta.dim())?;

    // (3) local gradient at the new weight.
    let grad = round_gradient(
        &setup.models[state.id],
        &next.theta,
        &state.shard,
        config,
        state.id,
        round,
        "batch",
    )?;

    // (4) gamma <- grad + sum_j sgn(w_ij^t) beta_ij^t - cumulative gammas.
    // The gate compares the pre-detection weight against the fixed cut, so a
    // latched neighbor's entire record drops out here in a single round.
    let mut gamma = grad.clone();
    for (&j, beta) in next.beta.iter() {
        if row.weight(j) > cut {
            gamma.add_assign(beta);
        }
    }
    gamma.sub_assign(&state.gamma_cumsum);

    // (5) extend the compensator with the gamma just produced.
    next.gamma_cumsum = state.gamma_cumsum.clone();
    next.gamma_cumsum.add_assign(&gamma);
    next.gamma = gamma;
    next.last_grad = grad;

    // (6) detection, then the latch.
    if config.detection.kind != DetectionKind::None {
        let own_gamma = &snapshot.gammas[state.id];
        let neighbor_gammas: BTreeMap<usize, &ParamVec> =
            active.iter().map(|&j| (j, &snapshot.gammas[j])).collect();
        let adjusted = match config.detection.kind {
            DetectionKind::Consistency => {
                detection::consistency_adjust(own_gamma, &neighbor_gammas, row)?
            }
            DetectionKind::Similarity => {
                detection::similarity_adjust(own_gamma, &neighbor_gammas, row)?
            }
            DetectionKind::None => unreachable!(),
        };
        next.row = if config.detection.latch {
            let (latched, _newly) = if config.hooks.skip_latch_renormalization {
                detection::apply_latch_skipping_renormalization(
                    &adjusted,
                    state.degree,
                    &config.detection,
                )?
            } else {
                detection::apply_latch(&adjusted, state.degree, &config.detection)?
            };
            latched
        } else {
            adjusted
        };
    }

    Ok(next)
}

/// Plain gradient tracking: weight aggregation, then
/// `gamma <- sum_j w_ij gamma_j + grad(theta') - grad(theta)`.
/// Weights stay at their initial values.
fn dsgt_step(
    state: &ClientState,
    snapshot: &RoundSnapshot,
    config: &EngineConfig,
    setup: &SimSetup,
    round: usize,
) -> Result<ClientState> {
    let mut next = state.clone();
    let row = &state.row;
    next.theta = aggregate_theta(row, snapshot, config.lambda, state.theta.dim())?;
    let grad = round_gradient(
        &setup.models[state.id],
        &next.theta,
        &state.shard,
        config,
        state.id,
        round,
        "batch",
    )?;
    let mut gamma = ParamVec::zeros(state.gamma.dim());
    for j in row.active_ids() {
        gamma.axpy(row.weight(j), &snapshot.gammas[j]);
    }
    gamma.add_assign(&grad);
    gamma.sub_assign(&state.last_grad);
    next.gamma_cumsum = state.gamma_cumsum.clone();
    next.gamma_cumsum.add_assign(&gamma);
    next.gamma = gamma;
    next.last_grad = grad;
    Ok(next)
}

/// Decentralized SGD: the snapshot's gamma slot carries local gradients.
fn dsgd_step(
    state: &ClientState,
    snapshot: &RoundSnapshot,
    config: &EngineConfig,
    setup: &SimSetup,
    round: usize,
) -> Result<ClientState> {
    let mut next = state.clone();
    next.theta = aggregate_theta(&state.row, snapshot, config.lambda, state.theta.dim())?;
    let grad = round_gradient(
        &setup.models[state.id],
        &next.theta,
        &state.shard,
        config,
        state.id,
        round,
        "batch",
    )?;
    next.gamma_cumsum = state.gamma_cumsum.clone();
    next.gamma_cumsum.add_assign(&grad);
    next.gamma = grad.clone();
    next.last_grad = grad;
    Ok(next)
}

/// Malicious update: honest weight aggregation with the frozen initial row,
/// then a mixed clean/malicious gradient published as the tracking variable.
/// No recording variables, no detection, no latch.
fn malicious_step(
    state: &ClientState,
    snapshot: &RoundSnapshot,
    config: &EngineConfig,
    setup: &SimSetup,
    spec: &AttackSpec,
    round: usize,
) -> Result<ClientState> {
    let mut next = state.clone();
    next.theta = aggregate_theta(&state.row, snapshot, config.lambda, state.theta.dim())?;

    let clean_grad = round_gradient(
        &setup.models[state.id],
        &next.theta,
        &state.shard,
        config,
        state.id,
        round,
        "batch",
    )?;
    let malicious_grad = match &spec.kind {
        AttackKind::Backdoor9 { .. }
        | AttackKind::Backdoor1 { .. }
        | AttackKind::SingleImage { .. } => {
            let poisoned = state
                .poisoned_shard
                .as_ref()
                .ok_or_else(|| Error::Protocol("missing poisoned shard".into()))?;
            round_gradient(
                &setup.models[state.id],
                &next.theta,
                poisoned,
                config,
                state.id,
                round,
                "batch_malicious",
            )?
        }
        AttackKind::LieDeviation { z } => {
            let benign: Vec<&ParamVec> = (0..snapshot.gammas.len())
                .filter(|&j| !setup.roles[j].is_malicious())
                .map(|j| &snapshot.gammas[j])
                .collect();
            attack::craft_lie_deviation(&benign, *z)?
        }
        AttackKind::ConstantVector { vector } => {
            if vector.dim() != state.gamma.dim() {
                return Err(Error::Config(format!(
                    "constant attack vector has dim {}, model expects {}",
                    vector.dim(),
                    state.gamma.dim()
                )));
            }
            vector.clone()
        }
    };

    let gamma = attack::malicious_tracking_variable(&clean_grad, &malicious_grad, spec.pi)?;
    next.gamma_cumsum = state.gamma_cumsum.clone();
    next.gamma_cumsum.add_assign(&gamma);
    next.gamma = gamma;
    next.last_grad = clean_grad;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TopologyKind;
    use std::collections::BTreeSet;

    pub(crate) fn quadratic_world(centers: &[Vec<f64>], kind: TopologyKind) -> SimSetup {
        let n = centers.len();
        let topology = Topology::build(kind, n).unwrap();
        let models: Vec<ModelSpec> = centers
            .iter()
            .map(|c| ModelSpec::Quadratic {
                center: ParamVec::new(c.clone()),
            })
            .collect();
        let dim = centers[0].len();
        SimSetup {
            models,
            topology,
            shards: vec![Batch::empty(dim.max(1)); n],
            roles: vec![Role::Benign; n],
            clean_test: None,
            triggered_test: None,
            poisoned_shards: None,
        }
    }

    #[test]
    fn init_matches_the_contract() {
        let setup = quadratic_world(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            TopologyKind::Full,
        );
        let config = EngineConfig::new(AggregationRule::Gpd, 0.1, 10, 7);
        let clients = init_clients(&config, &setup).unwrap();
        for (i, c) in clients.iter().enumerate() {
            // gamma^0 = local gradient at theta^0, exactly.
            let (_, grad) = eval_loss_grad(&setup.models[i], &c.theta, &c.shard).unwrap();
            assert_eq!(c.gamma, grad);
            assert_eq!(c.gamma_cumsum, grad);
            // Recording variables start at zero, one per neighbor.
            assert_eq!(c.beta.len(), 3);
            assert!(c.beta.values().all(|b| *b == ParamVec::zeros(2)));
            // Uniform initial weights.
            for j in 0..3 {
                assert!((c.row.weight(j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // Identical seeds give identical initial states.
        let again = init_clients(&config, &setup).unwrap();
        for (a, b) in clients.iter().zip(&again) {
            assert_eq!(a.theta, b.theta);
            assert_eq!(a.gamma, b.gamma);
        }
    }

    /// An isolated client reduces to plain gradient descent with
    /// gamma tracking its own gradient.
    #[test]
    fn isolated_client_is_gradient_descent() {
        let topology = Topology::from_neighbors(TopologyKind::Full, vec![BTreeSet::from([0])])
            .unwrap();
        let setup = SimSetup {
            models: vec![ModelSpec::Quadratic {
                center: ParamVec::new(vec![2.0, -1.0]),
            }],
            topology,
            shards: vec![Batch::empty(2)],
            roles: vec![Role::Benign],
            clean_test: None,
            triggered_test: None,
            poisoned_shards: None,
        };
        let lambda = 0.1;
        let config = EngineConfig::new(AggregationRule::Gpd, lambda, 12, 3).without_detection();
        let mut theta = init_clients(&config, &setup).unwrap()[0].theta.clone();
        let out = run(&config, &setup).unwrap();
        // Reference: theta <- theta - lambda * (theta - c); gamma = grad(theta').
        let center = ParamVec::new(vec![2.0, -1.0]);
        for _ in 0..12 {
            let mut step = theta.clone();
            step.sub_assign(&center);
            theta.axpy(-lambda, &step);
        }
        let client = &out.clients[0];
        assert!(client.theta.linf_dist(&theta) < 1e-12);
        let mut expected_gamma = client.theta.clone();
        expected_gamma.sub_assign(&center);
        assert!(client.gamma.linf_dist(&expected_gamma) < 1e-12);
    }

    /// The recording-variable update equals the direct tracking update to
    /// high precision on an all-benign network.
    #[test]
    fn purification_matches_tracking_without_adversaries() {
        let centers = [vec![1.0, 0.0], vec![-1.0, 2.0]];
        let setup = quadratic_world(&centers, TopologyKind::Full);
        let gpd = EngineConfig::new(AggregationRule::Gpd, 0.1, 60, 5).without_detection();
        let dsgt = EngineConfig::new(AggregationRule::Dsgt, 0.1, 60, 5).without_detection();

        struct Trace(Vec<Vec<(ParamVec, ParamVec)>>);
        impl RoundObserver for Trace {
            fn on_round(
                &mut self,
                _round: usize,
                _before: &[ClientState],
                _snap: &RoundSnapshot,
                after: &[ClientState],
            ) {
                self.0
                    .push(after.iter().map(|s| (s.theta.clone(), s.gamma.clone())).collect());
            }
        }

        let mut ta = Trace(Vec::new());
        let mut tb = Trace(Vec::new());
        run_observed(&gpd, &setup, &mut ta).unwrap();
        run_observed(&dsgt, &setup, &mut tb).unwrap();
        for (ra, rb) in ta.0.iter().zip(&tb.0) {
            for ((theta_a, gamma_a), (theta_b, gamma_b)) in ra.iter().zip(rb) {
                assert!(theta_a.linf_dist(theta_b) <= 1e-9);
                assert!(gamma_a.linf_dist(gamma_b) <= 1e-9);
            }
        }
    }

    /// Sum of tracking variables equals sum of gradients under uniform
    /// fully-connected weights, every round.
    #[test]
    fn global_tracking_identity_for_dsgt() {
        let centers: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![i as f64, -(i as f64) * 0.5, 1.0])
            .collect();
        let setup = quadratic_world(&centers, TopologyKind::Full);
        let config = EngineConfig::new(AggregationRule::Dsgt, 0.1, 80, 11).without_detection();
        let out = run(&config, &setup).unwrap();
        for record in &out.records {
            assert!(record.tracking_residual <= 1e-9, "round {}", record.round);
        }
    }

    /// All clients share one center: consensus on that center.
    #[test]
    fn dsgt_consensus_on_a_shared_center() {
        let centers = vec![vec![0.5, -0.5]; 5];
        let setup = quadratic_world(&centers, TopologyKind::Ring);
        let config = EngineConfig::new(AggregationRule::Dsgt, 0.1, 500, 2).without_detection();
        let out = run(&config, &setup).unwrap();
        let target = ParamVec::new(vec![0.5, -0.5]);
        for client in &out.clients {
            assert!(client.theta.l2_dist(&target) < 1e-6);
        }

        // Independent linear-iteration oracle over the stacked (theta, gamma)
        // system, using the same initialization.
        let init = &out.init_clients;
        let n = 5;
        let w = |i: usize, j: usize| -> f64 {
            let t = Topology::build(TopologyKind::Ring, n).unwrap();
            if t.neighbors(i).contains(&j) {
                1.0 / t.degree(i) as f64
            } else {
                0.0
            }
        };
        let mut thetas: Vec<ParamVec> = init.iter().map(|c| c.theta.clone()).collect();
        let mut gammas: Vec<ParamVec> = init.iter().map(|c| c.gamma.clone()).collect();
        let mut grads: Vec<ParamVec> = init.iter().map(|c| c.last_grad.clone()).collect();
        for _ in 0..500 {
            let mut new_thetas = Vec::new();
            let mut new_gammas = Vec::new();
            let mut new_grads = Vec::new();
            for i in 0..n {
                let mut th = ParamVec::zeros(2);
                for j in 0..n {
                    let wij = w(i, j);
                    if wij > 0.0 {
                        th.axpy(wij, &thetas[j]);
                        th.axpy(-0.1 * wij, &gammas[j]);
                    }
                }
                let mut grad = th.clone();
                grad.sub_assign(&target);
                let mut gm = ParamVec::zeros(2);
                for j in 0..n {
                    let wij = w(i, j);
                    if wij > 0.0 {
                        gm.axpy(wij, &gammas[j]);
                    }
                }
                gm.add_assign(&grad);
                gm.sub_assign(&grads[i]);
                new_thetas.push(th);
                new_gammas.push(gm);
                new_grads.push(grad);
            }
            thetas = new_thetas;
            gammas = new_gammas;
            grads = new_grads;
        }
        for (oracle, client) in thetas.iter().zip(&out.clients) {
            assert!(oracle.linf_dist(&client.theta) < 1e-9);
        }
    }

    #[test]
    fn dsgd_single_client_is_gradient_descent() {
        let topology =
            Topology::from_neighbors(TopologyKind::Full, vec![BTreeSet::from([0])]).unwrap();
        let setup = SimSetup {
            models: vec![ModelSpec::Quadratic {
                center: ParamVec::new(vec![1.0]),
            }],
            topology,
            shards: vec![Batch::empty(1)],
            roles: vec![Role::Benign],
            clean_test: None,
            triggered_test: None,
            poisoned_shards: None,
        };
        let config = EngineConfig::new(AggregationRule::Dsgd, 0.2, 30, 1).without_detection();
        let out = run(&config, &setup).unwrap();
        let c = &out.clients[0];
        assert!(c.theta.l2_dist(&ParamVec::new(vec![1.0])) < 1e-2);
    }

    /// With identical data (identical centers), descent and tracking produce
    /// the same trajectory.
    #[test]
    fn dsgd_equals_dsgt_on_identical_data() {
        let centers = vec![vec![0.3, 0.7]; 4];
        let setup = quadratic_world(&centers, TopologyKind::Full);
        let a = EngineConfig::new(AggregationRule::Dsgd, 0.1, 40, 9).without_detection();
        let b = EngineConfig::new(AggregationRule::Dsgt, 0.1, 40, 9).without_detection();
        let out_a = run(&a, &setup).unwrap();
        let out_b = run(&b, &setup).unwrap();
        for (ca, cb) in out_a.clients.iter().zip(&out_b.clients) {
            assert!(ca.theta.linf_dist(&cb.theta) < 1e-9);
        }
    }

    /// Heterogeneous centers on a sparse graph: tracking reaches consensus
    /// where plain descent keeps a persistent gap.
    #[test]
    fn tracking_beats_descent_under_heterogeneity() {
        let centers = [
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![-2.0, 0.0],
            vec![0.0, -2.0],
            vec![1.0, 1.0],
        ];
        let setup = quadratic_world(&centers, TopologyKind::Ring);
        let dsgd = EngineConfig::new(AggregationRule::Dsgd, 0.1, 200, 4).without_detection();
        let dsgt = EngineConfig::new(AggregationRule::Dsgt, 0.1, 200, 4).without_detection();
        let err_dsgd = run(&dsgd, &setup).unwrap().records.last().unwrap().consensus_error;
        let err_dsgt = run(&dsgt, &setup).unwrap().records.last().unwrap().consensus_error;
        assert!(
            err_dsgd > err_dsgt,
            "dsgd consensus error {err_dsgd} vs dsgt {err_dsgt}"
        );
    }

    /// A pi = 0 attacker publishes its honest local gradient, which is
    /// exactly the decentralized-SGD step.
    #[test]
    fn pi_zero_attacker_matches_descent_client() {
        let centers = [vec![1.0, 1.0], vec![-1.0, 0.5], vec![0.0, -1.0]];
        let mut setup = quadratic_world(&centers, TopologyKind::Full);
        setup.roles[2] = Role::Malicious(
            AttackSpec::new(
                AttackKind::ConstantVector {
                    vector: ParamVec::new(vec![100.0, 100.0]),
                },
                0.0,
            )
            .unwrap(),
        );
        let config = EngineConfig::new(AggregationRule::Dsgd, 0.1, 25, 6).without_detection();
        let out = run(&config, &setup).unwrap();

        let mut honest = quadratic_world(&centers, TopologyKind::Full);
        honest.roles = vec![Role::Benign; 3];
        let out_honest = run(&config, &honest).unwrap();
        for (a, b) in out.clients.iter().zip(&out_honest.clients) {
            assert_eq!(a.theta, b.theta);
            assert_eq!(a.gamma, b.gamma);
        }
    }

    /// Malicious rows never change, even while benign rows evolve.
    #[test]
    fn malicious_weights_stay_initial() {
        let centers = [vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let mut setup = quadratic_world(&centers, TopologyKind::Full);
        setup.roles[2] = Role::Malicious(
            AttackSpec::new(
                AttackKind::ConstantVector {
                    vector: ParamVec::new(vec![50.0, -50.0]),
                },
                1.0,
            )
            .unwrap(),
        );
        let config = EngineConfig::new(AggregationRule::Gpd, 0.1, 30, 8);
        let out = run(&config, &setup).unwrap();
        let malicious = &out.clients[2];
        for j in 0..3 {
            assert_eq!(malicious.row.weight(j), 1.0 / 3.0);
        }
        assert!(malicious.beta.is_empty());
        // The benign clients latched the attacker.
        for benign in &out.clients[..2] {
            assert!(benign.row.is_excluded(2));
        }
    }

    /// With pi = 1 a lie-deviation attacker publishes exactly the crafted
    /// vector.
    #[test]
    fn lie_attacker_publishes_crafted_vector() {
        let centers = [vec![1.0], vec![-1.0], vec![0.5]];
        let mut setup = quadratic_world(&centers, TopologyKind::Full);
        setup.roles[2] =
            Role::Malicious(AttackSpec::new(AttackKind::LieDeviation { z: 1.5 }, 1.0).unwrap());
        let config = EngineConfig::new(AggregationRule::Gpd, 0.1, 1, 13).without_detection();

        struct Capture {
            crafted: Option<ParamVec>,
            published: Option<ParamVec>,
        }
        impl RoundObserver for Capture {
            fn on_round(
                &mut self,
                _round: usize,
                _before: &[ClientState],
                snap: &RoundSnapshot,
                after: &[ClientState],
            ) {
                let benign = [&snap.gammas[0], &snap.gammas[1]];
                self.crafted = Some(attack::craft_lie_deviation(&benign, 1.5).unwrap());
                self.published = Some(after[2].gamma.clone());
            }
        }
        let mut cap = Capture {
            crafted: None,
            published: None,
        };
        run_observed(&config, &setup, &mut cap).unwrap();
        assert_eq!(cap.crafted.unwrap(), cap.published.unwrap());
    }

    #[test]
    fn benign_only_strips_malicious_clients() {
        let centers: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0]).collect();
        let mut setup = quadratic_world(&centers, TopologyKind::Full);
        for id in [8, 9] {
            setup.roles[id] = Role::Malicious(
                AttackSpec::new(
                    AttackKind::ConstantVector {
                        vector: ParamVec::new(vec![10.0]),
                    },
                    1.0,
                )
                .unwrap(),
            );
        }
        let mut config = EngineConfig::new(AggregationRule::Dsgt, 0.1, 5, 3).without_detection();
        config.benign_only = true;
        let out = run(&config, &setup).unwrap();
        assert_eq!(out.clients.len(), 8);
        assert!(out.clients.iter().all(|c| !c.role.is_malicious()));
    }

    #[test]
    fn zero_rounds_is_a_config_error() {
        let setup = quadratic_world(&[vec![0.0], vec![1.0]], TopologyKind::Full);
        let config = EngineConfig::new(AggregationRule::Gpd, 0.1, 0, 0);
        assert!(matches!(run(&config, &setup), Err(Error::Config(_))));
    }

    /// Same config and seed: bitwise-identical metric traces.
    #[test]
    fn runs_are_bitwise_deterministic() {
        let centers = [vec![1.0, 2.0], vec![-2.0, 0.0], vec![0.0, 0.5]];
        let setup = quadratic_world(&centers, TopologyKind::Ring);
        let config = EngineConfig::new(AggregationRule::Gpd, 0.05, 40, 21);
        let a = run(&config, &setup).unwrap();
        let b = run(&config, &setup).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.test_accuracy.to_bits(), rb.test_accuracy.to_bits());
            assert_eq!(ra.tracking_residual.to_bits(), rb.tracking_residual.to_bits());
            assert_eq!(ra.consensus_error.to_bits(), rb.consensus_error.to_bits());
            assert_eq!(ra.n_excluded, rb.n_excluded);
        }
        for (ca, cb) in a.clients.iter().zip(&b.clients) {
            assert_eq!(ca.theta, cb.theta);
            assert_eq!(ca.gamma, cb.gamma);
        }
    }

    /// Step order cannot matter: every update reads only the snapshot.
    #[test]
    fn step_order_does_not_change_results() {
        let centers = [vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![-1.0, 0.2]];
        let mut setup = quadratic_world(&centers, TopologyKind::Full);
        setup.roles[3] = Role::Malicious(
            AttackSpec::new(AttackKind::LieDeviation { z: 2.0 }, 1.0).unwrap(),
        );
        let forward = EngineConfig::new(AggregationRule::Gpd, 0.1, 25, 17);
        let mut reverse = forward.clone();
        reverse.hooks.reverse_step_order = true;
        let a = run(&forward, &setup).unwrap();
        let b = run(&reverse, &setup).unwrap();
        for (ca, cb) in a.clients.iter().zip(&b.clients) {
            assert_eq!(ca.theta, cb.theta);
            assert_eq!(ca.gamma, cb.gamma);
        }
    }

    /// Ledger contract: every recording variable equals the weight-scaled
    /// running sum of published tracking variables, with identical
    /// arithmetic order, so the comparison is exact.
    #[test]
    fn recording_variables_match_a_shadow_ledger() {
        use std::collections::BTreeMap;
        let centers = [vec![2.0, -1.0], vec![0.0, 1.5], vec![-2.0, 0.3]];
        let mut setup = quadratic_world(&centers, TopologyKind::Full);
        setup.roles[2] = Role::Malicious(
            AttackSpec::new(
                AttackKind::ConstantVector {
                    vector: ParamVec::new(vec![30.0, -30.0]),
                },
                1.0,
            )
            .unwrap(),
        );

        struct Shadow {
            ledgers: BTreeMap<usize, BTreeMap<usize, ParamVec>>,
            worst: f64,
        }
        impl RoundObserver for Shadow {
            fn on_round(
                &mut self,
                _round: usize,
                before: &[ClientState],
                snap: &RoundSnapshot,
                after: &[ClientState],
            ) {
                for state in before {
                    if state.role.is_malicious() {
                        continue;
                    }
                    let ledger = self
                        .ledgers
                        .entry(state.id)
                        .or_insert_with(|| {
                            state
                                .beta
                                .keys()
                                .map(|&j| (j, ParamVec::zeros(state.gamma.dim())))
                                .collect()
                        });
                    for j in state.row.active_ids() {
                        let w = state.row.weight(j);
                        ledger.get_mut(&j).unwrap().axpy(w, &snap.gammas[j]);
                    }
                }
                for state in after {
                    if state.role.is_malicious() {
                        continue;
                    }
                    for (j, beta) in &state.beta {
                        let dev = beta.linf_dist(&self.ledgers[&state.id][j]);
                        self.worst = self.worst.max(dev);
                    }
                }
            }
        }

        let config = EngineConfig::new(AggregationRule::Gpd, 0.1, 50, 33);
        let mut shadow = Shadow {
            ledgers: BTreeMap::new(),
            worst: 0.0,
        };
        run_observed(&config, &setup, &mut shadow).unwrap();
        assert_eq!(shadow.worst, 0.0);
    }

    /// After a neighbor latches, recomputing the gated sum with the excluded
    /// record added back differs from the actual update by exactly that
    /// record; the actual update carries no residue of it.
    #[test]
    fn latch_removes_the_recorded_history_in_one_shot() {
        let centers = [vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.5, 0.5]];
        let mut setup = quadratic_world(&centers, TopologyKind::Full);
        setup.roles[2] = Role::Malicious(
            AttackSpec::new(
                AttackKind::ConstantVector {
                    vector: ParamVec::new(vec![80.0, -40.0]),
                },
                1.0,
            )
            .unwrap(),
        );

        struct Probe {
            checked: usize,
        }
        impl RoundObserver for Probe {
            fn on_round(
                &mut self,
                _round: usize,
                before: &[ClientState],
                _snap: &RoundSnapshot,
                after: &[ClientState],
            ) {
                for (prev, next) in before.iter().zip(after) {
                    if prev.role.is_malicious() || !prev.row.is_excluded(2) {
                        continue;
                    }
                    // Reconstruct the gated sum exactly as the step does.
                    let cut = 0.1 / prev.degree as f64;
                    let mut with_excluded = next.last_grad.clone();
                    let mut actual = next.last_grad.clone();
                    for (&j, beta) in next.beta.iter() {
                        if prev.row.weight(j) > cut {
                            with_excluded.add_assign(beta);
                            actual.add_assign(beta);
                        } else {
                            with_excluded.add_assign(beta);
                        }
                    }
                    with_excluded.sub_assign(&prev.gamma_cumsum);
                    actual.sub_assign(&prev.gamma_cumsum);
                    assert_eq!(actual, next.gamma, "gated recomputation must be exact");
                    let mut difference = with_excluded.clone();
                    difference.sub_assign(&next.gamma);
                    // Difference of two large gated sums; compare at the
                    // identity tolerance rather than bitwise.
                    assert!(difference.linf_dist(&next.beta[&2]) < 1e-9);
                    self.checked += 1;
                }
            }
        }
        let config = EngineConfig::new(AggregationRule::Gpd, 0.1, 30, 12);
        let mut probe = Probe { checked: 0 };
        run_observed(&config, &setup, &mut probe).unwrap();
        assert!(probe.checked > 0, "the attacker never latched");
    }
}
