//! Malicious-client gradient construction.
//!
//! A malicious client trains honestly on its own data, derives a second
//! gradient from an attack-specific transform of that data (or crafts one
//! from observed benign state), and publishes the affine mixture
//! `(1 - pi) * clean + pi * malicious` as its gradient tracking variable.
//! Only the tracking variable is manipulated; the model-weight aggregation
//! stays honest so the two stay mutually consistent and harder to flag.

use crate::data::{self, TriggerSpec};
use crate::error::{Error, Result};
use crate::model::{eval_loss_grad, Batch, ModelSpec, ParamVec};

/// What the malicious gradient is derived from.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackKind {
    /// Stamp a 3x3 pixel block and rewrite labels on a fraction of the shard.
    Backdoor9 {
        trigger: TriggerSpec,
        poison_fraction: f64,
    },
    /// Single-pixel variant of the same.
    Backdoor1 {
        trigger: TriggerSpec,
        poison_fraction: f64,
    },
    /// Append many copies of one mislabeled image.
    SingleImage {
        source_class: usize,
        wrong_label: usize,
        copies: usize,
    },
    /// Omniscient deviation: mean of the benign tracking variables plus
    /// `z` population standard deviations, coordinatewise.
    LieDeviation { z: f64 },
    /// Publish a fixed vector. Used by the contour experiments, where the
    /// model is a quadratic and data poisoning has nothing to poison.
    ConstantVector { vector: ParamVec },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Backdoor9 { .. } => "backdoor9",
            AttackKind::Backdoor1 { .. } => "backdoor1",
            AttackKind::SingleImage { .. } => "single_image",
            AttackKind::LieDeviation { .. } => "lie_deviation",
            AttackKind::ConstantVector { .. } => "constant",
        }
    }

    /// Whether the malicious gradient comes from a transformed shard.
    pub fn is_data_poisoning(&self) -> bool {
        matches!(
            self,
            AttackKind::Backdoor9 { .. } | AttackKind::Backdoor1 { .. } | AttackKind::SingleImage { .. }
        )
    }
}

/// A full attack description: the transform plus the malicious level.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Mixing coefficient between the honest and malicious gradients.
    pub pi: f64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, pi: f64) -> Result<AttackSpec> {
        let spec = AttackSpec { kind, pi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Config(format!(
                "malicious level pi must lie in [0, 1], got {}",
                self.pi
            )));
        }
        match &self.kind {
            AttackKind::Backdoor9 { trigger, poison_fraction } => {
                trigger.validate()?;
                if trigger.pixel_indices.len() != 9 {
                    return Err(Error::Config("backdoor9 requires a 9-pixel trigger".into()));
                }
                check_fraction(*poison_fraction)
            }
            AttackKind::Backdoor1 { trigger, poison_fraction } => {
                trigger.validate()?;
                if trigger.pixel_indices.len() != 1 {
                    return Err(Error::Config("backdoor1 requires a 1-pixel trigger".into()));
                }
                check_fraction(*poison_fraction)
            }
            AttackKind::SingleImage { copies, .. } => {
                if *copies < 1 {
                    return Err(Error::Config("single_image needs at least one copy".into()));
                }
                Ok(())
            }
            AttackKind::LieDeviation { z } => {
                if *z < 0.0 {
                    return Err(Error::Config("lie deviation scale z must be >= 0".into()));
                }
                Ok(())
            }
            AttackKind::ConstantVector { .. } => Ok(()),
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "poison_fraction must lie in [0, 1], got {f}"
        )))
    }
}

/// `(1 - pi) * clean + pi * malicious`.
pub fn malicious_tracking_variable(
    clean_grad: &ParamVec,
    malicious_grad: &ParamVec,
    pi: f64,
) -> Result<ParamVec> {
    if clean_grad.dim() != malicious_grad.dim() {
        return Err(Error::Config(format!(
            "gradient dims differ: {} vs {}",
            clean_grad.dim(),
            malicious_grad.dim()
        )));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::Config(format!("pi must lie in [0, 1], got {pi}")));
    }
    let mut out = clean_grad.clone();
    out.scale(1.0 - pi);
    out.axpy(pi, malicious_grad);
    Ok(out)
}

/// The poisoned version of a shard for a data-poisoning attack kind.
pub fn transform_shard(spec: &AttackSpec, shard: &Batch, seed: u64) -> Result<Batch> {
    match &spec.kind {
        AttackKind::Backdoor9 { trigger, poison_fraction }
        | AttackKind::Backdoor1 { trigger, poison_fraction } => {
            data::apply_backdoor(shard, trigger, *poison_fraction, seed)
        }
        AttackKind::SingleImage { source_class, wrong_label, copies } => {
            data::inject_single_image(shard, *source_class, *wrong_label, *copies, seed)
        }
        AttackKind::LieDeviation { .. } | AttackKind::ConstantVector { .. } => Err(Error::Input(
            format!("attack kind {} has no data transform", spec.kind.name()),
        )),
    }
}

/// Clean and malicious full-batch gradients at `params` for a data-poisoning
/// attack. The clean gradient comes from the untouched shard, the malicious
/// one from the transformed shard.
pub fn malicious_loss_grad(
    spec: &AttackSpec,
    model: &ModelSpec,
    params: &ParamVec,
    clean_shard: &Batch,
    seed: u64,
) -> Result<(ParamVec, ParamVec)> {
    if !spec.kind.is_data_poisoning() {
        return Err(Error::Input(format!(
            "malicious_loss_grad applies to data-poisoning attacks, not {}",
            spec.kind.name()
        )));
    }
    let (_, clean_grad) = eval_loss_grad(model, params, clean_shard)?;
    let poisoned = transform_shard(spec, clean_shard, seed)?;
    let (_, malicious_grad) = eval_loss_grad(model, params, &poisoned)?;
    Ok((clean_grad, malicious_grad))
}

/// Coordinatewise `mean(benign) + z * std(benign)` with the population
/// standard deviation. Requires at least two benign vectors.
pub fn craft_lie_deviation(benign_gammas: &[&ParamVec], z: f64) -> Result<ParamVec> {
    if benign_gammas.len() < 2 {
        return Err(Error::Input(
            "lie deviation needs at least two benign tracking variables".into(),
        ));
    }
    let dim = benign_gammas[0].dim();
    if benign_gammas.iter().any(|g| g.dim() != dim) {
        return Err(Error::Config("benign tracking variables differ in dim".into()));
    }
    let n = benign_gammas.len() as f64;
    let mut out = ParamVec::zeros(dim);
    for i in 0..dim {
        let mean = benign_gammas.iter().map(|g| g.as_slice()[i]).sum::<f64>() / n;
        let var = benign_gammas
            .iter()
            .map(|g| {
                let d = g.as_slice()[i] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        out.as_mut_slice()[i] = mean + z * var.sqrt();
    }
    Ok(out)
}
