//! Synthetic image data, shard partitioners, and poisoning transforms.
//!
//! The dataset is a 10-class set of 8x8 grayscale images: each class has a
//! fixed prototype (a bright 2x2 block on a mid-gray background, placed clear
//! of the top-left corner where the backdoor triggers live), and examples are
//! prototypes plus per-pixel Gaussian noise clipped to `[0, 1]`.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng;

pub const IMAGE_SIDE: usize = 8;
pub const N_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const N_CLASSES: usize = 10;

/// Top-left corner of each class's bright 2x2 block, in (row, col).
/// None of the blocks intersects the 3x3 corner reserved for triggers.
const BLOCK_ORIGIN: [(usize, usize); N_CLASSES] = [
    (0, 4),
    (0, 6),
    (2, 4),
    (2, 6),
    (4, 0),
    (4, 2),
    (4, 4),
    (4, 6),
    (6, 0),
    (6, 2),
];

const BACKGROUND: f64 = 0.45;
const BLOCK_VALUE: f64 = 0.95;

/// A generated image set together with the class prototypes it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Batch,
    /// `N_CLASSES x N_PIXELS`, row-major.
    pub prototypes: Vec<f64>,
}

impl Dataset {
    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class * N_PIXELS..(class + 1) * N_PIXELS]
    }
}

/// The fixed prototype image for one class.
pub fn class_prototype(class: usize) -> Vec<f64> {
    let mut img = vec![BACKGROUND; N_PIXELS];
    let (r0, c0) = BLOCK_ORIGIN[class];
    for r in r0..r0 + 2 {
        for c in c0..c0 + 2 {
            img[r * IMAGE_SIDE + c] = BLOCK_VALUE;
        }
    }
    img
}

/// Generate `10 * n_per_class` examples: prototype plus i.i.d. Gaussian noise
/// per pixel, clipped to `[0, 1]`. Deterministic per seed.
pub fn generate_dataset(seed: u64, n_per_class: usize, noise_sigma: f64) -> Result<Dataset> {
    if n_per_class < 1 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config("noise_sigma must be non-negative".into()));
    }
    let mut rng = rng::stream(seed, "dataset", &[]);
    let normal = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::Config(format!("invalid noise sigma: {e}")))?;
    let mut examples = Batch::empty(N_PIXELS);
    let mut prototypes = Vec::with_capacity(N_CLASSES * N_PIXELS);
    let mut img = vec![0.0; N_PIXELS];
    for class in 0..N_CLASSES {
        let proto = class_prototype(class);
        prototypes.extend_from_slice(&proto);
        for _ in 0..n_per_class {
            for (dst, p) in img.iter_mut().zip(&proto) {
                let noisy = if noise_sigma == 0.0 {
                    *p
                } else {
                    p + normal.sample(&mut rng)
                };
                *dst = noisy.clamp(0.0, 1.0);
            }
            examples.push_row(&img, class);
        }
    }
    Ok(Dataset {
        examples,
        prototypes,
    })
}

/// How a dataset is split into per-client shards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    /// Shuffle and deal evenly; shard sizes differ by at most one.
    Iid,
    /// Each class goes wholly to exactly one client, spread as evenly as possible.
    NonOverlap,
    /// Per-class client proportions drawn from Dirichlet(alpha).
    LabelDirichlet { alpha: f64 },
    /// Per-client sizes drawn from Dirichlet(alpha) with a uniform class mix.
    QuantityDirichlet { alpha: f64 },
}

impl PartitionSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionSpec::Iid => "iid",
            PartitionSpec::NonOverlap => "non_overlap",
            PartitionSpec::LabelDirichlet { .. } => "label_dir",
            PartitionSpec::QuantityDirichlet { .. } => "quantity_dir",
        }
    }

    fn validate(&self, n_clients: usize) -> Result<()> {
        if n_clients < 2 {
            return Err(Error::Config("partition requires at least 2 clients".into()));
        }
        match self {
            PartitionSpec::NonOverlap if n_clients > N_CLASSES => Err(Error::Config(format!(
                "non_overlap supports at most {N_CLASSES} clients, got {n_clients}"
            ))),
            PartitionSpec::LabelDirichlet { alpha } | PartitionSpec::QuantityDirichlet { alpha }
                if *alpha <= 0.0 =>
            {
                Err(Error::Config("dirichlet alpha must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

const DIRICHLET_RETRIES: usize = 10;

/// Assign every example index to a client. Dirichlet variants resample up to
/// ten times if any shard comes out empty.
pub fn partition_indices(
    dataset: &Dataset,
    spec: &PartitionSpec,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate(n_clients)?;
    let n = dataset.examples.n_examples();
    match spec {
        PartitionSpec::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, "partition_iid", &[]));
            let mut shards = vec![Vec::new(); n_clients];
            for (pos, idx) in order.into_iter().enumerate() {
                shards[pos % n_clients].push(idx);
            }
            for shard in &mut shards {
                shard.sort_unstable();
            }
            Ok(shards)
        }
        PartitionSpec::NonOverlap => {
            // Classes chunked in order; the first (10 mod m) clients take the
            // larger chunks. Deterministic, so the seed is unused here.
            let base = N_CLASSES / n_clients;
            let extra = N_CLASSES % n_clients;
            let mut shards = vec![Vec::new(); n_clients];
            let mut class = 0;
            for (client, shard) in shards.iter_mut().enumerate() {
                let take = base + usize::from(client < extra);
                let classes: BTreeSet<usize> = (class..class + take).collect();
                class += take;
                for idx in 0..n {
                    if classes.contains(&dataset.examples.label(idx)) {
                        shard.push(idx);
                    }
                }
            }
            Ok(shards)
        }
        PartitionSpec::LabelDirichlet { alpha } => {
            for attempt in 0..DIRICHLET_RETRIES {
                let mut rng = rng::stream(seed, "partition_label_dir", &[attempt as u64]);
                let mut shards = vec![Vec::new(); n_clients];
                for class in 0..N_CLASSES {
                    let props = dirichlet(*alpha, n_clients, &mut rng)?;
                    let cdf = cumulative(&props);
                    for idx in 0..n {
                        if dataset.examples.label(idx) == class {
                            let u: f64 = rng.random();
                            shards[pick(&cdf, u)].push(idx);
                        }
                    }
                }
                if shards.iter().all(|s| !s.is_empty()) {
                    return Ok(shards);
                }
            }
            Err(Error::Partition(format!(
                "label dirichlet left an empty shard after {DIRICHLET_RETRIES} attempts"
            )))
        }
        PartitionSpec::QuantityDirichlet { alpha } => {
            for attempt in 0..DIRICHLET_RETRIES {
                let mut rng = rng::stream(seed, "partition_quantity_dir", &[attempt as u64]);
                let props = dirichlet(*alpha, n_clients, &mut rng)?;
                let sizes = largest_remainder(&props, n);
                if sizes.iter().any(|&s| s == 0) {
                    continue;
                }
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let mut shards = Vec::with_capacity(n_clients);
                let mut cursor = 0;
                for &size in &sizes {
                    let mut shard: Vec<usize> = order[cursor..cursor + size].to_vec();
                    shard.sort_unstable();
                    shards.push(shard);
                    cursor += size;
                }
                return Ok(shards);
            }
            Err(Error::Partition(format!(
                "quantity dirichlet left an empty shard after {DIRICHLET_RETRIES} attempts"
            )))
        }
    }
}

/// Materialized per-client shards.
pub fn partition(
    dataset: &Dataset,
    spec: &PartitionSpec,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let indices = partition_indices(dataset, spec, n_clients, seed)?;
    Ok(indices
        .iter()
        .map(|idx| dataset.examples.subset(idx))
        .collect())
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma =
        Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("invalid alpha: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Tiny alpha can underflow every component; redraw.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|d| d / total).collect());
        }
    }
}

fn cumulative(props: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    props
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = props.iter().map(|p| (p * total as f64) as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut remainders: Vec<(usize, f64)> = props
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - sizes[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..total - assigned {
        sizes[remainders[k].0] += 1;
    }
    sizes
}

/// A pixel-pattern backdoor trigger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    /// Flattened pixel positions; 9 for the 3x3 variant, 1 for the single-pixel one.
    pub pixel_indices: Vec<usize>,
    pub trigger_value: f64,
    pub target_label: usize,
}

impl TriggerSpec {
    pub fn new(pixel_indices: Vec<usize>, trigger_value: f64, target_label: usize) -> Result<Self> {
        let spec = TriggerSpec {
            pixel_indices,
            trigger_value,
            target_label,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 3x3 block in the top-left corner at full brightness.
    pub fn nine_pixel(target_label: usize) -> Self {
        let mut pixel_indices = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                pixel_indices.push(r * IMAGE_SIDE + c);
            }
        }
        TriggerSpec {
            pixel_indices,
            trigger_value: 1.0,
            target_label,
        }
    }

    /// Pixel (0, 0) at full brightness.
    pub fn one_pixel(target_label: usize) -> Self {
        TriggerSpec {
            pixel_indices: vec![0],
            trigger_value: 1.0,
            target_label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_label >= N_CLASSES {
            return Err(Error::Config(format!(
                "trigger target label {} out of range",
                self.target_label
            )));
        }
        if !(0.0..=1.0).contains(&self.trigger_value) {
            return Err(Error::Config("trigger value must lie in [0, 1]".into()));
        }
        if self.pixel_indices.iter().any(|&p| p >= N_PIXELS) {
            return Err(Error::Config("trigger pixel index out of range".into()));
        }
        match self.pixel_indices.len() {
            1 => Ok(()),
            9 => {
                let mut sorted = self.pixel_indices.clone();
                sorted.sort_unstable();
                let r0 = sorted[0] / IMAGE_SIDE;
                let c0 = sorted[0] % IMAGE_SIDE;
                if r0 + 2 >= IMAGE_SIDE || c0 + 2 >= IMAGE_SIDE {
                    return Err(Error::Config("3x3 trigger block leaves the image".into()));
                }
                for r in 0..3 {
                    for c in 0..3 {
                        if sorted[r * 3 + c] != (r0 + r) * IMAGE_SIDE + (c0 + c) {
                            return Err(Error::Config(
                                "9-pixel trigger must be a contiguous 3x3 block".into(),
                            ));
                        }
                    }
                }
                Ok(())
            }
            n => Err(Error::Config(format!(
                "trigger must have 1 or 9 pixels, got {n}"
            ))),
        }
    }

    fn stamp(&self, batch: &mut Batch, example: usize) {
        for &p in &self.pixel_indices {
            batch.set_pixel(example, p, self.trigger_value);
        }
    }
}

/// Overwrite the trigger pixels and target label on a seeded random
/// `round(poison_fraction * N)` examples; everything else is untouched.
pub fn apply_backdoor(
    shard: &Batch,
    trigger: &TriggerSpec,
    poison_fraction: f64,
    seed: u64,
) -> Result<Batch> {
    trigger.validate()?;
    if !(0.0..=1.0).contains(&poison_fraction) {
        return Err(Error::Config("poison_fraction must lie in [0, 1]".into()));
    }
    let n = shard.n_examples();
    let k = (poison_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "backdoor", &[]));
    let mut out = shard.clone();
    for &idx in order.iter().take(k) {
        trigger.stamp(&mut out, idx);
        out.set_label(idx, trigger.target_label);
    }
    Ok(out)
}

/// Duplicate one seeded example of `source_class` `copies` times with the
/// wrong label and append the copies to the shard.
pub fn inject_single_image(
    shard: &Batch,
    source_class: usize,
    wrong_label: usize,
    copies: usize,
    seed: u64,
) -> Result<Batch> {
    if copies < 1 {
        return Err(Error::Config("copies must be at least 1".into()));
    }
    let candidates: Vec<usize> = (0..shard.n_examples())
        .filter(|&i| shard.label(i) == source_class)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Input(format!(
            "shard holds no example of source class {source_class}"
        )));
    }
    let mut rng = rng::stream(seed, "single_image", &[]);
    let chosen = candidates[rng.random_range(0..candidates.len())];
    let mut out = shard.clone();
    let row = shard.row(chosen).to_vec();
    for _ in 0..copies {
        out.push_row(&row, wrong_label);
    }
    Ok(out)
}

/// Stamp the trigger onto every example whose label differs from the target;
/// original labels are kept so attack accuracy can be scored against them.
pub fn make_triggered_testset(examples: &Batch, trigger: &TriggerSpec) -> Result<Batch> {
    trigger.validate()?;
    let mut out = Batch::empty(examples.n_features());
    for i in 0..examples.n_examples() {
        if examples.label(i) == trigger.target_label {
            continue;
        }
        out.push_row(examples.row(i), examples.label(i));
        let last = out.n_examples() - 1;
        trigger.stamp(&mut out, last);
    }
    Ok(out)
}

const DATASET_MAGIC: u64 = 0x4446_4c44_5345_5431; // "DFLDSET1"

/// Write a dataset as a flat little-endian binary file.
///
/// Layout: magic, n_examples, n_features, n_classes, n_prototypes as u64,
/// then images (f64), labels (u64), prototypes (f64).
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let ex = &dataset.examples;
    for header in [
        DATASET_MAGIC,
        ex.n_examples() as u64,
        ex.n_features() as u64,
        N_CLASSES as u64,
        (dataset.prototypes.len() / N_PIXELS) as u64,
    ] {
        file.write_all(&header.to_le_bytes())?;
    }
    for v in ex.features() {
        file.write_all(&v.to_le_bytes())?;
    }
    for &l in ex.labels() {
        file.write_all(&(l as u64).to_le_bytes())?;
    }
    for v in &dataset.prototypes {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u64_buf = [0u8; 8];
    let mut read_u64 = |file: &mut dyn Read| -> Result<u64> {
        file.read_exact(&mut u64_buf)?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    if read_u64(&mut file)? != DATASET_MAGIC {
        return Err(Error::Input("not a dataset file (bad magic)".into()));
    }
    let n_examples = read_u64(&mut file)? as usize;
    let n_features = read_u64(&mut file)? as usize;
    let _n_classes = read_u64(&mut file)? as usize;
    let n_prototypes = read_u64(&mut file)? as usize;

    let mut f64_buf = [0u8; 8];
    let mut features = Vec::with_capacity(n_examples * n_features);
    for _ in 0..n_examples * n_features {
        file.read_exact(&mut f64_buf)?;
        features.push(f64::from_le_bytes(f64_buf));
    }
    let mut labels = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        file.read_exact(&mut f64_buf)?;
        labels.push(u64::from_le_bytes(f64_buf) as usize);
    }
    let mut prototypes = Vec::with_capacity(n_prototypes * n_features);
    for _ in 0..n_prototypes * n_features {
        file.read_exact(&mut f64_buf)?;
        prototypes.push(f64::from_le_bytes(f64_buf));
    }
    Ok(Dataset {
        examples: Batch::new(features, n_features, labels)?,
        prototypes,
    })
}
