//! Differentiable objectives and their exact gradients.
//!
//! Every client trains one of three model variants: an isotropic quadratic
//! bowl with a client-specific center, multinomial logistic regression, or a
//! one-hidden-layer perceptron. All parameters, gradients, and tracking
//! variables share a single flat representation, [`ParamVec`], so the
//! aggregation engine never needs to know which model it is driving.

use crate::error::{Error, Result};

/// Flat vector of 64-bit reals. The uniform representation for model weights,
/// local gradients, gradient tracking variables, and recording variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVec {
    values: Vec<f64>,
}

impl ParamVec {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVec { values }
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVec {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += other`, entry by entry.
    pub fn add_assign(&mut self, other: &ParamVec) {
        debug_assert_eq!(self.dim(), other.dim());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += o;
        }
    }

    /// `self -= other`, entry by entry.
    pub fn sub_assign(&mut self, other: &ParamVec) {
        debug_assert_eq!(self.dim(), other.dim());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s -= o;
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &ParamVec) {
        debug_assert_eq!(self.dim(), other.dim());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in self.values.iter_mut() {
            *s *= a;
        }
    }

    pub fn dot(&self, other: &ParamVec) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_dist(&self, other: &ParamVec) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn linf_dist(&self, other: &ParamVec) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// A set of examples. Feature rows are stored row-major; labels are class
/// indices (ignored by the quadratic model).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, n_features: usize, labels: Vec<usize>) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Config("batch feature width must be positive".into()));
        }
        if features.len() != n_features * labels.len() {
            return Err(Error::Config(format!(
                "feature buffer holds {} values, expected {} rows x {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        Ok(Batch {
            features,
            n_features,
            labels,
        })
    }

    /// An empty batch with the given feature width.
    pub fn empty(n_features: usize) -> Self {
        Batch {
            features: Vec::new(),
            n_features,
            labels: Vec::new(),
        }
    }

    pub fn n_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn push_row(&mut self, row: &[f64], label: usize) {
        debug_assert_eq!(row.len(), self.n_features);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// New batch holding the given subset of rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Batch {
        let mut out = Batch::empty(self.n_features);
        for &i in indices {
            out.push_row(self.row(i), self.label(i));
        }
        out
    }

    pub(crate) fn set_pixel(&mut self, example: usize, pixel: usize, value: f64) {
        self.features[example * self.n_features + pixel] = value;
    }

    pub(crate) fn set_label(&mut self, example: usize, label: usize) {
        self.labels[example] = label;
    }
}

/// Which objective a client minimizes. The parameter dimension is a pure
/// function of the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    /// `½‖θ − c‖²` with a fixed center; ignores the batch.
    Quadratic { center: ParamVec },
    /// Multinomial logistic regression with cross-entropy loss.
    SoftmaxRegression { n_features: usize, n_classes: usize },
    /// One hidden rectifier layer followed by softmax cross-entropy.
    Mlp1 {
        n_features: usize,
        n_hidden: usize,
        n_classes: usize,
    },
}

impl ModelSpec {
    pub fn param_dim(&self) -> usize {
        match self {
            ModelSpec::Quadratic { center } => center.dim(),
            ModelSpec::SoftmaxRegression {
                n_features,
                n_classes,
            } => n_features * n_classes + n_classes,
            ModelSpec::Mlp1 {
                n_features,
                n_hidden,
                n_classes,
            } => n_features * n_hidden + n_hidden + n_hidden * n_classes + n_classes,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::Quadratic { .. })
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            ModelSpec::Quadratic { .. } => None,
            ModelSpec::SoftmaxRegression { n_classes, .. } => Some(*n_classes),
            ModelSpec::Mlp1 { n_classes, .. } => Some(*n_classes),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        match self {
            ModelSpec::Quadratic { .. } => Ok(()),
            ModelSpec::SoftmaxRegression {
                n_features,
                n_classes,
            }
            | ModelSpec::Mlp1 {
                n_features,
                n_classes,
                ..
            } => {
                if batch.is_empty() {
                    return Err(Error::Input(
                        "empty batch for a data-driven model variant".into(),
                    ));
                }
                if batch.n_features() != *n_features {
                    return Err(Error::Config(format!(
                        "batch feature width {} does not match model n_features {}",
                        batch.n_features(),
                        n_features
                    )));
                }
                if let Some(&bad) = batch.labels().iter().find(|&&l| l >= *n_classes) {
                    return Err(Error::Input(format!(
                        "label {bad} out of range for {n_classes} classes"
                    )));
                }
                Ok(())
            }
        }
    }

    fn check_params(&self, params: &ParamVec) -> Result<()> {
        if params.dim() != self.param_dim() {
            return Err(Error::Config(format!(
                "parameter vector has dim {}, model expects {}",
                params.dim(),
                self.param_dim()
            )));
        }
        Ok(())
    }
}

/// Mean loss over the batch and its exact gradient with respect to `params`.
///
/// Deterministic: identical inputs produce bitwise-identical outputs.
pub fn eval_loss_grad(model: &ModelSpec, params: &ParamVec, batch: &Batch) -> Result<(f64, ParamVec)> {
    model.check_params(params)?;
    model.check_batch(batch)?;
    match model {
        ModelSpec::Quadratic { center } => {
            let mut grad = params.clone();
            grad.sub_assign(center);
            let loss = 0.5 * grad.dot(&grad);
            Ok((loss, grad))
        }
        ModelSpec::SoftmaxRegression {
            n_features,
            n_classes,
        } => softmax_loss_grad(params, batch, *n_features, *n_classes),
        ModelSpec::Mlp1 {
            n_features,
            n_hidden,
            n_classes,
        } => mlp1_loss_grad(params, batch, *n_features, *n_hidden, *n_classes),
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Parameter layout: W as `n_classes x n_features` row-major, then the bias.
fn softmax_loss_grad(
    params: &ParamVec,
    batch: &Batch,
    n_features: usize,
    n_classes: usize,
) -> Result<(f64, ParamVec)> {
    let p = params.as_slice();
    let (w, b) = p.split_at(n_classes * n_features);
    let n = batch.n_examples() as f64;
    let inv_n = 1.0 / n;

    let mut loss = 0.0;
    let mut grad = ParamVec::zeros(params.dim());
    let mut logits = vec![0.0; n_classes];
    for i in 0..batch.n_examples() {
        let x = batch.row(i);
        let y = batch.label(i);
        for (k, logit) in logits.iter_mut().enumerate() {
            let row = &w[k * n_features..(k + 1) * n_features];
            let mut acc = b[k];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *logit = acc;
        }
        let lse = log_sum_exp(&logits);
        loss += (lse - logits[y]) * inv_n;
        let g = grad.as_mut_slice();
        for k in 0..n_classes {
            let mut coef = (logits[k] - lse).exp();
            if k == y {
                coef -= 1.0;
            }
            coef *= inv_n;
            let grow = &mut g[k * n_features..(k + 1) * n_features];
            for (gv, xv) in grow.iter_mut().zip(x) {
                *gv += coef * xv;
            }
            g[n_classes * n_features + k] += coef;
        }
    }
    Ok((loss, grad))
}

/// Parameter layout: W1 `n_hidden x n_features`, b1, W2 `n_classes x n_hidden`, b2.
fn mlp1_loss_grad(
    params: &ParamVec,
    batch: &Batch,
    n_features: usize,
    n_hidden: usize,
    n_classes: usize,
) -> Result<(f64, ParamVec)> {
    let p = params.as_slice();
    let w1_end = n_hidden * n_features;
    let b1_end = w1_end + n_hidden;
    let w2_end = b1_end + n_classes * n_hidden;
    let (w1, rest) = p.split_at(w1_end);
    let (b1, rest) = rest.split_at(n_hidden);
    let (w2, b2) = rest.split_at(n_classes * n_hidden);
    debug_assert_eq!(b1_end + w2.len() + b2.len(), params.dim());

    let n = batch.n_examples() as f64;
    let inv_n = 1.0 / n;
    let mut loss = 0.0;
    let mut grad = ParamVec::zeros(params.dim());
    let mut hidden = vec![0.0; n_hidden];
    let mut active = vec![false; n_hidden];
    let mut logits = vec![0.0; n_classes];
    let mut dlogits = vec![0.0; n_classes];
    let mut dhidden = vec![0.0; n_hidden];

    for i in 0..batch.n_examples() {
        let x = batch.row(i);
        let y = batch.label(i);
        for h in 0..n_hidden {
            let row = &w1[h * n_features..(h + 1) * n_features];
            let mut acc = b1[h];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            active[h] = acc > 0.0;
            hidden[h] = if active[h] { acc } else { 0.0 };
        }
        for (k, logit) in logits.iter_mut().enumerate() {
            let row = &w2[k * n_hidden..(k + 1) * n_hidden];
            let mut acc = b2[k];
            for (wv, hv) in row.iter().zip(&hidden) {
                acc += wv * hv;
            }
            *logit = acc;
        }
        let lse = log_sum_exp(&logits);
        loss += (lse - logits[y]) * inv_n;
        for k in 0..n_classes {
            let mut coef = (logits[k] - lse).exp();
            if k == y {
                coef -= 1.0;
            }
            dlogits[k] = coef * inv_n;
        }

        let g = grad.as_mut_slice();
        for h in 0..n_hidden {
            let mut acc = 0.0;
            for k in 0..n_classes {
                acc += w2[k * n_hidden + h] * dlogits[k];
            }
            dhidden[h] = if active[h] { acc } else { 0.0 };
        }
        for (k, &dl) in dlogits.iter().enumerate() {
            let grow = &mut g[b1_end + k * n_hidden..b1_end + (k + 1) * n_hidden];
            for (gv, hv) in grow.iter_mut().zip(&hidden) {
                *gv += dl * hv;
            }
            g[w2_end + k] += dl;
        }
        for (h, &dh) in dhidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            let grow = &mut g[h * n_features..(h + 1) * n_features];
            for (gv, xv) in grow.iter_mut().zip(x) {
                *gv += dh * xv;
            }
            g[w1_end + h] += dh;
        }
    }
    Ok((loss, grad))
}

/// Central-difference estimate of the gradient, coordinate by coordinate.
///
/// Kept independent of the analytic gradient path on purpose: this is the
/// oracle the gradient implementations are checked against.
pub fn finite_diff_grad(
    model: &ModelSpec,
    params: &ParamVec,
    batch: &Batch,
    step: f64,
) -> Result<ParamVec> {
    if step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    model.check_params(params)?;
    model.check_batch(batch)?;
    let mut grad = ParamVec::zeros(params.dim());
    let mut probe = params.clone();
    for i in 0..params.dim() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let (plus, _) = eval_loss_grad(model, &probe, batch)?;
        probe.as_mut_slice()[i] = orig - step;
        let (minus, _) = eval_loss_grad(model, &probe, batch)?;
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Per-row argmax class label; ties break toward the smaller class index.
/// Undefined for the quadratic variant.
pub fn predict(model: &ModelSpec, params: &ParamVec, batch: &Batch) -> Result<Vec<usize>> {
    model.check_params(params)?;
    let (n_features, n_classes) = match model {
        ModelSpec::Quadratic { .. } => {
            return Err(Error::Unsupported(
                "predict is undefined for the quadratic model".into(),
            ))
        }
        ModelSpec::SoftmaxRegression {
            n_features,
            n_classes,
        } => (*n_features, *n_classes),
        ModelSpec::Mlp1 {
            n_features,
            n_classes,
            ..
        } => (*n_features, *n_classes),
    };
    if batch.n_features() != n_features {
        return Err(Error::Config(format!(
            "batch feature width {} does not match model n_features {}",
            batch.n_features(),
            n_features
        )));
    }
    let mut out = Vec::with_capacity(batch.n_examples());
    let mut scores = vec![0.0; n_classes];
    for i in 0..batch.n_examples() {
        class_scores(model, params, batch.row(i), &mut scores);
        out.push(argmax_first(&scores));
    }
    Ok(out)
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

fn class_scores(model: &ModelSpec, params: &ParamVec, x: &[f64], scores: &mut [f64]) {
    let p = params.as_slice();
    match model {
        ModelSpec::Quadratic { .. } => unreachable!("checked by predict"),
        ModelSpec::SoftmaxRegression {
            n_features,
            n_classes,
        } => {
            let (w, b) = p.split_at(n_classes * n_features);
            for (k, s) in scores.iter_mut().enumerate() {
                let row = &w[k * n_features..(k + 1) * n_features];
                let mut acc = b[k];
                for (wv, xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                *s = acc;
            }
        }
        ModelSpec::Mlp1 {
            n_features,
            n_hidden,
            n_classes,
        } => {
            let w1_end = n_hidden * n_features;
            let (w1, rest) = p.split_at(w1_end);
            let (b1, rest) = rest.split_at(*n_hidden);
            let (w2, b2) = rest.split_at(n_classes * n_hidden);
            let mut hidden = vec![0.0; *n_hidden];
            for (h, hv) in hidden.iter_mut().enumerate() {
                let row = &w1[h * n_features..(h + 1) * n_features];
                let mut acc = b1[h];
                for (wv, xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                *hv = acc.max(0.0);
            }
            for (k, s) in scores.iter_mut().enumerate() {
                let row = &w2[k * n_hidden..(k + 1) * n_hidden];
                let mut acc = b2[k];
                for (wv, hv) in row.iter().zip(&hidden) {
                    acc += wv * hv;
                }
                *s = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVec {
        ParamVec::new(v.to_vec())
    }

    fn random_params(dim: usize, rng: &mut ChaCha8Rng) -> ParamVec {
        ParamVec::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_batch(n: usize, n_features: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Batch {
        let features = (0..n * n_features)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        Batch::new(features, n_features, labels).unwrap()
    }

    #[test]
    fn quadratic_at_minimum_is_zero() {
        let model = ModelSpec::Quadratic { center: pv(&[0.0, 0.0]) };
        let (loss, grad) = eval_loss_grad(&model, &pv(&[0.0, 0.0]), &Batch::empty(1)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, pv(&[0.0, 0.0]));
    }

    #[test]
    fn quadratic_analytic_values() {
        let model = ModelSpec::Quadratic { center: pv(&[0.0, 0.0]) };
        let (loss, grad) = eval_loss_grad(&model, &pv(&[1.0, 1.0]), &Batch::empty(1)).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad, pv(&[1.0, 1.0]));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = ModelSpec::SoftmaxRegression {
            n_features: 3,
            n_classes: 4,
        };
        let batch = random_batch(4, 3, 4, &mut rng);
        let params = random_params(model.param_dim(), &mut rng);
        let (_, analytic) = eval_loss_grad(&model, &params, &batch).unwrap();
        let numeric = finite_diff_grad(&model, &params, &batch, 1e-6).unwrap();
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            let rel = (a - n).abs() / (1.0 + a.abs());
            assert!(rel < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ModelSpec::Mlp1 {
            n_features: 4,
            n_hidden: 3,
            n_classes: 3,
        };
        assert!(model.param_dim() <= 50);
        let batch = random_batch(6, 4, 3, &mut rng);
        let params = random_params(model.param_dim(), &mut rng);
        let (_, analytic) = eval_loss_grad(&model, &params, &batch).unwrap();
        let numeric = finite_diff_grad(&model, &params, &batch, 1e-6).unwrap();
        assert!(analytic.linf_dist(&numeric) < 1e-5);
    }

    #[test]
    fn finite_diff_is_exact_on_quadratics() {
        let model = ModelSpec::Quadratic { center: pv(&[0.5, -0.25, 1.0]) };
        let params = pv(&[1.0, 2.0, -3.0]);
        let numeric = finite_diff_grad(&model, &params, &Batch::empty(1), 1e-4).unwrap();
        let (_, analytic) = eval_loss_grad(&model, &params, &Batch::empty(1)).unwrap();
        assert!(analytic.linf_dist(&numeric) < 1e-9);
    }

    #[test]
    fn finite_diff_zero_at_symmetric_stationary_point() {
        let model = ModelSpec::Quadratic { center: pv(&[0.0, 0.0]) };
        let numeric = finite_diff_grad(&model, &pv(&[0.0, 0.0]), &Batch::empty(1), 1e-6).unwrap();
        assert_eq!(numeric, pv(&[0.0, 0.0]));
    }

    /// 100 random draws per variant: relative sup-norm gap below 1e-5.
    #[test]
    fn gradient_exactness_across_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(20_240_001);
        let variants = [
            ModelSpec::Quadratic { center: pv(&[0.3, -0.7, 0.1]) },
            ModelSpec::SoftmaxRegression { n_features: 5, n_classes: 3 },
            ModelSpec::Mlp1 { n_features: 4, n_hidden: 4, n_classes: 3 },
        ];
        for model in &variants {
            for _ in 0..100 {
                let params = random_params(model.param_dim(), &mut rng);
                let batch = random_batch(5, batch_width(model), 3, &mut rng);
                let (_, analytic) = eval_loss_grad(model, &params, &batch).unwrap();
                let numeric = finite_diff_grad(model, &params, &batch, 1e-6).unwrap();
                let gap = analytic.linf_dist(&numeric) / (1.0 + analytic.linf_norm());
                assert!(gap < 1e-5, "variant {model:?} gap {gap}");
                assert!(analytic.is_finite());
            }
        }
    }

    fn batch_width(model: &ModelSpec) -> usize {
        match model {
            ModelSpec::Quadratic { .. } => 1,
            ModelSpec::SoftmaxRegression { n_features, .. } => *n_features,
            ModelSpec::Mlp1 { n_features, .. } => *n_features,
        }
    }

    /// θ ← θ − λ(θ−c) contracts to the center; the distance at least halves
    /// every ⌈1/λ⌉ steps for λ ≤ 1.
    #[test]
    fn quadratic_descent_fixed_point() {
        let center = pv(&[2.0, -1.0]);
        let model = ModelSpec::Quadratic { center: center.clone() };
        for lambda in [0.05, 0.3, 0.5, 1.0, 1.5, 1.9] {
            let mut theta = pv(&[10.0, 10.0]);
            for _ in 0..2000 {
                let (_, grad) = eval_loss_grad(&model, &theta, &Batch::empty(1)).unwrap();
                theta.axpy(-lambda, &grad);
            }
            assert!(theta.l2_dist(&center) < 1e-6, "lambda {lambda}");
        }
        for lambda in [0.1f64, 0.25, 0.5, 1.0] {
            let window = (1.0 / lambda).ceil() as usize;
            let mut theta = pv(&[10.0, 10.0]);
            let mut dist = theta.l2_dist(&center);
            for _ in 0..20 {
                for _ in 0..window {
                    let (_, grad) = eval_loss_grad(&model, &theta, &Batch::empty(1)).unwrap();
                    theta.axpy(-lambda, &grad);
                }
                let next = theta.l2_dist(&center);
                assert!(next <= dist / 2.0 + 1e-300, "lambda {lambda}");
                dist = next;
            }
        }
    }

    #[test]
    fn eval_is_deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelSpec::Mlp1 { n_features: 6, n_hidden: 5, n_classes: 4 };
        let params = random_params(model.param_dim(), &mut rng);
        let batch = random_batch(8, 6, 4, &mut rng);
        let (l1, g1) = eval_loss_grad(&model, &params, &batch).unwrap();
        let (l2, g2) = eval_loss_grad(&model, &params, &batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn predict_zero_params_ties_to_class_zero() {
        let model = ModelSpec::SoftmaxRegression { n_features: 4, n_classes: 10 };
        let params = ParamVec::zeros(model.param_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(12, 4, 10, &mut rng);
        let labels = predict(&model, &params, &batch).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn predict_tie_breaks_toward_smaller_index() {
        // Scores (0.1, 0.9, 0.9) for a single unit feature.
        let model = ModelSpec::SoftmaxRegression { n_features: 1, n_classes: 3 };
        let params = pv(&[0.1, 0.9, 0.9, 0.0, 0.0, 0.0]);
        let batch = Batch::new(vec![1.0], 1, vec![0]).unwrap();
        assert_eq!(predict(&model, &params, &batch).unwrap(), vec![1]);
    }

    #[test]
    fn predict_reproduces_a_trained_toy_set() {
        // Train on two separable examples with plain gradient descent until
        // both are classified correctly, then check predict agrees.
        let model = ModelSpec::SoftmaxRegression { n_features: 2, n_classes: 2 };
        let batch = Batch::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1]).unwrap();
        let mut params = ParamVec::zeros(model.param_dim());
        for _ in 0..500 {
            let (_, grad) = eval_loss_grad(&model, &params, &batch).unwrap();
            params.axpy(-0.5, &grad);
        }
        assert_eq!(predict(&model, &params, &batch).unwrap(), vec![0, 1]);
    }

    #[test]
    fn predict_rejects_quadratic() {
        let model = ModelSpec::Quadratic { center: pv(&[0.0]) };
        let batch = Batch::new(vec![1.0], 1, vec![0]).unwrap();
        assert!(matches!(
            predict(&model, &ParamVec::zeros(1), &batch),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn empty_batch_rejected_for_data_models() {
        let model = ModelSpec::SoftmaxRegression { n_features: 2, n_classes: 2 };
        let err = eval_loss_grad(&model, &ParamVec::zeros(6), &Batch::empty(2));
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let model = ModelSpec::SoftmaxRegression { n_features: 2, n_classes: 2 };
        let batch = Batch::new(vec![0.0, 0.0], 2, vec![0]).unwrap();
        let err = eval_loss_grad(&model, &ParamVec::zeros(5), &batch);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
