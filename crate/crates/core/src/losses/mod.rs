//! Training objective: cross-entropy on error logits, logit distillation,
//! confusion scores and weights, and the weighted subspace contrastive term.
//!
//! Graph-building losses take and return [`Var`]s so they compose into one
//! backward pass. Plain-value helpers work on [`Tensor`]s and slices.

mod battery;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{softmax, Graph, NumericsError, Tensor, Var};

pub use battery::{gradcheck_battery, ALPHA_RANGE, TAU_D_RANGE, BatteryEntry, BatteryReport, BATTERY_CONFIGS, BATTERY_STEP, BATTERY_TOLERANCE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("confusion score needs at least 2 classes, got {found}")]
    TooFewClasses { found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("zero probability at the target of row {row}")]
    ZeroTargetProbability { row: usize },
    #[error("{0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Error scale of the error softmax.
    pub alpha: f64,
    /// Sharpness of the confusion weights.
    pub beta: f64,
    /// Weight of the separation term.
    pub lambda: f64,
    /// Distillation temperature.
    pub tau_d: f64,
    /// Contrastive temperature.
    pub tau_r: f64,
    /// Unit-normalise latent codes before taking dot products.
    pub normalize_latents: bool,
    /// Keep the anchor itself in the contrastive denominator.
    pub include_anchor: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            lambda: 1.0,
            tau_d: 2.0,
            tau_r: 0.1,
            normalize_latents: false,
            include_anchor: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let positive = [("alpha", self.alpha), ("beta", self.beta), ("tau_d", self.tau_d), ("tau_r", self.tau_r)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean of `−log softmax(logits)[y]` over the batch.
///
/// With `logits = −α ε` this is the cross-entropy of the error softmax.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let shape = g.value(logits).shape().to_vec();
    if shape[0] != labels.len() {
        return Err(LossError::Shape(format!("{} label(s) for {} row(s)", labels.len(), shape[0])));
    }
    check_labels(labels, shape[1])?;
    let lp = g.log_softmax_rows(logits)?;
    let picked = g.pick_per_row(lp, labels)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0)?)
}

/// Cross-entropy from probability rows, guarded by a `1e-300` floor.
pub fn ce_loss_value(p: &Tensor, labels: &[usize]) -> Result<f64, LossError> {
    check_labels(labels, p.cols())?;
    if p.rows() != labels.len() {
        return Err(LossError::Shape(format!("{} label(s) for {} row(s)", labels.len(), p.rows())));
    }
    let mut total = 0.0;
    for (row, &y) in labels.iter().enumerate() {
        let q = p.get(row, y);
        if !(q >= 1e-300) {
            return Err(LossError::ZeroTargetProbability { row });
        }
        total += -q.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Distillation between temperature-softened logits.
///
/// `logits_old` is the frozen snapshot's output and acts as the target.
/// Returns an exact zero when there are no old classes.
pub fn kd_loss_logits(g: &mut Graph, logits_new: Var, logits_old: &Tensor, tau: f64) -> Result<Var, LossError> {
    let shape = g.value(logits_new).shape().to_vec();
    if shape.as_slice() != logits_old.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "kd_loss",
            left: shape,
            right: logits_old.shape().to_vec(),
        }
        .into());
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if c == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut target = Vec::with_capacity(n * c);
    for i in 0..n {
        let row: Vec<f64> = logits_old.row(i).iter().map(|v| v / tau).collect();
        target.extend(softmax(&row, None));
    }
    let target = g.constant(Tensor::matrix(n, c, target)?);
    let soft = g.scale(logits_new, 1.0 / tau)?;
    let lp = g.log_softmax_rows(soft)?;
    let prod = g.mul(target, lp)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

/// Distillation on reconstruction errors: targets `softmax(−α ε′/τ_d)`,
/// predictions `softmax(−α ε/τ_d)`, averaged over the batch.
///
/// Both inputs hold only the first `C_{t−1}` classes.
pub fn kd_loss(g: &mut Graph, eps_new: Var, eps_old: &Tensor, alpha: f64, tau_d: f64) -> Result<Var, LossError> {
    let logits_old = Tensor::new(eps_old.shape().to_vec(), eps_old.data().iter().map(|e| -alpha * e).collect())?;
    let logits_new = g.scale(eps_new, -alpha)?;
    kd_loss_logits(g, logits_new, &logits_old, tau_d)
}

/// `s = |ε₍₂₎ − ε₍₁₎| / (ε_max − ε₍₁₎)`, with `s = 0` when every entry is equal.
pub fn confusion_score(row: &[f64]) -> Result<f64, LossError> {
    if row.len() < 2 {
        return Err(LossError::TooFewClasses { found: row.len() });
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite { op: "confusion_score" }.into());
    }
    let (mut first, mut second) = (f64::INFINITY, f64::INFINITY);
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v < first {
            second = first;
            first = v;
        } else if v < second {
            second = v;
        }
        max = max.max(v);
    }
    let span = max - first;
    if span <= 0.0 {
        return Ok(0.0);
    }
    Ok(((second - first).abs() / span).min(1.0))
}

/// `w = 1 + exp(−β s)`.
pub fn confusion_weight(s: f64, beta: f64) -> f64 {
    1.0 + (-beta * s).exp()
}

/// Per-sample confusion weights from an error matrix; all ones below two classes.
pub fn confusion_weights(eps: &Tensor, beta: f64) -> Result<Vec<f64>, LossError> {
    if eps.cols() < 2 {
        return Ok(vec![1.0; eps.rows()]);
    }
    (0..eps.rows())
        .map(|i| confusion_score(eps.row(i)).map(|s| confusion_weight(s, beta)))
        .collect()
}

/// Weighted supervised contrastive loss in each class's latent subspace.
///
/// `latents[c]` holds every batch sample's code under class `c`'s encoder.
/// Each sample is an anchor in its own class's subspace: positives are the
/// other samples of that class, the denominator runs over all other
/// samples. Per-anchor terms are scaled by `weights[a]` (all ones when
/// `None`), averaged within each class and summed over classes present in
/// the batch. Classes with a single sample contribute nothing.
pub fn cr_loss(
    g: &mut Graph,
    latents: &[Var],
    labels: &[usize],
    weights: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let n = labels.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_labels(labels, latents.len())?;
    if let Some(w) = weights {
        if w.len() != n {
            return Err(LossError::Shape(format!("{} weight(s) for {n} sample(s)", w.len())));
        }
    }
    let mut terms = Vec::new();
    for (c, &z) in latents.iter().enumerate() {
        let anchors: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let m = anchors.len();
        if m < 2 {
            continue;
        }
        if g.value(z).rows() != n {
            return Err(LossError::Shape(format!(
                "latents of class {c} have {} row(s) for {n} sample(s)",
                g.value(z).rows()
            )));
        }
        let z = if cfg.normalize_latents { g.normalize_rows(z)? } else { z };
        let a = g.select_rows(z, &anchors)?;
        let sim = g.matmul_nt(a, z)?;
        let sim = g.scale(sim, 1.0 / cfg.tau_r)?;
        let mut mask = vec![true; m * n];
        let mut coef = vec![0.0; m * n];
        for (r, &i) in anchors.iter().enumerate() {
            if !cfg.include_anchor {
                mask[r * n + i] = false;
            }
            let w = weights.map_or(1.0, |w| w[i]);
            let scale = -w / ((m - 1) as f64 * m as f64);
            for &p in &anchors {
                if p != i {
                    coef[r * n + p] = scale;
                }
            }
        }
        let lp = g.log_softmax_rows_masked(sim, Some(mask))?;
        let coef = g.constant(Tensor::matrix(m, n, coef)?);
        let weighted = g.mul(lp, coef)?;
        terms.push(g.sum(weighted)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// `L = L_CE + L_KD + λ·L_CR`; absent parts are skipped.
pub fn total_loss(g: &mut Graph, ce: Var, kd: Option<Var>, cr: Option<Var>, lambda: f64) -> Result<Var, LossError> {
    let mut total = ce;
    if let Some(kd) = kd {
        total = g.add(total, kd)?;
    }
    if let Some(cr) = cr {
        let scaled = g.scale(cr, lambda)?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Scalar re-implementation of the weighted contrastive term.
    fn cr_oracle(z: &[Vec<Vec<f64>>], labels: &[usize], w: &[f64], tau: f64) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for c in 0..z.len() {
            let anchors: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if anchors.len() < 2 {
                continue;
            }
            let dot = |a: usize, b: usize| z[c][a].iter().zip(&z[c][b]).map(|(x, y)| x * y).sum::<f64>() / tau;
            let mut class_sum = 0.0;
            for &a in &anchors {
                let denom: f64 = (0..n).filter(|&k| k != a).map(|k| dot(a, k).exp()).sum();
                let pos: Vec<usize> = anchors.iter().copied().filter(|&p| p != a).collect();
                let term: f64 = pos.iter().map(|&p| -(dot(a, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
                class_sum += w[a] * term;
            }
            total += class_sum / anchors.len() as f64;
        }
        total
    }

    fn eval_cr(z: &[Vec<Vec<f64>>], labels: &[usize], w: Option<&[f64]>, cfg: &LossConfig) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = z.iter().map(|rows| g.param(Tensor::from_rows(rows).unwrap())).collect();
        let l = cr_loss(&mut g, &vars, labels, w, cfg).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn ce_examples() {
        let mut g = Graph::new();
        let eps = g.param(Tensor::row_vector(vec![1.0, 2.0]));
        let logits = g.scale(eps, -0.1).unwrap();
        let l = ce_loss(&mut g, logits, &[0]).unwrap();
        let sigma = 1.0 / (1.0 + (-0.1f64).exp());
        assert!(close(g.value(l).item().unwrap(), -sigma.ln(), 1e-15));
        assert!(close(g.value(l).item().unwrap(), 0.6444, 1e-4));

        let mut g = Graph::new();
        let logits = g.param(Tensor::row_vector(vec![0.3; 5]));
        let l = ce_loss(&mut g, logits, &[2]).unwrap();
        assert!(close(g.value(l).item().unwrap(), 5f64.ln(), 1e-14));

        let one_hot = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ce_loss_value(&one_hot, &[1, 0]).unwrap(), 0.0);
        assert!(matches!(
            ce_loss_value(&one_hot, &[0, 0]),
            Err(LossError::ZeroTargetProbability { row: 0 })
        ));
    }

    #[test]
    fn kd_two_class_closed_form() {
        let mut g = Graph::new();
        let new = g.param(Tensor::row_vector(vec![1.0, 0.0]));
        let l = kd_loss(&mut g, new, &Tensor::row_vector(vec![0.0, 1.0]), 0.1, 2.0).unwrap();
        let q = 1.0 / (1.0 + (-0.05f64).exp());
        let expected = -q * (1.0 - q).ln() - (1.0 - q) * q.ln();
        assert!(close(g.value(l).item().unwrap(), expected, 1e-14));
    }

    #[test]
    fn kd_degenerate_cases() {
        let mut g = Graph::new();
        let new = g.param(Tensor::matrix(3, 1, vec![0.4, 7.0, 2.0]).unwrap());
        let l = kd_loss(&mut g, new, &Tensor::matrix(3, 1, vec![9.0, 1.0, 0.0]).unwrap(), 0.1, 2.0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let mut g = Graph::new();
        let new = g.param(Tensor::zeros(&[4, 0]));
        let l = kd_loss(&mut g, new, &Tensor::zeros(&[4, 0]), 0.1, 2.0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn kd_at_equality_is_entropy_with_zero_gradient() {
        let eps = Tensor::matrix(2, 3, vec![0.5, 1.5, 3.0, 2.0, 0.1, 0.7]).unwrap();
        let mut g = Graph::new();
        let new = g.param(eps.clone());
        let l = kd_loss(&mut g, new, &eps, 0.1, 2.0).unwrap();
        let mut entropy = 0.0;
        for i in 0..2 {
            let p = softmax(&eps.row(i).iter().map(|e| -0.05 * e).collect::<Vec<_>>(), None);
            entropy -= p.iter().map(|q| q * q.ln()).sum::<f64>();
        }
        assert!(close(g.value(l).item().unwrap(), entropy / 2.0, 1e-14));
        let grads = g.backward(l).unwrap();
        assert!(grads.get(new).data().iter().all(|v| v.abs() <= 1e-15));
    }

    #[test]
    fn confusion_score_examples() {
        assert_eq!(confusion_score(&[1.0, 1.0, 5.0]).unwrap(), 0.0);
        assert!(close(confusion_score(&[1.0, 2.0, 5.0]).unwrap(), 0.25, 1e-15));
        assert_eq!(confusion_score(&[1.0, 5.0]).unwrap(), 1.0);
        assert_eq!(confusion_score(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(confusion_score(&[1.0]), Err(LossError::TooFewClasses { found: 1 })));
    }

    #[test]
    fn confusion_weight_examples() {
        assert_eq!(confusion_weight(0.0, 2.0), 2.0);
        assert!(close(confusion_weight(0.25, 2.0), 1.0 + (-0.5f64).exp(), 1e-15));
        assert!(close(confusion_weight(0.25, 2.0), 1.6065, 1e-4));
        assert!(close(confusion_weight(1e6, 2.0), 1.0, 1e-15));
        assert_eq!(confusion_weights(&Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(), 2.0).unwrap(), vec![1.0; 2]);
    }

    #[test]
    fn cr_without_positives_is_zero() {
        let z = vec![vec![vec![0.3, 0.1], vec![0.2, -0.4], vec![0.9, 0.0]]; 3];
        assert_eq!(eval_cr(&z, &[0, 1, 2], None, &LossConfig::default()), 0.0);
    }

    #[test]
    fn cr_singleton_denominator_is_zero() {
        let z = vec![vec![vec![0.3, 0.4], vec![0.3, 0.4]]];
        assert_eq!(eval_cr(&z, &[0, 0], None, &LossConfig::default()), 0.0);
    }

    #[test]
    fn cr_matches_scalar_oracle() {
        let z0 = vec![vec![0.5, -0.2], vec![0.4, 0.1], vec![-0.3, 0.6]];
        let z1 = vec![vec![0.1, 0.2], vec![-0.7, 0.3], vec![0.2, 0.2]];
        let z = vec![z0, z1];
        let labels = [0, 0, 1];
        let w = [1.3, 1.9, 1.1];
        let got = eval_cr(&z, &labels, Some(&w), &LossConfig::default());
        assert!(close(got, cr_oracle(&z, &labels, &w, 0.1), 1e-10));

        let labels = [1, 0, 1];
        let got = eval_cr(&z, &labels, None, &LossConfig::default());
        assert!(close(got, cr_oracle(&z, &labels, &[1.0; 3], 0.1), 1e-10));
    }

    #[test]
    fn cr_decreases_when_positive_pair_aligns() {
        let codes = vec![vec![0.5, 0.0], vec![0.2, 0.3], vec![0.0, 0.5]];
        let base = vec![codes.clone(), codes];
        let before = eval_cr(&base, &[0, 0, 1], None, &LossConfig::default());
        let mut moved = base.clone();
        moved[0][1] = vec![0.3, 0.3];
        assert!(eval_cr(&moved, &[0, 0, 1], None, &LossConfig::default()) < before);
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::new();
        let ce = g.param(Tensor::scalar(1.5));
        let kd = g.param(Tensor::scalar(0.25));
        let cr = g.param(Tensor::scalar(2.0));
        let all = total_loss(&mut g, ce, Some(kd), Some(cr), 0.5).unwrap();
        assert_eq!(g.value(all).item().unwrap(), 2.75);
        let no_sep = total_loss(&mut g, ce, Some(kd), Some(cr), 0.0).unwrap();
        assert_eq!(g.value(no_sep).item().unwrap(), 1.75);
        let first = total_loss(&mut g, ce, None, Some(cr), 1.0).unwrap();
        assert_eq!(g.value(first).item().unwrap(), 3.5);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = LossConfig {
            tau_r: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
