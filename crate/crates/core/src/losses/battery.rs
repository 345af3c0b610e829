//! Finite-difference gradient checks for every loss on seeded random configurations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ce_loss, confusion_weights, cr_loss, kd_loss, total_loss, LossConfig, LossError};
use crate::model::{AutoEncoderBank, DecoderActivation, ErrorNorm, FeatureExtractor};
use crate::numerics::{gradient_check, Graph, NumericsError, Tensor, Var};

pub const BATTERY_CONFIGS: usize = 20;
pub const BATTERY_STEP: f64 = 1e-5;
pub const BATTERY_TOLERANCE: f64 = 1e-4;

/// Error scale and distillation temperature are drawn per configuration.
///
/// Central differences carry roughly `1e-11` of round-off at step `1e-5`.
/// At `α/τ_d = 0.05` many distillation gradient entries fall within a few
/// orders of magnitude of that floor, where the relative error measures
/// noise rather than the derivative. Both enter the graph only through
/// `scale`, so the derivative code checked is the same for every value.
pub const ALPHA_RANGE: std::ops::Range<f64> = 0.5..2.0;
pub const TAU_D_RANGE: std::ops::Range<f64> = 0.5..2.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatteryEntry {
    pub loss: &'static str,
    pub configs: usize,
    pub max_relative_error: f64,
    /// Configuration index holding the worst entry.
    pub worst_config: usize,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst_entry: Option<(usize, usize)>,
    /// Reverse-mode and central-difference values at the worst entry.
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatteryReport {
    pub tolerance: f64,
    pub entries: Vec<BatteryEntry>,
}

impl BatteryReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Labels covering `classes` classes with every class appearing at least twice.
fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| if i < 2 * classes { i / 2 } else { rng.random_range(0..classes) }).collect();
    labels.shuffle(rng);
    labels
}

fn random_bank(rng: &mut ChaCha8Rng, d: usize, l: usize, classes: usize) -> AutoEncoderBank {
    let mut bank = AutoEncoderBank::new(d, l, DecoderActivation::Tanh, ErrorNorm::L2);
    bank.append_classes(classes, rng.random());
    for p in bank.parameters_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    bank
}

fn numerics(e: LossError) -> NumericsError {
    match e {
        LossError::Numerics(n) => n,
        other => NumericsError::InvalidArgument(other.to_string()),
    }
}

struct Case {
    params: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    loss: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>>,
}

fn ce_case(rng: &mut ChaCha8Rng, cfg: &LossConfig) -> Case {
    let (n, d, l, c) = (8, 6, 3, 4);
    let bank = random_bank(rng, d, l, c);
    let h = random_matrix(rng, n, d, 0.9);
    let labels = random_labels(rng, n, c);
    let mut params = vec![h];
    params.extend(bank.parameters().into_iter().cloned());
    let alpha = cfg.alpha;
    Case {
        params,
        loss: Box::new(move |g, v| {
            let bv = bank.bind_leaves(&v[1..])?;
            let out = bv.forward(g, v[0])?;
            let logits = g.scale(out.errors, -alpha)?;
            ce_loss(g, logits, &labels).map_err(numerics)
        }),
    }
}

fn kd_case(rng: &mut ChaCha8Rng, cfg: &LossConfig) -> Case {
    let (n, d, l, c_old) = (8, 6, 3, 3);
    let bank = random_bank(rng, d, l, c_old + 1);
    let old = random_bank(rng, d, l, c_old);
    let h = random_matrix(rng, n, d, 0.9);
    let eps_old = old.reconstruction_errors(&h).expect("old bank errors");
    let mut params = vec![h];
    params.extend(bank.parameters().into_iter().cloned());
    let (alpha, tau_d) = (cfg.alpha, cfg.tau_d);
    Case {
        params,
        loss: Box::new(move |g, v| {
            let bv = bank.bind_leaves(&v[1..])?;
            let out = bv.forward(g, v[0])?;
            let slice = g.slice_cols(out.errors, 0, c_old)?;
            kd_loss(g, slice, &eps_old, alpha, tau_d).map_err(numerics)
        }),
    }
}

fn contrastive_case(rng: &mut ChaCha8Rng, cfg: &LossConfig, weighted: bool) -> Case {
    let (n, l, c) = (12, 4, 3);
    let labels = random_labels(rng, n, c);
    let params: Vec<Tensor> = (0..c).map(|_| random_matrix(rng, n, l, 0.6)).collect();
    let weights = weighted.then(|| {
        let eps = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(0.1..3.0)).collect()).expect("shape");
        confusion_weights(&eps, cfg.beta).expect("weights")
    });
    let cfg = cfg.clone();
    Case {
        params,
        loss: Box::new(move |g, v| cr_loss(g, v, &labels, weights.as_deref(), &cfg).map_err(numerics)),
    }
}

fn composed_case(rng: &mut ChaCha8Rng, cfg: &LossConfig) -> Case {
    let (n, input, d, l, c_old, c) = (12, 5, 4, 2, 2, 3);
    let extractor = FeatureExtractor::new(input, &[6], d, rng);
    let old_extractor = FeatureExtractor::new(input, &[6], d, rng);
    let bank = random_bank(rng, d, l, c);
    let old_bank = random_bank(rng, d, l, c_old);
    let x = random_matrix(rng, n, input, 1.0);
    let labels = random_labels(rng, n, c);
    let eps_old = old_bank
        .reconstruction_errors(&old_extractor.extract(&x).expect("features"))
        .expect("errors");
    // Confusion weights are constants of the step, evaluated at the base point.
    let weights = {
        let h = extractor.extract(&x).expect("features");
        confusion_weights(&bank.reconstruction_errors(&h).expect("errors"), cfg.beta).expect("weights")
    };
    let n_ext = extractor.parameters().len();
    let mut params: Vec<Tensor> = extractor.parameters().into_iter().cloned().collect();
    params.extend(bank.parameters().into_iter().cloned());
    let cfg = cfg.clone();
    Case {
        params,
        loss: Box::new(move |g, v| {
            let ev = extractor.bind_leaves(&v[..n_ext])?;
            let xv = g.constant(x.clone());
            let h = ev.forward(g, xv)?;
            let bv = bank.bind_leaves(&v[n_ext..])?;
            let out = bv.forward(g, h)?;
            let logits = g.scale(out.errors, -cfg.alpha)?;
            let ce = ce_loss(g, logits, &labels).map_err(numerics)?;
            let slice = g.slice_cols(out.errors, 0, c_old)?;
            let kd = kd_loss(g, slice, &eps_old, cfg.alpha, cfg.tau_d).map_err(numerics)?;
            let cr = cr_loss(g, &out.latents, &labels, Some(&weights), &cfg).map_err(numerics)?;
            total_loss(g, ce, Some(kd), Some(cr), cfg.lambda).map_err(numerics)
        }),
    }
}

/// Runs every loss through [`gradient_check`] on [`BATTERY_CONFIGS`] seeded configurations.
///
/// `β`, `λ`, `τ_r` and the latent flags come from `cfg`; `α` and `τ_d` are
/// drawn from [`ALPHA_RANGE`] and [`TAU_D_RANGE`].
///
/// Loss names: `L_CE`, `L_KD`, `L_CST` (unweighted contrastive), `L_CR`
/// (confusion-weighted contrastive) and `L_total`.
pub fn gradcheck_battery(seed: u64, cfg: &LossConfig) -> Result<BatteryReport, NumericsError> {
    type Builder = fn(&mut ChaCha8Rng, &LossConfig) -> Case;
    let builders: [(&'static str, Builder); 5] = [
        ("L_CE", ce_case),
        ("L_KD", kd_case),
        ("L_CST", |r, c| contrastive_case(r, c, false)),
        ("L_CR", |r, c| contrastive_case(r, c, true)),
        ("L_total", composed_case),
    ];
    let mut entries = Vec::with_capacity(builders.len());
    for (k, (name, build)) in builders.iter().enumerate() {
        let mut entry = BatteryEntry {
            loss: name,
            configs: BATTERY_CONFIGS,
            max_relative_error: 0.0,
            worst_config: 0,
            worst_entry: None,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..BATTERY_CONFIGS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ i as u64);
            let drawn = LossConfig {
                alpha: rng.random_range(ALPHA_RANGE),
                tau_d: rng.random_range(TAU_D_RANGE),
                ..cfg.clone()
            };
            let case = build(&mut rng, &drawn);
            let report = gradient_check(&case.params, BATTERY_STEP, |g, v| (case.loss)(g, v))?;
            if report.max_relative_error > entry.max_relative_error || entry.worst_entry.is_none() {
                entry.max_relative_error = report.max_relative_error;
                entry.worst_config = i;
                entry.worst_entry = report.worst_entry;
                entry.analytic = report.analytic;
                entry.numeric = report.numeric;
            }
        }
        entry.passed = entry.max_relative_error <= BATTERY_TOLERANCE;
        entries.push(entry);
    }
    Ok(BatteryReport {
        tolerance: BATTERY_TOLERANCE,
        entries,
    })
}
