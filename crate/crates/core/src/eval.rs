//! Metrics and diagnostics over frozen models.
//!
//! Both classifiers are argmin rules over a distance row per sample:
//! reconstruction errors for the auto-encoder head, Euclidean distances to
//! exemplar means for NME. Confusion scores are computed from those rows.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Ablation, ExperimentConfig};
use crate::datasets::{write_table, DatasetError};
use crate::losses::{confusion_score, LossError};
use crate::memory::ExemplarMemory;
use crate::model::{argmin_rows, AutoEncoderBank, FeatureExtractor, ModelError, ParamCount};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    Empty,
    #[error("class {0} has no stored exemplars")]
    MissingExemplars(usize),
    #[error("{rows} prediction row(s) for {labels} label(s)")]
    Misaligned { rows: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A frozen classifier viewed as a distance-row producer.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    AutoEncoders {
        extractor: &'a FeatureExtractor,
        bank: &'a AutoEncoderBank,
    },
    Nme {
        extractor: &'a FeatureExtractor,
        memory: &'a ExemplarMemory,
        num_classes: usize,
    },
}

impl Predictor<'_> {
    /// `n × C` rows; smaller is more likely.
    pub fn distances(&self, x: &Tensor) -> Result<Tensor, EvalError> {
        match *self {
            Predictor::AutoEncoders { extractor, bank } => {
                let h = extractor.extract(x)?;
                Ok(bank.reconstruction_errors(&h)?)
            }
            Predictor::Nme {
                extractor,
                memory,
                num_classes,
            } => {
                let protos = prototypes(extractor, memory, num_classes)?;
                Ok(nearest_mean_distances(&extractor.extract(x)?, &protos))
            }
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, EvalError> {
        Ok(argmin_rows(&self.distances(x)?))
    }
}

/// Mean feature of each class's exemplars under the current extractor.
pub fn prototypes(extractor: &FeatureExtractor, memory: &ExemplarMemory, num_classes: usize) -> Result<Tensor, EvalError> {
    let mut rows = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let ex = memory.class(c).filter(|e| !e.is_empty()).ok_or(EvalError::MissingExemplars(c))?;
        let h = extractor.extract(&ex.samples)?;
        let mut mean = vec![0.0; h.cols()];
        for r in 0..h.rows() {
            for (m, v) in mean.iter_mut().zip(h.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= h.rows() as f64;
        }
        rows.push(mean);
    }
    Ok(Tensor::from_rows(&rows).map_err(ModelError::from)?)
}

/// Euclidean distance of every feature row to every prototype.
pub fn nearest_mean_distances(h: &Tensor, prototypes: &Tensor) -> Tensor {
    let (n, c) = (h.rows(), prototypes.rows());
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n {
        for j in 0..c {
            let d2: f64 = h.row(i).iter().zip(prototypes.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            data.push(d2.sqrt());
        }
    }
    Tensor::matrix(n, c, data).expect("shape")
}

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Misaligned {
            rows: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

pub fn phase_accuracy(model: &Predictor<'_>, x: &Tensor, labels: &[usize]) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    accuracy(&model.predict(x)?, labels)
}

/// Accuracy split at a class boundary; empty partitions are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OldNewAccuracy {
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub total: f64,
}

/// Old classes are `< boundary`, new classes `≥ boundary`.
pub fn old_new_accuracy(predictions: &[usize], labels: &[usize], boundary: usize) -> Result<OldNewAccuracy, EvalError> {
    let total = accuracy(predictions, labels)?;
    let part = |keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let (p, y): (Vec<usize>, Vec<usize>) = predictions
            .iter()
            .zip(labels)
            .filter(|(_, &y)| keep(y))
            .map(|(&p, &y)| (p, y))
            .unzip();
        accuracy(&p, &y).ok()
    };
    Ok(OldNewAccuracy {
        old: part(&|y| y < boundary),
        new: part(&|y| y >= boundary),
        total,
    })
}

pub fn nme_baseline(
    extractor: &FeatureExtractor,
    memory: &ExemplarMemory,
    num_classes: usize,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64, EvalError> {
    phase_accuracy(
        &Predictor::Nme {
            extractor,
            memory,
            num_classes,
        },
        x,
        labels,
    )
}

/// Distribution summary of per-sample confusion scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(scores: &[f64]) -> Result<ConfusionSummary, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ConfusionSummary {
        count: sorted.len(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

/// Confusion score of every distance row, summarised.
pub fn confusion_stats(distances: &Tensor) -> Result<ConfusionSummary, EvalError> {
    let scores = (0..distances.rows())
        .map(|i| confusion_score(distances.row(i)))
        .collect::<Result<Vec<_>, _>>()?;
    summarize(&scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisclassifiedRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub true_error: f64,
    pub predicted_error: f64,
    /// `true_error − predicted_error`, never negative under argmin.
    pub margin: f64,
}

/// One record per row whose argmin differs from its label.
pub fn misclassified_error_report(errors: &Tensor, labels: &[usize]) -> Vec<MisclassifiedRecord> {
    argmin_rows(errors)
        .into_iter()
        .enumerate()
        .filter(|&(i, p)| p != labels[i])
        .map(|(i, p)| {
            let (t, e) = (errors.get(i, labels[i]), errors.get(i, p));
            MisclassifiedRecord {
                index: i,
                label: labels[i],
                predicted: p,
                true_error: t,
                predicted_error: e,
                margin: t - e,
            }
        })
        .collect()
}

/// Mean error on the ground-truth column and on all other columns.
pub fn error_split(errors: &Tensor, labels: &[usize]) -> (f64, Option<f64>) {
    let (mut own, mut other, mut n_other) = (0.0, 0.0, 0usize);
    for (i, &y) in labels.iter().enumerate() {
        for (j, &e) in errors.row(i).iter().enumerate() {
            if j == y {
                own += e;
            } else {
                other += e;
                n_other += 1;
            }
        }
    }
    let own = own / labels.len().max(1) as f64;
    (own, (n_other > 0).then(|| other / n_other as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSpace {
    Feature,
    Latent(usize),
}

/// Writes `(label, vector)` rows in the text table format.
pub fn export_embeddings(
    extractor: &FeatureExtractor,
    bank: Option<&AutoEncoderBank>,
    x: &Tensor,
    labels: &[usize],
    num_classes: usize,
    space: EmbeddingSpace,
    path: &Path,
) -> Result<Tensor, EvalError> {
    let h = extractor.extract(x)?;
    let rows = match space {
        EmbeddingSpace::Feature => h,
        EmbeddingSpace::Latent(c) => {
            let bank = bank.ok_or_else(|| ModelError::InvalidArgument("latent export needs an auto-encoder head".into()))?;
            bank.latent_codes(&h, c)?
        }
    };
    write_table(path, num_classes, labels, &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// 1-based phase index.
    pub phase: usize,
    pub classes_seen: usize,
    pub accuracy: f64,
    pub old_accuracy: Option<f64>,
    pub new_accuracy: Option<f64>,
    /// NME accuracy with the same extractor and memory.
    pub nme_accuracy: f64,
    pub confusion: Option<ConfusionSummary>,
    /// Mean reconstruction error on the ground-truth auto-encoder.
    pub mean_true_error: Option<f64>,
    /// Mean reconstruction error on every other auto-encoder.
    pub mean_other_error: Option<f64>,
    pub misclassified: usize,
    pub params: ParamCount,
    pub memory_total: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub ablation: Ablation,
    /// Original class ids in learning order; internal class `i` is `class_order[i]`.
    pub class_order: Vec<usize>,
    pub phases: Vec<PhaseRecord>,
    pub avg_incremental: f64,
    pub final_accuracy: f64,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn new(ablation: Ablation, class_order: Vec<usize>, phases: Vec<PhaseRecord>, config: ExperimentConfig) -> Self {
        let accs: Vec<f64> = phases.iter().map(|p| p.accuracy).collect();
        Self {
            ablation,
            class_order,
            avg_incremental: average_incremental(&accs),
            final_accuracy: accs.last().copied().unwrap_or(0.0),
            phases,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialises")
    }

    /// `phase,classes_seen,accuracy,old_acc,new_acc,mean_confusion`.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("phase,classes_seen,accuracy,old_acc,new_acc,mean_confusion\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.2}"));
        for p in &self.phases {
            let _ = writeln!(
                out,
                "{},{},{:.2},{},{},{}",
                p.phase,
                p.classes_seen,
                p.accuracy,
                opt(p.old_accuracy),
                opt(p.new_accuracy),
                p.confusion.map_or(String::new(), |c| format!("{:.4}", c.mean)),
            );
        }
        out
    }
}

/// `Ā = (1/T) Σ A_t`.
pub fn average_incremental(accuracies: &[f64]) -> f64 {
    if accuracies.is_empty() {
        return 0.0;
    }
    accuracies.iter().sum::<f64>() / accuracies.len() as f64
}
