//! Task-by-task training.
//!
//! Per phase: snapshot the previous model, grow the head, train extractor
//! and head jointly on `D_t ∪ M_t`, fine-tune the head alone on a
//! class-balanced subset (phases after the first), then refresh memory.
//!
//! Class ids inside the engine are arrival ranks: the `i`-th class learned
//! is class `i`, so auto-encoder `i` always belongs to internal class `i`.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Ablation, ConfigError, ExperimentConfig};
use crate::datasets::{split_tasks, DatasetError, DatasetPair};
use crate::eval::{
    accuracy, confusion_stats, error_split, misclassified_error_report, nme_baseline, old_new_accuracy, EvalError,
    PhaseRecord, Predictor, RunRecord,
};
use crate::losses::{ce_loss, confusion_weights, cr_loss, kd_loss, kd_loss_logits, total_loss, LossConfig, LossError};
use crate::memory::{ClassCandidates, ExemplarMemory, MemoryError};
use crate::model::{
    argmax_rows, argmin_rows, param_count, read_model, write_model, AutoEncoderBank, FeatureExtractor, Head,
    LinearHead, ModelError,
};
use crate::numerics::{Checkpoint, Graph, NumericsError, Sgd, SgdConfig, Tensor, Var};

pub use crate::config::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Train => "train",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("phase {phase}, {stage} epoch {epoch}, batch {batch}: {component}: {source}")]
    Batch {
        phase: usize,
        stage: Stage,
        epoch: usize,
        batch: usize,
        component: &'static str,
        #[source]
        source: LossError,
    },
    #[error("phase {phase}: the task has no training samples")]
    EmptyTask { phase: usize },
    #[error("phase {phase}: label {label} is not a new class (expected {first}..{end})")]
    NotNewClass {
        phase: usize,
        label: usize,
        first: usize,
        end: usize,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Hook(String),
}

/// Epoch means of each loss component, weighted by batch size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub phase: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub kd: f64,
    pub cr: f64,
    pub total: f64,
    pub train_acc: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phase={} stage={} epoch={} lr={:.6} ce={:.6} kd={:.6} cr={:.6} total={:.6} train_acc={:.2}",
            self.phase, self.stage, self.epoch, self.lr, self.ce, self.kd, self.cr, self.total, self.train_acc
        )
    }
}

/// Frozen copy of the model from the previous phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub extractor: FeatureExtractor,
    pub head: Head,
}

impl Snapshot {
    /// Logits for the auto-encoder head are replaced by reconstruction errors.
    fn outputs(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let h = self.extractor.extract(x)?;
        head_outputs(&self.head, &h)
    }
}

/// Reconstruction errors for a bank, logits for a linear head.
fn head_outputs(head: &Head, h: &Tensor) -> Result<Tensor, ModelError> {
    match head {
        Head::AutoEncoders(bank) => bank.reconstruction_errors(h),
        Head::Linear(l) => {
            let mut g = Graph::new();
            let w = g.constant(l.layer.weight.clone());
            let b = g.constant(l.layer.bias.clone());
            let hv = g.constant(h.clone());
            let z = g.matmul_nt(hv, w)?;
            let z = g.add_row(z, b)?;
            Ok(g.value(z).clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualState {
    pub extractor: FeatureExtractor,
    pub head: Head,
    pub old: Option<Snapshot>,
    pub memory: ExemplarMemory,
    /// Completed phases.
    pub phase: usize,
}

/// Mixes a run seed with a purpose tag and an index (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_EXTRACTOR: u64 = 1;
const TAG_HEAD: u64 = 2;
const TAG_BATCHES: u64 = 3;
const TAG_MEMORY: u64 = 4;
const TAG_SUBSET: u64 = 5;
const TAG_FINETUNE: u64 = 6;

impl ContinualState {
    pub fn new(cfg: &ExperimentConfig, input_dim: usize) -> Self {
        let m = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_EXTRACTOR, 0));
        let extractor = FeatureExtractor::new(input_dim, &m.hidden, m.feature_dim, &mut rng);
        let head = match cfg.ablation {
            Ablation::Nme => Head::Linear(LinearHead::new(m.feature_dim)),
            Ablation::AeOnly | Ablation::Full => Head::AutoEncoders(AutoEncoderBank::new(
                m.feature_dim,
                m.latent_dim,
                m.decoder_activation,
                m.error_norm,
            )),
        };
        Self {
            extractor,
            head,
            old: None,
            memory: ExemplarMemory::new(cfg.protocol.policy(), cfg.protocol.selection),
            phase: 0,
        }
    }

    pub fn classes_seen(&self) -> usize {
        self.head.num_classes()
    }

    /// Classifier used for evaluation: the bank, or NME for a linear head.
    pub fn predictor(&self) -> Predictor<'_> {
        match &self.head {
            Head::AutoEncoders(bank) => Predictor::AutoEncoders {
                extractor: &self.extractor,
                bank,
            },
            Head::Linear(_) => Predictor::Nme {
                extractor: &self.extractor,
                memory: &self.memory,
                num_classes: self.classes_seen(),
            },
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        write_model(&mut ck, &self.extractor, &self.head);
        self.memory.write_checkpoint(&mut ck);
        ck.set_meta("phase", self.phase.to_string());
        ck.set_meta("classes_seen", self.classes_seen().to_string());
        ck
    }

    /// Restores model and memory; the previous-phase snapshot is not stored.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<Self, TrainError> {
        let (extractor, head) = read_model(ck)?;
        let memory = ExemplarMemory::read_checkpoint(ck, cfg.protocol.policy(), cfg.protocol.selection)?;
        let phase = ck
            .meta("phase")
            .map_err(ModelError::from)?
            .parse()
            .map_err(|_| ModelError::InvalidArgument("bad phase in checkpoint".into()))?;
        Ok(Self {
            extractor,
            head,
            old: None,
            memory,
            phase,
        })
    }
}

/// `initial · γ^k` where `k` counts milestones (fractions of `budget`) reached by `epoch`.
pub fn lr_schedule_step(initial: f64, gamma: f64, milestones: &[f64], budget: usize, epoch: usize) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&m| epoch as f64 >= (m * budget as f64).round())
        .count();
    initial * gamma.powi(passed as i32)
}

/// Separation weight actually applied for an ablation.
pub fn effective_lambda(cfg: &ExperimentConfig) -> f64 {
    match cfg.ablation {
        Ablation::Full => cfg.loss.lambda,
        Ablation::AeOnly | Ablation::Nme => 0.0,
    }
}

/// Shuffled mini-batches; a trailing single row joins the previous batch.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

struct StageInput<'a> {
    /// Raw inputs (joint training) or frozen features (fine-tuning).
    rows: &'a Tensor,
    labels: &'a [usize],
    /// Snapshot outputs on `rows`, old classes only.
    old_targets: Option<&'a Tensor>,
    stage: Stage,
    epochs: usize,
    seed: u64,
}

struct BatchOutcome {
    ce: f64,
    kd: f64,
    cr: f64,
    total: f64,
    hits: usize,
}

fn run_stage(
    state: &mut ContinualState,
    input: StageInput<'_>,
    cfg: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    let t = &cfg.train;
    let phase = state.phase + 1;
    let n = input.labels.len();
    let mut sgd = Sgd::new(SgdConfig {
        learning_rate: t.learning_rate,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let mut logs = Vec::with_capacity(input.epochs);
    for epoch in 0..input.epochs {
        let lr = lr_schedule_step(t.learning_rate, t.lr_gamma, &t.lr_milestones, input.epochs, epoch);
        sgd.set_learning_rate(lr);
        let mut sums = [0.0; 4];
        let mut hits = 0;
        for (b, idx) in batches(n, t.batch_size, &mut rng).iter().enumerate() {
            let wrap = |component: &'static str| {
                move |source: LossError| TrainError::Batch {
                    phase,
                    stage: input.stage,
                    epoch,
                    batch: b,
                    component,
                    source,
                }
            };
            let out = train_batch(state, &input, idx, cfg, &mut sgd, &wrap)?;
            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([out.ce, out.kd, out.cr, out.total]) {
                *s += w * v;
            }
            hits += out.hits;
        }
        let log = EpochLog {
            phase,
            stage: input.stage,
            epoch,
            lr,
            ce: sums[0] / n as f64,
            kd: sums[1] / n as f64,
            cr: sums[2] / n as f64,
            total: sums[3] / n as f64,
            train_acc: 100.0 * hits as f64 / n as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

fn train_batch<W, F>(
    state: &mut ContinualState,
    input: &StageInput<'_>,
    idx: &[usize],
    cfg: &ExperimentConfig,
    sgd: &mut Sgd,
    wrap: &W,
) -> Result<BatchOutcome, TrainError>
where
    W: Fn(&'static str) -> F,
    F: FnOnce(LossError) -> TrainError,
{
    let loss: &LossConfig = &cfg.loss;
    let lambda = effective_lambda(cfg);
    let labels: Vec<usize> = idx.iter().map(|&i| input.labels[i]).collect();
    let joint = input.stage == Stage::Train;

    let mut g = Graph::new();
    let rows = g.constant(input.rows.select_rows(idx));
    let ext = joint.then(|| state.extractor.bind(&mut g, true));
    let h = match &ext {
        Some(e) => e.forward(&mut g, rows).map_err(|e| wrap("forward")(e.into()))?,
        None => rows,
    };
    let head_vars = state.head.bind(&mut g, true);
    let out = head_vars
        .forward(&mut g, h, loss.alpha)
        .map_err(|e| wrap("forward")(e.into()))?;

    let ce = ce_loss(&mut g, out.logits, &labels).map_err(wrap("L_CE"))?;
    let kd = match input.old_targets {
        Some(old) => {
            let c_old = old.cols();
            let target = old.select_rows(idx);
            let kd = match out.errors {
                Some(errors) => {
                    let slice = g.slice_cols(errors, 0, c_old).map_err(|e| wrap("L_KD")(e.into()))?;
                    kd_loss(&mut g, slice, &target, loss.alpha, loss.tau_d)
                }
                None => {
                    let slice = g.slice_cols(out.logits, 0, c_old).map_err(|e| wrap("L_KD")(e.into()))?;
                    kd_loss_logits(&mut g, slice, &target, loss.tau_d)
                }
            }
            .map_err(wrap("L_KD"))?;
            Some(kd)
        }
        None => None,
    };
    let cr = match out.errors {
        Some(errors) if lambda > 0.0 => {
            let weights = confusion_weights(g.value(errors), loss.beta).map_err(wrap("L_CR"))?;
            Some(cr_loss(&mut g, &out.latents, &labels, Some(&weights), loss).map_err(wrap("L_CR"))?)
        }
        _ => None,
    };
    let total = total_loss(&mut g, ce, kd, cr, lambda).map_err(wrap("total"))?;
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let outcome = BatchOutcome {
        ce: value(&g, Some(ce)),
        kd: value(&g, kd),
        cr: value(&g, cr),
        total: value(&g, Some(total)),
        hits: argmax_rows(g.value(out.logits))
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count(),
    };
    if !outcome.total.is_finite() {
        return Err(wrap("total")(NumericsError::NonFinite { op: "total_loss" }.into()));
    }

    let grads = g.backward(total).map_err(|e| wrap("backward")(e.into()))?;
    let mut vars: Vec<Var> = ext.as_ref().map(|e| e.vars()).unwrap_or_default();
    vars.extend(head_vars.vars());
    let grad_tensors: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    let ContinualState { extractor, head, .. } = state;
    let mut params: Vec<&mut Tensor> = if joint { extractor.parameters_mut() } else { Vec::new() };
    params.extend(head.parameters_mut());
    sgd.step(&mut params, &grad_tensors)?;
    Ok(outcome)
}

/// Trains one task. `labels` must all be new classes
/// `C_{t−1} .. C_{t−1} + n_new`; `source_indices` are their rows in the
/// training split, kept with stored exemplars.
pub fn train_task(
    state: &mut ContinualState,
    x: &Tensor,
    labels: &[usize],
    source_indices: &[usize],
    n_new: usize,
    cfg: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    let phase = state.phase + 1;
    if labels.is_empty() || n_new == 0 {
        return Err(TrainError::EmptyTask { phase });
    }
    let first = state.classes_seen();
    let end = first + n_new;
    if let Some(&label) = labels.iter().find(|&&y| y < first || y >= end) {
        return Err(TrainError::NotNewClass {
            phase,
            label,
            first,
            end,
        });
    }

    // (1) snapshot, (2) growth
    state.old = (phase > 1).then(|| Snapshot {
        extractor: state.extractor.clone(),
        head: state.head.clone(),
    });
    state.head.append_classes(n_new, derive_seed(cfg.seed, TAG_HEAD, phase as u64));

    // (3) D_t ∪ M_t
    let (mem_x, mem_y) = state.memory.all_samples();
    let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    rows.extend((0..mem_x.rows()).map(|r| mem_x.row(r).to_vec()));
    let train_x = Tensor::from_rows(&rows)?;
    let mut train_y = labels.to_vec();
    train_y.extend(&mem_y);

    // (4) joint training
    let old_targets = match &state.old {
        Some(s) => Some(s.outputs(&train_x)?),
        None => None,
    };
    let epochs = if phase == 1 {
        cfg.train.initial_epochs
    } else {
        cfg.train.incremental_epochs
    };
    let mut logs = run_stage(
        state,
        StageInput {
            rows: &train_x,
            labels: &train_y,
            old_targets: old_targets.as_ref(),
            stage: Stage::Train,
            epochs,
            seed: derive_seed(cfg.seed, TAG_BATCHES, phase as u64),
        },
        cfg,
        on_epoch,
    )?;

    // (5) balanced fine-tuning of the head with the extractor frozen
    if phase > 1 && matches!(state.head, Head::AutoEncoders(_)) {
        let per_class = cfg
            .train
            .finetune_per_class
            .unwrap_or_else(|| state.memory.policy.quota(end))
            .max(1);
        let (sub_x, sub_y) =
            state
                .memory
                .balanced_subset(x, labels, per_class, derive_seed(cfg.seed, TAG_SUBSET, phase as u64))?;
        let sub_h = state.extractor.extract(&sub_x)?;
        let sub_old = match &state.old {
            Some(s) => Some(s.outputs(&sub_x)?),
            None => None,
        };
        logs.extend(run_stage(
            state,
            StageInput {
                rows: &sub_h,
                labels: &sub_y,
                old_targets: sub_old.as_ref(),
                stage: Stage::Finetune,
                epochs: cfg.train.finetune_epochs,
                seed: derive_seed(cfg.seed, TAG_FINETUNE, phase as u64),
            },
            cfg,
            on_epoch,
        )?);
    }

    // (6) memory
    let h = state.extractor.extract(x)?;
    let candidates: Vec<ClassCandidates> = (first..end)
        .map(|c| {
            let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            ClassCandidates {
                class: c,
                indices: pos.iter().map(|&i| source_indices[i]).collect(),
                samples: x.select_rows(&pos),
                features: h.select_rows(&pos),
            }
        })
        .collect();
    state
        .memory
        .update(&candidates, derive_seed(cfg.seed, TAG_MEMORY, phase as u64))?;
    state.phase = phase;
    Ok(logs)
}

/// Callbacks and limits for [`run_experiment_with`].
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Stop after this many phases.
    pub max_phases: Option<usize>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'a>>,
    #[allow(clippy::type_complexity)]
    pub on_phase: Option<Box<dyn FnMut(&PhaseRecord, &ContinualState) -> Result<(), TrainError> + 'a>>,
}

/// Evaluates `state` on `(x, labels)` covering every seen class.
pub fn evaluate_phase(state: &ContinualState, x: &Tensor, labels: &[usize], boundary: usize) -> Result<PhaseRecord, TrainError> {
    let c = state.classes_seen();
    let distances = state.predictor().distances(x)?;
    let preds = argmin_rows(&distances);
    let split = old_new_accuracy(&preds, labels, boundary)?;
    let nme_accuracy = nme_baseline(&state.extractor, &state.memory, c, x, labels)?;
    let confusion = if c >= 2 { Some(confusion_stats(&distances)?) } else { None };
    let (mean_true_error, mean_other_error, misclassified) = match state.head {
        Head::AutoEncoders(_) => {
            let (own, other) = error_split(&distances, labels);
            (Some(own), other, misclassified_error_report(&distances, labels).len())
        }
        Head::Linear(_) => (None, None, preds.iter().zip(labels).filter(|(p, y)| p != y).count()),
    };
    Ok(PhaseRecord {
        phase: state.phase,
        classes_seen: c,
        accuracy: accuracy(&preds, labels)?,
        old_accuracy: split.old,
        new_accuracy: split.new,
        nme_accuracy,
        confusion,
        mean_true_error,
        mean_other_error,
        misclassified,
        params: param_count(&state.extractor, &state.head),
        memory_total: state.memory.total(),
        wall_clock_seconds: 0.0,
    })
}

pub fn run_experiment(data: &DatasetPair, cfg: &ExperimentConfig) -> Result<RunRecord, TrainError> {
    run_experiment_with(data, cfg, RunHooks::default())
}

/// Runs every task of the protocol and evaluates on the cumulative test set after each.
pub fn run_experiment_with(data: &DatasetPair, cfg: &ExperimentConfig, mut hooks: RunHooks<'_>) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    let stream = split_tasks(data, &cfg.protocol.task_protocol(), cfg.protocol.seed)?;
    let mut rank = vec![0; stream.class_order.len()];
    for (r, &c) in stream.class_order.iter().enumerate() {
        rank[c] = r;
    }
    let train_y: Vec<usize> = data.train.labels.iter().map(|&y| rank[y]).collect();
    let test_y: Vec<usize> = data.test.labels.iter().map(|&y| rank[y]).collect();

    let mut state = ContinualState::new(cfg, data.train.dim());
    let mut phases = Vec::new();
    let mut noop = |_: &EpochLog| {};
    let limit = hooks.max_phases.unwrap_or(usize::MAX).min(stream.len());
    for (t, task) in stream.tasks.iter().enumerate().take(limit) {
        let started = Instant::now();
        let boundary = state.classes_seen();
        let x = data.train.samples.select_rows(&task.train_indices);
        let y: Vec<usize> = task.train_indices.iter().map(|&i| train_y[i]).collect();
        let on_epoch: &mut dyn FnMut(&EpochLog) = match hooks.on_epoch.as_mut() {
            Some(f) => f.as_mut(),
            None => &mut noop,
        };
        train_task(&mut state, &x, &y, &task.train_indices, task.classes.len(), cfg, on_epoch)?;

        let test_idx = stream.cumulative_test(t);
        let tx = data.test.samples.select_rows(&test_idx);
        let ty: Vec<usize> = test_idx.iter().map(|&i| test_y[i]).collect();
        let mut record = evaluate_phase(&state, &tx, &ty, boundary)?;
        record.wall_clock_seconds = started.elapsed().as_secs_f64();
        if let Some(f) = hooks.on_phase.as_mut() {
            f(&record, &state)?;
        }
        phases.push(record);
    }
    Ok(RunRecord::new(cfg.ablation, stream.class_order.clone(), phases, cfg.clone()))
}
