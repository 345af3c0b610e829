//! Command implementations behind the `create-cil` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use create_core::config::{Ablation, ConfigError, ExperimentConfig};
use create_core::eval::{export_embeddings, EmbeddingSpace, RunRecord};
use create_core::losses::{gradcheck_battery, BatteryReport, LossConfig};
use create_core::model::{read_model, Head};
use create_core::numerics::Checkpoint;
use create_core::trainer::{run_experiment_with, RunHooks, TrainError};
use thiserror::Error;

pub const RECORD_FILE: &str = "run_record.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("run failed: {0}")]
    Train(#[from] TrainError),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Loads a config and applies a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing a non-empty one unless `overwrite` is set.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() && !overwrite {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (pass --overwrite to replace its contents)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Runs one experiment and writes the record, config echo, accuracy table
/// and per-phase checkpoints into `out`.
pub fn run_into(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out: &Path,
    overwrite: bool,
    log: &mut dyn Write,
) -> Result<RunRecord, CliError> {
    prepare_out_dir(out, overwrite)?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(io_err(&ck_dir))?;
    let data = cfg.dataset.load(base_dir)?;

    let stream = create_core::datasets::split_tasks(&data, &cfg.protocol.task_protocol(), cfg.protocol.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let class_order = join(&stream.class_order);
    let log = std::cell::RefCell::new(log);
    let hooks = RunHooks {
        max_phases: None,
        on_epoch: Some(Box::new(|e| {
            let _ = writeln!(log.borrow_mut(), "{e}");
        })),
        on_phase: Some(Box::new(|record, state| {
            let mut ck = state.to_checkpoint();
            ck.set_meta("class_order", class_order.clone());
            let path = ck_dir.join(format!("phase_{}.ckpt", record.phase));
            ck.save(&path).map_err(|e| TrainError::Hook(e.to_string()))?;
            let _ = writeln!(
                log.borrow_mut(),
                "phase={} classes={} accuracy={:.2} nme_accuracy={:.2}",
                record.phase,
                record.classes_seen,
                record.accuracy,
                record.nme_accuracy
            );
            Ok(())
        })),
    };
    let record = run_experiment_with(&data, cfg, hooks)?;

    write_file(&out.join(RECORD_FILE), &record.to_json())?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml_string())?;
    write_file(&out.join(ACCURACY_FILE), &record.accuracy_csv())?;
    Ok(record)
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn cmd_run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    overwrite: bool,
    log: &mut dyn Write,
) -> Result<RunRecord, CliError> {
    let cfg = load_config(config, seed)?;
    run_into(&cfg, &config_dir(config), out, overwrite, log)
}

/// Runs nme, ae_only and full on one config into `out/<ablation>/` and
/// writes a three-row comparison table.
pub fn cmd_ablate(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    overwrite: bool,
    log: &mut dyn Write,
) -> Result<Vec<RunRecord>, CliError> {
    let base = load_config(config, seed)?;
    prepare_out_dir(out, overwrite)?;
    let mut records = Vec::new();
    for ablation in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.ablation = ablation;
        let _ = writeln!(log, "ablation={}", ablation.name());
        records.push(run_into(&cfg, &config_dir(config), &out.join(ablation.name()), true, log)?);
    }
    let table = ablation_table(&records);
    write_file(&out.join(ABLATION_FILE), &table)?;
    let _ = write!(log, "{table}");
    Ok(records)
}

pub fn ablation_table(records: &[RunRecord]) -> String {
    let mut out = String::from("ablation,avg_incremental,final_accuracy\n");
    for r in records {
        out.push_str(&format!("{},{:.2},{:.2}\n", r.ablation.name(), r.avg_incremental, r.final_accuracy));
    }
    out
}

/// Prints one line per loss and a PASS/FAIL summary.
pub fn cmd_gradcheck(seed: u64, loss: &LossConfig, out: &mut dyn Write) -> Result<BatteryReport, CliError> {
    loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = gradcheck_battery(seed, loss).map_err(|e| CliError::Runtime(e.to_string()))?;
    for e in &report.entries {
        let _ = writeln!(
            out,
            "{:<8} configs={} max_rel_err={:.3e} {}",
            e.loss,
            e.configs,
            e.max_relative_error,
            if e.passed { "ok" } else { "FAILED" }
        );
    }
    let failed: Vec<String> = report
        .entries
        .iter()
        .filter(|e| !e.passed)
        .map(|e| {
            let (param, entry) = e.worst_entry.unwrap_or((0, 0));
            format!(
                "{} (config {}, parameter {}, entry {}: analytic {:.6e}, numeric {:.6e})",
                e.loss, e.worst_config, param, entry, e.analytic, e.numeric
            )
        })
        .collect();
    if failed.is_empty() {
        let _ = writeln!(out, "PASS");
        Ok(report)
    } else {
        let _ = writeln!(out, "FAIL: {}", failed.join("; "));
        Err(CliError::Gradcheck(failed.join("; ")))
    }
}

/// `feature` or `latent:<class>`, class given as an original dataset label.
pub fn parse_space(text: &str) -> Result<(bool, Option<usize>), CliError> {
    match text.split_once(':') {
        None if text == "feature" => Ok((true, None)),
        Some(("latent", c)) => c
            .parse()
            .map(|c| (false, Some(c)))
            .map_err(|_| CliError::Usage(format!("bad class id in space selector `{text}`"))),
        _ => Err(CliError::Usage(format!(
            "unknown space `{text}` (expected `feature` or `latent:<class>`)"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportSplit {
    Train,
    Test,
}

/// Exports embeddings of the first `limit` samples of a split.
pub fn cmd_export(
    checkpoint: &Path,
    config: &Path,
    space: &str,
    split: ExportSplit,
    limit: Option<usize>,
    out: &Path,
) -> Result<usize, CliError> {
    let cfg = load_config(config, None)?;
    let (feature, class) = parse_space(space)?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| CliError::Runtime(format!("{}: {e}", checkpoint.display())))?;
    let (extractor, head) = read_model(&ck).map_err(|e| CliError::Runtime(format!("{}: {e}", checkpoint.display())))?;
    let data = cfg.dataset.load(&config_dir(config))?;
    let set = match split {
        ExportSplit::Train => &data.train,
        ExportSplit::Test => &data.test,
    };
    if set.dim() != extractor.input_dim() {
        return Err(CliError::Runtime(format!(
            "checkpoint expects {}-dimensional inputs, dataset has {}",
            extractor.input_dim(),
            set.dim()
        )));
    }
    let n = limit.unwrap_or(set.len()).min(set.len());
    let (x, labels) = set.gather(&(0..n).collect::<Vec<_>>());
    let space = if feature {
        EmbeddingSpace::Feature
    } else {
        let original = class.expect("latent has a class");
        EmbeddingSpace::Latent(internal_class(&ck, head.num_classes(), original)?)
    };
    let bank = match &head {
        Head::AutoEncoders(b) => Some(b),
        Head::Linear(_) => None,
    };
    export_embeddings(&extractor, bank, &x, &labels, data.num_classes(), space, out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(n)
}

/// Maps an original label to its auto-encoder index via the stored class order.
fn internal_class(ck: &Checkpoint, seen: usize, original: usize) -> Result<usize, CliError> {
    let order: Vec<usize> = match ck.meta("class_order") {
        Ok(s) if !s.is_empty() => s
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Runtime("checkpoint has a malformed class order".into()))?,
        _ => (0..seen).collect(),
    };
    order[..seen.min(order.len())]
        .iter()
        .position(|&c| c == original)
        .ok_or_else(|| CliError::Runtime(format!("class {original} has no auto-encoder in this checkpoint")))
}
