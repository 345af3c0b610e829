use create_core::config::ExperimentConfig;
use create_core::datasets::gen_synthetic_manifolds;
use create_core::losses::kd_loss;
use create_core::model::Head;
use create_core::numerics::{Graph, Tensor};
use create_core::trainer::{
    run_experiment, run_experiment_with, train_task, ContinualState, EpochLog, RunHooks, Stage, TrainError,
};

const TINY: &str = r#"
seed = 3
dataset.num_classes = 4
dataset.dim = 6
dataset.samples_per_class = 40
protocol.base = 2
protocol.increment = 1
protocol.memory_size = 5
model.hidden = [8]
model.feature_dim = 6
model.latent_dim = 3
train.initial_epochs = 6
train.incremental_epochs = 4
train.finetune_epochs = 2
train.batch_size = 16
loss.alpha = 1.0
loss.normalize_latents = true
loss.lambda = 0.1
"#;

fn tiny(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!("{TINY}\n{extra}")).unwrap()
}

#[test]
fn runs_are_bit_reproducible() {
    let cfg = tiny("");
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let a = run_experiment(&data, &cfg).unwrap();
    let b = run_experiment(&data, &cfg).unwrap();
    let strip = |mut r: create_core::eval::RunRecord| {
        for p in &mut r.phases {
            p.wall_clock_seconds = 0.0;
        }
        r
    };
    let (a, b) = (strip(a), strip(b));
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.accuracy_csv(), b.accuracy_csv());
    assert_eq!(a.phases.len(), 3);
    assert_eq!(a.phases.iter().map(|p| p.classes_seen).collect::<Vec<_>>(), vec![2, 3, 4]);
}

#[test]
fn record_echo_reparses_to_the_same_config() {
    let cfg = tiny("");
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let record = run_experiment(&data, &cfg).unwrap();
    let echoed: serde_json::Value = serde_json::from_str(&record.to_json()).unwrap();
    let back: ExperimentConfig = serde_json::from_value(echoed["config"].clone()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(ExperimentConfig::from_toml_str(&back.to_toml_string()).unwrap(), cfg);
}

#[test]
fn memory_holds_only_seen_classes_within_budget() {
    for extra in ["protocol.memory = \"per_class\"", "protocol.memory = \"fixed_total\""] {
        let cfg = tiny(extra);
        let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
        let budget = cfg.protocol.memory_size;
        let per_class = matches!(cfg.protocol.policy(), create_core::datasets::MemoryPolicy::PerClass(_));
        let mut checks = 0;
        let hooks = RunHooks {
            on_phase: Some(Box::new(|record, state: &ContinualState| {
                let (_, labels) = state.memory.all_samples();
                assert!(labels.iter().all(|&y| y < record.classes_seen));
                let limit = if per_class { budget * record.classes_seen } else { budget };
                assert!(state.memory.total() <= limit);
                checks += 1;
                Ok(())
            })),
            ..RunHooks::default()
        };
        run_experiment_with(&data, &cfg, hooks).unwrap();
        assert_eq!(checks, 3);
    }
}

#[test]
fn training_loss_falls_within_each_phase() {
    let cfg = tiny("");
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let mut logs: Vec<EpochLog> = Vec::new();
    let hooks = RunHooks {
        on_epoch: Some(Box::new(|e: &EpochLog| logs.push(e.clone()))),
        ..RunHooks::default()
    };
    run_experiment_with(&data, &cfg, hooks).unwrap();
    for phase in 1..=3 {
        let train: Vec<&EpochLog> = logs.iter().filter(|e| e.phase == phase && e.stage == Stage::Train).collect();
        assert!(train.last().unwrap().total < train[0].total, "phase {phase}");
        assert!(train.iter().all(|e| e.total.is_finite() && e.train_acc >= 0.0));
        if phase > 1 {
            assert!(train.iter().all(|e| e.kd > 0.0));
        } else {
            assert!(train.iter().all(|e| e.kd == 0.0));
        }
    }
    assert!(logs.iter().any(|e| e.stage == Stage::Finetune));
}

#[test]
fn ablation_modes_change_only_classifier_fields() {
    let cfg = tiny("ablation = \"ae_only\"");
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let mut logs = Vec::new();
    let hooks = RunHooks {
        on_epoch: Some(Box::new(|e: &EpochLog| logs.push(e.clone()))),
        ..RunHooks::default()
    };
    let ae = run_experiment_with(&data, &cfg, hooks).unwrap();
    assert!(logs.iter().all(|e| e.cr == 0.0));

    let nme_cfg = tiny("ablation = \"nme\"");
    let nme = run_experiment(&data, &nme_cfg).unwrap();
    assert_eq!(nme.class_order, ae.class_order);
    for (a, n) in ae.phases.iter().zip(&nme.phases) {
        assert_eq!(a.classes_seen, n.classes_seen);
        assert_eq!(a.memory_total, n.memory_total);
        assert_eq!(a.params.backbone, n.params.backbone);
        assert!(n.mean_true_error.is_none() && a.mean_true_error.is_some());
        assert_eq!(n.accuracy, n.nme_accuracy);
    }
}

#[test]
fn zero_learning_rate_leaves_old_autoencoders_untouched() {
    let cfg = tiny("");
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let mut state = ContinualState::new(&cfg, data.train.dim());
    let rows = |c: usize| data.train.indices_of(&[c]);
    let first: Vec<usize> = [rows(0), rows(1)].concat();
    let (x, y) = data.train.gather(&first);
    train_task(&mut state, &x, &y, &first, 2, &cfg, &mut |_| {}).unwrap();

    let before = state.clone();
    let mut frozen = cfg.clone();
    frozen.loss.lambda = 0.0;
    frozen.train.learning_rate = 0.0;
    let next = rows(2);
    let (x2, _) = data.train.gather(&next);
    train_task(&mut state, &x2, &vec![2; next.len()], &next, 1, &frozen, &mut |_| {}).unwrap();
    let (Head::AutoEncoders(old), Head::AutoEncoders(new)) = (&before.head, &state.head) else {
        panic!("auto-encoder heads expected")
    };
    assert_eq!(&new.autoencoders[..2], &old.autoencoders[..]);
    assert_eq!(state.extractor, before.extractor);
}

#[test]
fn distillation_is_anchored_at_the_snapshot() {
    let cfg = tiny("");
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let mut state = ContinualState::new(&cfg, data.train.dim());
    let first: Vec<usize> = data.train.indices_of(&[0, 1]);
    let (x, y) = data.train.gather(&first);
    train_task(&mut state, &x, &y, &first, 2, &cfg, &mut |_| {}).unwrap();

    let Head::AutoEncoders(old_bank) = &state.head else { panic!() };
    let h = state.extractor.extract(&x).unwrap();
    let eps_old = old_bank.reconstruction_errors(&h).unwrap();
    let mut bank = old_bank.clone();
    bank.append_classes(1, 99);

    let mut g = Graph::new();
    let hv = g.constant(h);
    let vars = bank.bind(&mut g, true);
    let out = vars.forward(&mut g, hv).unwrap();
    let old_cols = g.slice_cols(out.errors, 0, 2).unwrap();
    let kd = kd_loss(&mut g, old_cols, &eps_old, cfg.loss.alpha, cfg.loss.tau_d).unwrap();
    let grads = g.backward(kd).unwrap();
    for c in 0..2 {
        for v in vars.class_vars(c) {
            let worst = grads.get(v).data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(worst <= 1e-10, "class {c}: {worst:e}");
        }
    }
}

#[test]
fn tasks_must_bring_new_classes() {
    let cfg = tiny("");
    let mut state = ContinualState::new(&cfg, 6);
    let x = Tensor::zeros(&[2, 6]);
    let err = train_task(&mut state, &x, &[0, 5], &[0, 1], 2, &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::NotNewClass { label: 5, .. }), "{err}");
    let err = train_task(&mut state, &Tensor::zeros(&[0, 6]), &[], &[], 1, &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::EmptyTask { phase: 1 }));
}

#[test]
fn state_checkpoint_round_trip() {
    let cfg = tiny("");
    let data = gen_synthetic_manifolds(&cfg.dataset.synthetic()).unwrap();
    let mut saved = None;
    let hooks = RunHooks {
        max_phases: Some(2),
        on_phase: Some(Box::new(|_, state: &ContinualState| {
            saved = Some(state.clone());
            Ok(())
        })),
        ..RunHooks::default()
    };
    let record = run_experiment_with(&data, &cfg, hooks).unwrap();
    assert_eq!(record.phases.len(), 2);
    let state = saved.unwrap();
    let bytes = state.to_checkpoint().to_bytes();
    let back =
        ContinualState::from_checkpoint(&create_core::numerics::Checkpoint::from_bytes(&bytes).unwrap(), &cfg).unwrap();
    assert_eq!(back.extractor, state.extractor);
    assert_eq!(back.head, state.head);
    assert_eq!(back.memory, state.memory);
    assert_eq!(back.phase, 2);
}

#[test]
fn a_failing_hook_stops_the_run() {
    let cfg = tiny("");
    let data = gen_synthetic_manifolds(&cfg.dataset.synthetic()).unwrap();
    let hooks = RunHooks {
        on_phase: Some(Box::new(|_, _: &ContinualState| Err(TrainError::Hook("disk full".into())))),
        ..RunHooks::default()
    };
    let err = run_experiment_with(&data, &cfg, hooks).unwrap_err();
    assert_eq!(err.to_string(), "disk full");
}

#[test]
fn separable_pair_is_learned_in_the_first_task() {
    let cfg = ExperimentConfig::from_toml_str(
        r#"
seed = 1
dataset.num_classes = 2
dataset.clusters_per_class = 1
dataset.dim = 6
dataset.samples_per_class = 100
dataset.cluster_spread = 0.2
protocol.base = 2
protocol.increment = 1
protocol.memory_size = 5
model.hidden = [8]
model.feature_dim = 6
model.latent_dim = 3
train.initial_epochs = 30
train.batch_size = 16
loss.alpha = 1.0
loss.normalize_latents = true
"#,
    )
    .unwrap();
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let mut state = ContinualState::new(&cfg, data.train.dim());
    let all = data.train.indices_of(&[0, 1]);
    let (x, y) = data.train.gather(&all);
    let logs = train_task(&mut state, &x, &y, &all, 2, &cfg, &mut |_| {}).unwrap();
    assert_eq!(logs.len(), 30);
    let acc = logs.last().unwrap().train_acc;
    assert!(acc >= 99.0, "training accuracy {acc}");
}

#[test]
fn new_classes_pull_against_distillation_and_the_snapshot_stays_put() {
    let mut cfg = tiny("");
    cfg.loss.lambda = 0.0;
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let mut state = ContinualState::new(&cfg, data.train.dim());
    let first = data.train.indices_of(&[0, 1]);
    let (x, y) = data.train.gather(&first);
    train_task(&mut state, &x, &y, &first, 2, &cfg, &mut |_| {}).unwrap();

    let before = (state.extractor.clone(), state.head.clone());
    let next = data.train.indices_of(&[2]);
    let (x2, _) = data.train.gather(&next);
    let logs = train_task(&mut state, &x2, &vec![2; next.len()], &next, 1, &cfg, &mut |_| {}).unwrap();
    assert!(logs[0].kd > 0.0, "first-epoch distillation {}", logs[0].kd);
    let snap = state.old.as_ref().unwrap();
    assert_eq!((snap.extractor.clone(), snap.head.clone()), before);
    assert_ne!(state.extractor, before.0);
}
