use create_core::config::ExperimentConfig;
use create_core::datasets::{
    gen_synthetic_manifolds, parse_idx_images, parse_idx_labels, read_table, split_tasks, write_idx_images,
    write_idx_labels, write_table, MemoryPolicy, SyntheticConfig, TaskProtocol,
};
use create_core::eval::{average_incremental, confusion_stats, nearest_mean_distances};
use create_core::losses::{ce_loss, confusion_score, confusion_weight, cr_loss, kd_loss, LossConfig};
use create_core::memory::{herding_select, ClassCandidates, ExemplarMemory, Selection};
use create_core::model::{argmax_rows, argmin_rows, predict_proba, AutoEncoderBank, DecoderActivation, ErrorNorm};
use create_core::numerics::{Checkpoint, Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn eps_rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| matrix(r, c, 0.0, 10.0))
}

fn bank(d: usize, l: usize, classes: usize, seed: u64) -> AutoEncoderBank {
    let mut b = AutoEncoderBank::new(d, l, DecoderActivation::Tanh, ErrorNorm::L2);
    b.append_classes(classes, seed);
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(a in matrix(3, 4, -2.0, 2.0), b in matrix(4, 2, -2.0, 2.0)) {
        let build = |which: u8| {
            let mut g = Graph::new();
            let av = g.param(a.clone());
            let bv = g.constant(b.clone());
            let z = g.matmul(av, bv).unwrap();
            let l1 = {
                let t = g.tanh(z).unwrap();
                g.sum(t).unwrap()
            };
            let l2 = {
                let s = g.row_sum_sq(z).unwrap();
                g.mean(s).unwrap()
            };
            let out = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(out).unwrap().get(av)
        };
        let (g1, g2, g12) = (build(0), build(1), build(2));
        for ((x, y), z) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
            prop_assert!((x + y - z).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(a in matrix(4, 3, -3.0, 3.0)) {
        let run = || {
            let mut g = Graph::new();
            let av = g.param(a.clone());
            let s = g.log_softmax_rows(av).unwrap();
            let t = g.tanh(s).unwrap();
            let out = g.sum(t).unwrap();
            (g.value(out).data()[0].to_bits(), g.backward(out).unwrap().get(av).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn task_streams_are_disjoint_and_cover(classes in 2usize..12, base_frac in 0usize..2, inc in 1usize..4, seed in 0u64..1000) {
        let data = gen_synthetic_manifolds(&SyntheticConfig {
            num_classes: classes,
            samples_per_class: 10,
            dim: 3,
            ..SyntheticConfig::default()
        }).unwrap();
        let base = if base_frac == 0 { 0 } else { classes / 2 };
        let rest = classes - base;
        prop_assume!(rest % inc == 0);
        let protocol = TaskProtocol { base_classes: base, increment: inc, class_order: None, memory: MemoryPolicy::PerClass(2) };
        let stream = split_tasks(&data, &protocol, seed).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for task in &stream.tasks {
            for &c in &task.classes {
                prop_assert!(seen.insert(c), "class {} in two tasks", c);
            }
        }
        let mut all: Vec<usize> = stream.tasks.iter().flat_map(|t| t.train_indices.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.train.len()).collect::<Vec<_>>());
        for t in 1..stream.len() {
            prop_assert!(stream.cumulative_test(t).len() > stream.cumulative_test(t - 1).len());
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_follow_errors(eps in eps_rows(8, 6), alpha in 0.01f64..5.0) {
        let p = predict_proba(&eps, alpha).unwrap();
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            // A dominant entry rounds to exactly 1.0 once the others drop below half an ulp.
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            let spread = eps.row(r).iter().fold(0.0f64, |m, &e| m.max(e)) - eps.row(r).iter().fold(f64::MAX, |m, &e| m.min(e));
            if alpha * spread < 30.0 {
                prop_assert!(row.iter().all(|&v| v < 1.0));
            }
        }
        prop_assert_eq!(argmax_rows(&p), argmin_rows(&eps));
    }

    #[test]
    fn classify_ignores_alpha(h in matrix(6, 5, -0.9, 0.9), seed in 0u64..500, a1 in 0.01f64..3.0, a2 in 0.01f64..3.0) {
        let b = bank(5, 3, 4, seed);
        let eps = b.reconstruction_errors(&h).unwrap();
        let p1 = predict_proba(&eps, a1).unwrap();
        let p2 = predict_proba(&eps, a2).unwrap();
        prop_assert_eq!(argmax_rows(&p1), argmax_rows(&p2));
        prop_assert_eq!(argmax_rows(&p1), b.classify(&h).unwrap());
    }

    #[test]
    fn appending_keeps_old_columns_bit_identical(h in matrix(5, 4, -0.9, 0.9), seed in 0u64..500, extra in 1usize..4) {
        let mut b = bank(4, 2, 3, seed);
        let before = b.reconstruction_errors(&h).unwrap();
        b.append_classes(extra, seed + 1);
        let after = b.reconstruction_errors(&h).unwrap();
        for r in 0..h.rows() {
            for c in 0..3 {
                prop_assert_eq!(before.get(r, c).to_bits(), after.get(r, c).to_bits());
            }
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(logits in matrix(5, 4, -5.0, 5.0), labels in prop::collection::vec(0usize..4, 5)) {
        let mut g = Graph::new();
        let z = g.param(logits);
        let l = ce_loss(&mut g, z, &labels).unwrap();
        prop_assert!(g.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn distillation_gradient_vanishes_at_equality(eps in eps_rows(6, 5), alpha in 0.05f64..2.0, tau in 0.5f64..4.0) {
        let mut g = Graph::new();
        let e = g.param(eps.clone());
        let l = kd_loss(&mut g, e, &eps, alpha, tau).unwrap();
        let grad = g.backward(l).unwrap().get(e);
        prop_assert!(grad.data().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn confusion_score_is_affine_invariant(row in prop::collection::vec(0.0f64..10.0, 2..8), a in 0.1f64..10.0, b in 0.0f64..5.0) {
        let s = confusion_score(&row).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let moved: Vec<f64> = row.iter().map(|v| a * v + b).collect();
        prop_assert!((confusion_score(&moved).unwrap() - s).abs() <= 1e-12);
    }

    #[test]
    fn confusion_weight_is_decreasing_and_bounded(s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0, beta in 0.1f64..5.0) {
        prop_assume!(s1 < s2);
        let (w1, w2) = (confusion_weight(s1, beta), confusion_weight(s2, beta));
        prop_assert!(w1 > w2);
        for w in [w1, w2] {
            prop_assert!(w >= 1.0 + (-beta).exp() - 1e-15 && w <= 2.0);
        }
    }

    #[test]
    fn separation_loss_falls_as_positive_pair_aligns(x in 0.05f64..0.9, dx in 0.01f64..0.09, y in -0.9f64..0.9, tau in 0.05f64..1.0) {
        // Anchor (1, 0), positive (x, 0), negative (0, y): only the positive
        // pair's dot product depends on x.
        let loss = |x: f64| {
            let cfg = LossConfig { tau_r: tau, ..LossConfig::default() };
            let mut g = Graph::new();
            let z0 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![x, 0.0], vec![0.0, y]]).unwrap());
            let z1 = g.constant(Tensor::from_rows(&[vec![0.3, 0.1], vec![0.2, -0.4], vec![0.5, 0.5]]).unwrap());
            let l = cr_loss(&mut g, &[z0, z1], &[0, 0, 1], None, &cfg).unwrap();
            g.value(l).data()[0]
        };
        prop_assert!(loss(x + dx) < loss(x));
    }

    #[test]
    fn fixed_budget_holds_after_every_task(budget in 4usize..40, sizes in prop::collection::vec(1usize..15, 1..6)) {
        let mut memory = ExemplarMemory::new(MemoryPolicy::FixedTotal(budget), Selection::Herding);
        let mut next = 0;
        for (t, &n_classes) in sizes.iter().enumerate() {
            let cands: Vec<ClassCandidates> = (0..n_classes.min(4))
                .map(|j| {
                    let class = next + j;
                    let rows: Vec<Vec<f64>> = (0..n_classes + 3).map(|r| vec![(r * 7 + class) as f64 % 5.0, r as f64]).collect();
                    let x = Tensor::from_rows(&rows).unwrap();
                    ClassCandidates { class, indices: (0..rows.len()).map(|r| 1000 * class + r).collect(), samples: x.clone(), features: x }
                })
                .collect();
            next += cands.len();
            memory.update(&cands, t as u64).unwrap();
            prop_assert!(memory.total() <= budget);
            let (_, labels) = memory.all_samples();
            prop_assert!(labels.iter().all(|&y| y < next));
        }
    }

    #[test]
    fn herding_ignores_input_order(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..12), k in 1usize..6, shift in 0usize..12) {
        let n = rows.len();
        let keys: Vec<usize> = (0..n).map(|i| 10 * i).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let picked: Vec<usize> = herding_select(&x, &keys, k).iter().map(|&i| keys[i]).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let px = x.select_rows(&perm);
        let pkeys: Vec<usize> = perm.iter().map(|&i| keys[i]).collect();
        let repicked: Vec<usize> = herding_select(&px, &pkeys, k).iter().map(|&i| pkeys[i]).collect();
        prop_assert_eq!(picked, repicked);
    }

    #[test]
    fn balanced_subset_is_flat_up_to_availability(per_class in 1usize..8, new_rows in 1usize..10, seed in 0u64..100) {
        let mut memory = ExemplarMemory::new(MemoryPolicy::PerClass(3), Selection::Random);
        let cands: Vec<ClassCandidates> = (0..2)
            .map(|class| {
                let x = Tensor::from_rows(&(0..6).map(|r| vec![r as f64, class as f64]).collect::<Vec<_>>()).unwrap();
                ClassCandidates { class, indices: (0..6).collect(), samples: x.clone(), features: x }
            })
            .collect();
        memory.update(&cands, seed).unwrap();
        let current = Tensor::from_rows(&(0..new_rows).map(|r| vec![r as f64, 9.0]).collect::<Vec<_>>()).unwrap();
        let (_, labels) = memory.balanced_subset(&current, &vec![2; new_rows], per_class, seed).unwrap();
        let count = |c: usize| labels.iter().filter(|&&y| y == c).count();
        prop_assert_eq!(count(0), per_class.min(3));
        prop_assert_eq!(count(1), per_class.min(3));
        prop_assert_eq!(count(2), per_class.min(new_rows));
    }

    #[test]
    fn average_matches_recomputation(accs in prop::collection::vec(0.0f64..100.0, 1..12)) {
        let direct: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
        prop_assert!((average_incremental(&accs) - direct).abs() <= 1e-12);
    }

    #[test]
    fn confusion_summary_ignores_positive_rescaling(eps in eps_rows(10, 5), a in 0.1f64..10.0) {
        let scaled = Tensor::matrix(eps.rows(), eps.cols(), eps.data().iter().map(|v| a * v).collect()).unwrap();
        let (s1, s2) = (confusion_stats(&eps).unwrap(), confusion_stats(&scaled).unwrap());
        for (x, y) in [(s1.min, s2.min), (s1.median, s2.median), (s1.mean, s2.mean), (s1.max, s2.max)] {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn nearest_mean_is_permutation_consistent(h in matrix(6, 3, -1.0, 1.0), protos in matrix(4, 3, -1.0, 1.0), shift in 1usize..4) {
        let perm: Vec<usize> = (0..4).map(|c| (c + shift) % 4).collect();
        let preds = argmin_rows(&nearest_mean_distances(&h, &protos));
        let permuted = argmin_rows(&nearest_mean_distances(&h, &protos.select_rows(&perm)));
        for (p, q) in preds.iter().zip(&permuted) {
            prop_assert_eq!(*p, perm[*q]);
        }
    }

    #[test]
    fn idx_round_trip(rows in 1usize..5, cols in 1usize..5, n in 1usize..6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Vec<u8>> = (0..n).map(|i| (0..rows * cols).map(|j| (seed.wrapping_add((i * 31 + j) as u64) % 256) as u8).collect()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx_images(&ip, rows, cols, &images).unwrap();
        write_idx_labels(&lp, &labels).unwrap();
        let (count, r, c, pixels) = parse_idx_images(&std::fs::read(&ip).unwrap(), "img").unwrap();
        prop_assert_eq!((count, r, c), (n, rows, cols));
        prop_assert_eq!(pixels, images.concat());
        prop_assert_eq!(parse_idx_labels(&std::fs::read(&lp).unwrap(), "lbl").unwrap(), labels);
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20), key in "[a-z]{1,8}") {
        let mut ck = Checkpoint::new();
        ck.insert(key.clone(), Tensor::new(vec![values.len()], values.clone()).unwrap());
        ck.set_meta("k", key.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn table_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % 3).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        write_table(&path, 3, &labels, &x).unwrap();
        let back = read_table(&path).unwrap();
        prop_assert_eq!(back.labels, labels);
        prop_assert_eq!(back.rows, x);
    }

    #[test]
    fn config_echo_reparses(seed in any::<u64>(), alpha in 0.01f64..10.0, lambda in 0.0f64..3.0, epochs in 1usize..100, base in 0usize..5) {
        let text = format!(
            "seed = {seed}\nloss.alpha = {alpha:?}\nloss.lambda = {lambda:?}\ntrain.initial_epochs = {epochs}\nprotocol.base = {base}\nprotocol.increment = 1\n"
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}
