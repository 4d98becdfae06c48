//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::time::Instant;

use clustershare::checkpoint::write_atomic;
use clustershare::cluster_layer::layer_clustering_loss;
use clustershare::clustering::kmeans_pp_seed_from;
use clustershare::datasets::{generate_synthetic_tasks, linear_probe};
use clustershare::nn::BatchItem;
use clustershare::optimizer::OptimizerKind;
use clustershare::run::{load_run_data, RunConfig, CLUSTERS_FILE, CONFIG_FILE, METRICS_FILE};
use clustershare::trainer::{epoch_batches, Batching, ClusterGrad, MetricRow};
use clustershare::{
    adjusted_rand_index, cluster_tasks, clustering_loss, cmd_train, evaluate, finite_diff_check, run_training,
    train_batch, Activation, Architecture, ClusterState, LossTerms, Model, ModelParams, PointSet, Regime, SlotInit,
    State, TaskBatch, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn suite(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::synthetic_suite()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, input_dim: usize, tasks: usize, classes: usize, n: usize) -> Vec<(Vec<f64>, usize, usize)> {
    (0..n)
        .map(|i| {
            let x = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (x, rng.random_range(0..classes), i % tasks)
        })
        .collect()
}

fn as_batch(items: &[(Vec<f64>, usize, usize)]) -> TaskBatch<'_, f64> {
    TaskBatch::new(
        items
            .iter()
            .map(|(x, label, task)| BatchItem {
                features: x,
                label: *label,
                task: *task,
            })
            .collect(),
    )
}

/// Random model and cluster states with non-trivial centroids.
fn random_model(rng: &mut ChaCha8Rng) -> (Model, Vec<ClusterState<f64>>, Architecture) {
    let tasks = rng.random_range(2..=4);
    let layers = rng.random_range(1..=2);
    let arch = Architecture {
        input_dim: rng.random_range(1..=8),
        trunk_dims: (0..rng.random_range(0..=1)).map(|_| rng.random_range(1..=8)).collect(),
        cluster_dims: (0..layers).map(|_| rng.random_range(1..=8)).collect(),
        cluster_counts: (0..layers).map(|_| rng.random_range(1..=tasks)).collect(),
        num_tasks: tasks,
        num_classes: rng.random_range(2..=3),
        hidden_activation: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu },
    };
    let mut model = ModelParams::initialize(&arch, SlotInit::Independent, rng).unwrap();
    // Zero biases put ReLU pre-activations exactly on the kink whenever the
    // layer input is all zeros; random biases keep the check at differentiable points.
    let names = model.tensor_names();
    for (name, t) in names.iter().zip(model.tensors_mut()) {
        if name.ends_with("bias") {
            t.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    let states = model
        .cluster_layers
        .iter()
        .map(|bank| {
            let k = bank.cluster_count;
            let assignments = (0..bank.num_tasks()).map(|_| rng.random_range(0..k)).collect();
            let centroids = (0..k)
                .map(|_| (0..bank.slot_len()).map(|_| rng.random_range(-0.5..0.5)).collect())
                .collect();
            ClusterState {
                assignments,
                centroids,
                frozen: false,
            }
        })
        .collect();
    (model, states, arch)
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let (model, states, arch) = random_model(&mut rng);
        let items = random_batch(&mut rng, arch.input_dim, arch.num_tasks, arch.num_classes, 7);
        let batch = as_batch(&items);
        for (w, terms) in worst.iter_mut().zip([
            LossTerms::classification_only(),
            LossTerms::clustering_only(0.1),
            LossTerms::full(0.1),
        ]) {
            let report = finite_diff_check(&model, &states, &batch, terms, 1e-5).map_err(|e| e.to_string())?;
            *w = w.max(report.max_relative_error);
        }
    }
    ensure(
        worst.iter().all(|&e| e < 1e-4),
        format!("max rel err L_p {:.2e}, aL_c {:.2e}, L {:.2e} (limit 1e-4)", worst[0], worst[1], worst[2]),
    )
}

fn clustering_loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (model, states, _) = random_model(&mut rng);
        let lib = clustering_loss(&model.cluster_layers, &states).map_err(|e| e.to_string())?;
        let mut hand = 0.0;
        for (i, bank) in model.cluster_layers.iter().enumerate() {
            for j in 0..bank.num_tasks() {
                let slot = &bank.slots[j];
                let c = &states[i].centroids[states[i].assignments[j]];
                for (k, &w) in slot.weights.iter().chain(&slot.bias).enumerate() {
                    hand += (w - c[k]) * (w - c[k]);
                }
            }
        }
        worst = worst.max((lib - hand).abs());
    }
    ensure(worst <= 1e-10, format!("max |lib - hand| {worst:.2e} over 50 states (limit 1e-10)"))
}

fn upper_limit() -> Outcome {
    let cfg = RunConfig {
        epochs: 10,
        ..suite(0)
    };
    let data = load_run_data::<f64>(&cfg).map_err(|e| e.to_string())?;
    let spec_cfg = TrainConfig {
        regime: Regime::Specific,
        ..cfg.train_config()
    };
    let full_cfg = TrainConfig {
        cluster_counts: vec![cfg.num_tasks; cfg.cluster_counts.len()],
        ..cfg.train_config()
    };
    let a = run_training(&full_cfg, &data.train, &data.test).map_err(|f| f.error.to_string())?;
    let b = run_training(&spec_cfg, &data.train, &data.test).map_err(|f| f.error.to_string())?;
    let key = |r: &MetricRow| (r.epoch, r.task_id, r.split);
    let (ma, mb) = (&a.history.metrics, &b.history.metrics);
    if ma.len() != mb.len() || ma.iter().zip(mb).any(|(x, y)| key(x) != key(y)) {
        return Err("metric rows differ in shape".into());
    }
    let mut worst = 0.0f64;
    for (x, y) in ma.iter().zip(mb) {
        for (p, q) in [(x.accuracy, y.accuracy), (x.loss_lp, y.loss_lp), (x.loss_lc, y.loss_lc)] {
            worst = worst.max((p - q).abs());
        }
    }
    let mut worst_batch = 0.0f64;
    for (x, y) in a.history.batches.iter().zip(&b.history.batches) {
        worst_batch = worst_batch.max((x.loss - y.loss).abs());
    }
    let mut partitions_match = true;
    for (ea, eb) in a.history.clusters.iter().zip(&b.history.clusters) {
        for (la, lb) in ea.layers.iter().zip(&eb.layers) {
            partitions_match &= adjusted_rand_index(&la.assignments, &lb.assignments).unwrap() == 1.0;
        }
    }
    ensure(
        worst <= 1e-12 && worst_batch <= 1e-12 && partitions_match,
        format!(
            "{} rows, max metric diff {worst:.2e}, max batch loss diff {worst_batch:.2e}, partitions equal: {partitions_match}",
            ma.len()
        ),
    )
}

fn lower_limit() -> Outcome {
    let tasks = 5;
    let cfg = TrainConfig {
        input_dim: 6,
        trunk_dims: vec![5],
        cluster_hidden_dims: vec![4, 3],
        cluster_counts: vec![1, 1],
        num_tasks: tasks,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.05,
        cluster_grad: ClusterGrad::LpOnly,
        freeze_after_epochs: None,
        slot_init: SlotInit::Independent,
        ..TrainConfig::default()
    };
    let mut state = State::new(&cfg).map_err(|e| e.to_string())?;
    // Hard-share reference: one slot per layer, updated with the mean of the per-task slot gradients.
    let mut reference = state.params.clone();
    let lr = cfg.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let items = random_batch(&mut rng, cfg.input_dim, tasks, 2, 3 * tasks);
        let batch = as_batch(&items);
        let tape = reference.forward_batch(&batch).map_err(|e| e.to_string())?;
        let grads = reference
            .backward(&tape, &[], LossTerms::classification_only())
            .map_err(|e| e.to_string())?;
        for (layer, g) in reference.trunk.iter_mut().zip(&grads.trunk) {
            layer.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            layer.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= lr * d);
        }
        for (layer, g) in reference.heads.iter_mut().zip(&grads.heads) {
            layer.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            layer.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= lr * d);
        }
        for (bank, g) in reference.cluster_layers.iter_mut().zip(&grads.banks) {
            let mean: Vec<f64> = (0..bank.slot_len())
                .map(|p| g.iter().map(|lg| lg.flat()[p]).sum::<f64>() / tasks as f64)
                .collect();
            let shared: Vec<f64> = bank.flatten_slot(0).unwrap().iter().zip(&mean).map(|(w, m)| w - lr * m).collect();
            for j in 0..tasks {
                bank.set_slot(j, &shared).unwrap();
            }
        }
        train_batch(&batch, &mut state, &cfg).map_err(|e| e.to_string())?;
        for (a, b) in state.params.cluster_layers.iter().zip(&reference.cluster_layers) {
            for (x, y) in a.flattened().iter().zip(b.flattened()) {
                for (p, q) in x.iter().zip(&y) {
                    worst = worst.max((p - q).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-10, format!("max slot deviation {worst:.2e} over 100 batches (limit 1e-10)"))
}

fn post_clustering_invariant() -> Outcome {
    let cfg = TrainConfig {
        epochs: 5,
        ..suite(1).train_config()
    };
    let cfg = TrainConfig { batch_size: 32, ..cfg };
    let data = load_run_data::<f64>(&suite(1)).map_err(|e| e.to_string())?;
    let mut state = State::new(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut batches, mut unfrozen, mut worst) = (0, 0, 0.0f64);
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        for coords in epoch_batches(&data.train, cfg.batch_size, Batching::Mixed, &mut rng) {
            let items: Vec<BatchItem<'_, f64>> = coords
                .iter()
                .map(|&(t, i)| BatchItem {
                    features: &data.train[t].examples[i].features,
                    label: data.train[t].examples[i].label,
                    task: t,
                })
                .collect();
            train_batch(&TaskBatch::new(items), &mut state, &cfg).map_err(|e| e.to_string())?;
            batches += 1;
            for (bank, st) in state.params.cluster_layers.iter().zip(&state.cluster_states) {
                unfrozen += usize::from(!st.frozen);
                worst = worst.max(layer_clustering_loss(bank, st).unwrap());
                for a in 0..bank.num_tasks() {
                    for b in a + 1..bank.num_tasks() {
                        if st.assignments[a] == st.assignments[b] && bank.slots[a] != bank.slots[b] {
                            return Err(format!("batch {batches}: tasks {a} and {b} share a cluster but differ"));
                        }
                    }
                }
            }
        }
    }
    ensure(
        worst <= 1e-12 && unfrozen > 0,
        format!("{batches} batches ({unfrozen} unfrozen layer checks), max layer L_c {worst:.2e}, shared slots bitwise equal"),
    )
}

fn freeze_protocol() -> Outcome {
    let base = TrainConfig {
        epochs: 8,
        batch_size: 32,
        ..suite(2).train_config()
    };
    let data = load_run_data::<f64>(&suite(2)).map_err(|e| e.to_string())?;
    let frozen = run_training(&base, &data.train, &data.test).map_err(|f| f.error.to_string())?;
    let tables: Vec<Vec<Vec<usize>>> = frozen
        .history
        .clusters
        .iter()
        .map(|e| e.layers.iter().map(|l| l.assignments.clone()).collect())
        .collect();
    let stable = tables[4..].iter().all(|t| *t == tables[4]);
    let flagged = frozen.history.clusters[4..].iter().all(|e| e.layers.iter().all(|l| l.frozen))
        && frozen.history.clusters[..4].iter().all(|e| e.layers.iter().all(|l| !l.frozen));
    let free_cfg = TrainConfig {
        freeze_after_epochs: None,
        ..base
    };
    let free = run_training(&free_cfg, &data.train, &data.test).map_err(|f| f.error.to_string())?;
    let free_changes = free.history.clusters[4..]
        .windows(2)
        .filter(|w| w[0].layers.iter().zip(&w[1].layers).any(|(a, b)| a.assignments != b.assignments))
        .count();
    ensure(
        stable && flagged,
        format!("epochs 4..8 tables identical: {stable}, frozen flags: {flagged}; unfrozen run changed assignments in {free_changes} of 3 later epochs"),
    )
}

fn compression() -> Outcome {
    let cfg = TrainConfig {
        num_tasks: 14,
        cluster_counts: vec![3, 5, 10],
        ..TrainConfig::default()
    };
    let state = State::new(&cfg).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (bank, &k) in state.params.cluster_layers.iter().zip(&cfg.cluster_counts) {
        let deployed = bank.stored_parameter_count(true).floats;
        let specific = bank.stored_parameter_count(false).floats;
        ok &= deployed * 14 == specific * k && specific == 14 * bank.slot_len();
        parts.push(format!("{deployed}/{specific}"));
    }
    ensure(ok, format!("deployed/specific floats {} = 3/14, 5/14, 10/14", parts.join(", ")))
}

fn cluster_recovery() -> Outcome {
    let (mut probe_aris, mut aris) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        // Generator defaults: 12 tasks, 3 groups, separation 10, no label noise.
        let cfg = RunConfig {
            data: clustershare::run::DataConfig::default(),
            ..suite(seed)
        };
        let groups = generate_synthetic_tasks::<f64>(&cfg.synthetic_spec()).map_err(|e| e.to_string())?.groups;
        let data = load_run_data::<f64>(&cfg).map_err(|e| e.to_string())?;

        let probes: Vec<Vec<f64>> = data
            .train
            .iter()
            .map(|t| {
                let w = linear_probe(t, 300, 0.5, 1e-2).unwrap();
                let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                w.iter().map(|v| v / n).collect()
            })
            .collect();
        let probe_clusters = cluster_tasks(&PointSet::new(probes).unwrap(), 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        probe_aris.push(adjusted_rand_index(&probe_clusters.assignments, &groups).unwrap());

        let out = run_training(&cfg.train_config(), &data.train, &data.test).map_err(|f| f.error.to_string())?;
        aris.push(adjusted_rand_index(&out.state.cluster_states[0].assignments, &groups).unwrap());
    }
    let probe_min = probe_aris.iter().copied().fold(f64::INFINITY, f64::min);
    let med = median(aris.clone());
    ensure(
        probe_min >= 0.95 && med >= 0.9,
        format!("median ARI {med:.3} {aris:.3?} (limit 0.9); linear-probe oracle min ARI {probe_min:.3} (limit 0.95)"),
    )
}

fn trend() -> Outcome {
    let (mut cluster_acc, mut specific_acc, mut wins) = (Vec::new(), Vec::new(), 0);
    for seed in 0..5 {
        let cfg = suite(seed);
        let data = load_run_data::<f64>(&cfg).map_err(|e| e.to_string())?;
        let mut accs = [0.0; 2];
        for (acc, regime) in accs.iter_mut().zip([Regime::Cluster, Regime::Specific]) {
            let tc = TrainConfig {
                regime,
                ..cfg.train_config()
            };
            let out = run_training(&tc, &data.train, &data.test).map_err(|f| f.error.to_string())?;
            *acc = evaluate(&out.state.params, &data.test).unwrap().average.unwrap();
        }
        wins += usize::from(accs[0] > accs[1]);
        cluster_acc.push(accs[0]);
        specific_acc.push(accs[1]);
    }
    let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    let (c, s) = (mean(&cluster_acc), mean(&specific_acc));
    ensure(
        c >= s - 0.5 && wins * 2 > cluster_acc.len(),
        format!("cluster {c:.2}% vs specific {s:.2}%, cluster ahead in {wins}/5 seeds"),
    )
}

fn seeding_law() -> Outcome {
    let points = PointSet::new(vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]]).unwrap();
    let draws = 100_000;
    let mut counts = [0u64; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..draws {
        let seeds = kmeans_pp_seed_from(&points, 2, 0, &mut rng).map_err(|e| e.to_string())?;
        counts[seeds[1]] += 1;
    }
    if counts[0] != 0 {
        return Err(format!("the first center was drawn again {} times", counts[0]));
    }
    let probs = [1.0 / 422.0, 200.0 / 422.0, 221.0 / 422.0];
    let chi2: f64 = counts[1..]
        .iter()
        .zip(probs)
        .map(|(&o, p)| {
            let e = p * draws as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    ensure(p > 0.01, format!("counts {:?}, chi2 {chi2:.3}, p {p:.3} (limit 0.01)", &counts[1..]))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("suite.toml");
    let cfg = RunConfig { epochs: 20, ..suite(3) };
    write_atomic(&config, cfg.to_toml_string().unwrap().as_bytes()).map_err(|e| e.to_string())?;
    let first = cmd_train(&config, &dir.path().join("a"), None).map_err(|e| e.to_string())?;
    let snapshot = first.config;
    let b = cmd_train(&snapshot, &dir.path().join("b"), None).map_err(|e| e.to_string())?;
    let c = cmd_train(&snapshot, &dir.path().join("c"), None).map_err(|e| e.to_string())?;
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    let same = |f: &str| {
        let a = read(&dir.path().join("a").join(f));
        a == read(&b.metrics.with_file_name(f)) && a == read(&c.metrics.with_file_name(f))
    };
    let snapshots = read(&dir.path().join("b").join(CONFIG_FILE)) == read(&snapshot);
    ensure(
        same(METRICS_FILE) && same(CLUSTERS_FILE) && snapshots,
        format!(
            "metrics.csv identical: {}, clusters.json identical: {}, snapshot stable: {snapshots}",
            same(METRICS_FILE),
            same(CLUSTERS_FILE)
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness),
        ("clustering loss oracle", clustering_loss_oracle),
        ("upper regime limit", upper_limit),
        ("lower regime limit", lower_limit),
        ("post-clustering invariant", post_clustering_invariant),
        ("freeze protocol", freeze_protocol),
        ("compression accounting", compression),
        ("cluster recovery", cluster_recovery),
        ("trend vs specific", trend),
        ("k-means++ seeding law", seeding_law),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("criterion {:>2} PASS  {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

