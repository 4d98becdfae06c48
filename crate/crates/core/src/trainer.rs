//! Training loop: alternating gradient steps and per-batch network clustering.
//!
//! Every batch runs, in order:
//! 1. forward pass and `L = L_p + alpha * L_c`;
//! 2. one optimizer step on trunk, heads and cluster-layer slots;
//! 3. for every cluster layer, k-means++ over the updated slots followed by
//!    centroid replacement (or, once assignments are frozen, centroid
//!    recomputation within the fixed groups).
//!
//! The `specific` regime skips step 3 and the `hard` regime ties every slot of
//! a cluster layer to one shared set of weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_layer::{clustering_loss, ClusterDump, ClusterState};
use crate::clustering::{cluster_tasks, PointSet};
use crate::datasets::TaskDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, classification_loss, Activation, Architecture, BatchItem, LossTerms, ModelParams, SlotInit, TaskBatch};
use crate::optimizer::{optimizer_step, OptimizerKind, OptimizerState};
use crate::scalar::Scalar;

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const CLUSTER_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Per-batch clustering of cluster-layer slots.
    #[default]
    Cluster,
    /// Every cluster layer is one set of weights shared by all tasks.
    Hard,
    /// Every task keeps its own cluster-layer weights; no clustering.
    Specific,
}

/// Loss whose gradient drives the cluster-layer slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterGrad {
    /// `L_p + alpha * L_c`.
    #[default]
    Full,
    /// `L_p` only.
    LpOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Shuffle the pooled examples of all tasks and cut consecutive batches.
    #[default]
    Mixed,
    /// One task per batch, cycling through the tasks.
    RoundRobin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub input_dim: usize,
    pub trunk_dims: Vec<usize>,
    pub cluster_hidden_dims: Vec<usize>,
    pub cluster_counts: Vec<usize>,
    pub num_tasks: usize,
    pub num_classes: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// `None` never freezes.
    pub freeze_after_epochs: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub regime: Regime,
    pub cluster_grad: ClusterGrad,
    pub batching: Batching,
    pub hidden_activation: Activation,
    pub slot_init: SlotInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            trunk_dims: vec![32],
            cluster_hidden_dims: vec![32, 32, 16],
            cluster_counts: vec![3, 5, 10],
            num_tasks: 14,
            num_classes: 2,
            alpha: 0.1,
            learning_rate: 1e-5,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            freeze_after_epochs: Some(4),
            epochs: 10,
            seed: 0,
            regime: Regime::Cluster,
            cluster_grad: ClusterGrad::Full,
            batching: Batching::Mixed,
            hidden_activation: Activation::Tanh,
            slot_init: SlotInit::Shared,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            trunk_dims: self.trunk_dims.clone(),
            cluster_dims: self.cluster_hidden_dims.clone(),
            cluster_counts: self.cluster_counts.clone(),
            num_tasks: self.num_tasks,
            num_classes: self.num_classes,
            hidden_activation: self.hidden_activation,
        }
    }

    /// Reports every invalid field at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.input_dim == 0 {
            bad.push("input_dim: must be positive".to_string());
        }
        if self.num_tasks == 0 {
            bad.push("num_tasks: must be positive".to_string());
        }
        if self.num_classes < 2 {
            bad.push("num_classes: must be at least 2".to_string());
        }
        if self.trunk_dims.contains(&0) {
            bad.push("trunk_dims: dimensions must be positive".to_string());
        }
        if self.cluster_hidden_dims.contains(&0) {
            bad.push("cluster_hidden_dims: dimensions must be positive".to_string());
        }
        if self.cluster_counts.len() != self.cluster_hidden_dims.len() {
            bad.push(format!(
                "cluster_counts: has {} entries but cluster_hidden_dims has {}",
                self.cluster_counts.len(),
                self.cluster_hidden_dims.len()
            ));
        }
        if let Some(k) = self.cluster_counts.iter().find(|&&k| k == 0 || k > self.num_tasks) {
            bad.push(format!("cluster_counts: {k} outside [1, {}] (number of tasks)", self.num_tasks));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bad.push("alpha: must be finite and non-negative".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate: must be finite and positive".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size: must be positive".to_string());
        }
        if self.hidden_activation == Activation::Softmax {
            bad.push("hidden_activation: softmax is only used by the heads".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// `L = L_p + alpha * L_c`.
pub fn total_loss<T: Scalar>(lp: T, lc: T, alpha: T) -> T {
    lp + alpha * lc
}

/// Whether cluster assignments are frozen during `epoch` (zero-based).
pub fn freeze_check(epoch: usize, config: &TrainConfig) -> bool {
    config.freeze_after_epochs.is_some_and(|f| epoch >= f)
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub cluster_states: Vec<ClusterState<T>>,
    pub optimizer: OptimizerState<T>,
    pub epoch: usize,
    pub batch: usize,
    cluster_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh model from `config.seed`. In the cluster regime the initial
    /// slots are clustered once before any batch.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::initialize(&config.architecture(), config.slot_init, &mut config.rng(INIT_STREAM))?;
        Self::from_params(params, config)
    }

    /// Starts training from existing parameters.
    pub fn from_params(mut params: ModelParams<T>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if params.num_tasks() != config.num_tasks {
            return Err(Error::dim("model tasks", config.num_tasks, params.num_tasks()));
        }
        let mut cluster_rng = config.rng(CLUSTER_STREAM);
        let cluster_states = initial_states(&mut params, config.regime, &mut cluster_rng)?;
        Ok(Self {
            optimizer: OptimizerState::new(config.optimizer, &params),
            params,
            cluster_states,
            epoch: 0,
            batch: 0,
            cluster_rng,
            batch_rng: config.rng(BATCH_STREAM),
        })
    }

    pub fn cluster_dumps(&self) -> Vec<ClusterDump> {
        self.cluster_states.iter().enumerate().map(|(i, s)| s.dump(i)).collect()
    }

    /// Current `L_c`.
    pub fn clustering_loss(&self) -> Result<T> {
        clustering_loss(&self.params.cluster_layers, &self.cluster_states)
    }
}

fn initial_states<T: Scalar>(
    params: &mut ModelParams<T>,
    regime: Regime,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClusterState<T>>> {
    let mut states = Vec::with_capacity(params.cluster_layers.len());
    for bank in &mut params.cluster_layers {
        let state = match regime {
            Regime::Cluster => {
                let points = PointSet::new(bank.flattened())?;
                let state = ClusterState::from_clustering(cluster_tasks(&points, bank.cluster_count, rng)?);
                bank.replace_with_centroids(&state)?;
                state
            }
            Regime::Hard => {
                let state = ClusterState::from_assignments(bank, vec![0; bank.num_tasks()], 1)?;
                bank.replace_with_centroids(&state)?;
                state
            }
            Regime::Specific => ClusterState::singletons(bank),
        };
        states.push(state);
    }
    Ok(states)
}

/// Loss components logged for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub loss_lp: f64,
    pub loss_lc: f64,
}

/// One gradient step plus the clustering step of its regime.
pub fn train_batch<T: Scalar>(batch: &TaskBatch<'_, T>, state: &mut TrainState<T>, config: &TrainConfig) -> Result<BatchRecord> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let alpha = T::lit(config.alpha);
    let tape = state.params.forward_batch(batch)?;
    let lp = tape.classification_loss();
    let lc = state.clustering_loss()?;
    let loss = total_loss(lp, lc, alpha);
    if !loss.is_finite() {
        return Err(Error::Diverged { tensor: "loss".into() });
    }

    // L_c only reaches cluster-layer slots, so one backward pass covers both
    // the trunk/head update and the slot update.
    let terms = match config.cluster_grad {
        ClusterGrad::Full => LossTerms::full(alpha),
        ClusterGrad::LpOnly => LossTerms::classification_only(),
    };
    let mut grads = state.params.backward(&tape, &state.cluster_states, terms)?;
    if config.regime == Regime::Hard {
        for layer in &mut grads.banks {
            let mut shared = layer[0].clone();
            for g in &layer[1..] {
                shared.weights.iter_mut().zip(&g.weights).for_each(|(s, &v)| *s += v);
                shared.bias.iter_mut().zip(&g.bias).for_each(|(s, &v)| *s += v);
            }
            layer.iter_mut().for_each(|g| *g = shared.clone());
        }
    }
    if let Some(i) = grads.first_non_finite() {
        return Err(Error::Diverged {
            tensor: format!("gradient of {}", state.params.tensor_names()[i]),
        });
    }
    optimizer_step(
        &mut state.params,
        &grads,
        &mut state.optimizer,
        config.optimizer,
        T::lit(config.learning_rate),
    )?;

    let frozen = freeze_check(state.epoch, config);
    for (bank, cs) in state.params.cluster_layers.iter_mut().zip(state.cluster_states.iter_mut()) {
        match config.regime {
            Regime::Cluster if frozen => {
                cs.frozen = true;
                cs.recompute_centroids(bank)?;
                bank.replace_with_centroids(cs)?;
            }
            Regime::Cluster => {
                let points = PointSet::new(bank.flattened())?;
                *cs = ClusterState::from_clustering(cluster_tasks(&points, bank.cluster_count, &mut state.cluster_rng)?);
                bank.replace_with_centroids(cs)?;
            }
            Regime::Hard => {
                cs.recompute_centroids(bank)?;
                bank.replace_with_centroids(cs)?;
            }
            Regime::Specific => *cs = ClusterState::singletons(bank),
        }
    }

    let record = BatchRecord {
        epoch: state.epoch,
        batch: state.batch,
        loss: loss.as_f64(),
        loss_lp: lp.as_f64(),
        loss_lc: lc.as_f64(),
    };
    state.batch += 1;
    Ok(record)
}

/// Example coordinates `(task, index)` of every batch of one epoch.
pub fn epoch_batches<T, R: rand::Rng + ?Sized>(
    datasets: &[TaskDataset<T>],
    batch_size: usize,
    batching: Batching,
    rng: &mut R,
) -> Vec<Vec<(usize, usize)>> {
    match batching {
        Batching::Mixed => {
            let mut pool: Vec<(usize, usize)> = datasets
                .iter()
                .enumerate()
                .flat_map(|(t, d)| (0..d.examples.len()).map(move |i| (t, i)))
                .collect();
            pool.shuffle(rng);
            pool.chunks(batch_size).map(<[_]>::to_vec).collect()
        }
        Batching::RoundRobin => {
            let per_task: Vec<Vec<Vec<(usize, usize)>>> = datasets
                .iter()
                .enumerate()
                .map(|(t, d)| {
                    let mut idx: Vec<(usize, usize)> = (0..d.examples.len()).map(|i| (t, i)).collect();
                    idx.shuffle(rng);
                    idx.chunks(batch_size).map(<[_]>::to_vec).collect()
                })
                .collect();
            let rounds = per_task.iter().map(Vec::len).max().unwrap_or(0);
            (0..rounds)
                .flat_map(|r| per_task.iter().filter_map(move |b| b.get(r).cloned()))
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One `(epoch, task, split)` row of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub task_id: usize,
    pub split: Split,
    pub accuracy: f64,
    /// Mean cross-entropy over the task's examples in this split.
    pub loss_lp: f64,
    /// Mean `L_c` over the epoch's batches.
    pub loss_lc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochClusters {
    pub epoch: usize,
    pub layers: Vec<ClusterDump>,
}

/// Everything logged during a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub metrics: Vec<MetricRow>,
    pub batches: Vec<BatchRecord>,
    pub clusters: Vec<EpochClusters>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub history: History,
}

/// A run that stopped early; `history` covers the completed work.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub history: Box<History>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            history: Box::default(),
        }
    }
}

/// Accuracy and mean cross-entropy of one task's examples.
pub fn task_performance<T: Scalar>(params: &ModelParams<T>, dataset: &TaskDataset<T>, task: usize) -> Result<Option<(f64, f64)>> {
    if dataset.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    let mut probs = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for e in &dataset.examples {
        let p = params.forward(&e.features, task)?;
        if argmax(&p) == e.label {
            correct += 1;
        }
        probs.push(p);
        labels.push(e.label);
    }
    let lp = classification_loss(&probs, &labels)?;
    Ok(Some((correct as f64 / dataset.len() as f64, lp.as_f64())))
}

fn check_datasets<T: Scalar>(config: &TrainConfig, sets: &[TaskDataset<T>], what: &str) -> Result<()> {
    if sets.len() != config.num_tasks {
        return Err(Error::dim(format!("{what} datasets"), config.num_tasks, sets.len()));
    }
    for d in sets {
        d.validate()?;
        if let Some(dim) = d.dim() {
            if dim != config.input_dim {
                return Err(Error::dim(format!("{what} features of task {}", d.task_id), config.input_dim, dim));
            }
        }
        if d.num_classes > config.num_classes {
            return Err(Error::dim(format!("{what} classes of task {}", d.task_id), config.num_classes, d.num_classes));
        }
    }
    Ok(())
}

/// Runs `config.epochs` epochs from a fresh model.
pub fn run_training<T: Scalar>(
    config: &TrainConfig,
    train_sets: &[TaskDataset<T>],
    test_sets: &[TaskDataset<T>],
) -> std::result::Result<TrainOutcome<T>, TrainFailure> {
    config.validate()?;
    check_datasets(config, train_sets, "train")?;
    check_datasets(config, test_sets, "test")?;
    let state = TrainState::new(config)?;
    continue_training(state, config, train_sets, test_sets)
}

/// Runs the remaining epochs of `state` up to `config.epochs`.
pub fn continue_training<T: Scalar>(
    mut state: TrainState<T>,
    config: &TrainConfig,
    train_sets: &[TaskDataset<T>],
    test_sets: &[TaskDataset<T>],
) -> std::result::Result<TrainOutcome<T>, TrainFailure> {
    let mut history = History::default();
    while state.epoch < config.epochs {
        if let Err(error) = run_epoch(&mut state, config, train_sets, test_sets, &mut history) {
            return Err(TrainFailure { error, history: Box::new(history) });
        }
    }
    Ok(TrainOutcome { state, history })
}

fn run_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    train_sets: &[TaskDataset<T>],
    test_sets: &[TaskDataset<T>],
    history: &mut History,
) -> Result<()> {
    let plan = epoch_batches(train_sets, config.batch_size, config.batching, &mut state.batch_rng);
    let mut lc_sum = 0.0;
    for coords in &plan {
        let items = coords
            .iter()
            .map(|&(t, i)| {
                let e = &train_sets[t].examples[i];
                BatchItem {
                    features: e.features.as_slice(),
                    label: e.label,
                    task: t,
                }
            })
            .collect();
        let record = train_batch(&TaskBatch::new(items), state, config)?;
        lc_sum += record.loss_lc;
        history.batches.push(record);
    }
    let loss_lc = if plan.is_empty() { 0.0 } else { lc_sum / plan.len() as f64 };
    for task in 0..config.num_tasks {
        for (split, sets) in [(Split::Train, train_sets), (Split::Test, test_sets)] {
            if let Some((accuracy, loss_lp)) = task_performance(&state.params, &sets[task], task)? {
                history.metrics.push(MetricRow {
                    epoch: state.epoch,
                    task_id: task,
                    split,
                    accuracy,
                    loss_lp,
                    loss_lc,
                });
            }
        }
    }
    history.clusters.push(EpochClusters {
        epoch: state.epoch,
        layers: state.cluster_dumps(),
    });
    state.epoch += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub task_id: usize,
    pub name: String,
    pub examples: usize,
    /// `None` when the task has no test examples.
    pub accuracy: Option<f64>,
}

/// Per-task accuracy with a macro-averaged `AVG` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    pub average: Option<f64>,
}

impl AccuracyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,task,examples,accuracy\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.task_id, r.name, r.examples, acc));
        }
        let avg = self.average.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(",AVG,{},{}\n", self.rows.iter().map(|r| r.examples).sum::<usize>(), avg));
        out
    }
}

impl std::fmt::Display for AccuracyTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        writeln!(f, "{:<width$}  {:>8}", "Datasets", "Accuracy")?;
        let pct = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>8}", r.name, pct(r.accuracy))?;
        }
        writeln!(f, "{:<width$}  {:>8}", "AVG", pct(self.average))
    }
}

/// Argmax accuracy per task; `AVG` is the mean over tasks with test data.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, test_sets: &[TaskDataset<T>]) -> Result<AccuracyTable> {
    if test_sets.len() != params.num_tasks() {
        return Err(Error::dim("test datasets", params.num_tasks(), test_sets.len()));
    }
    let mut rows = Vec::with_capacity(test_sets.len());
    for (task, ds) in test_sets.iter().enumerate() {
        let accuracy = task_performance(params, ds, task)?.map(|(a, _)| a);
        rows.push(AccuracyRow {
            task_id: task,
            name: ds.name.clone(),
            examples: ds.len(),
            accuracy,
        });
    }
    let present: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
    let average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(AccuracyTable { rows, average })
}
