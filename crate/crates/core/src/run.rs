//! Run configuration files and the `train`, `eval` and `dump-clusters` commands.
//!
//! A run config is a flat TOML file. Every key is optional and falls back to
//! the default shown by [`RunConfig::default`]; unknown keys are rejected.
//!
//! ```toml
//! input_dim = 16
//! trunk_dims = [32]
//! cluster_hidden_dims = [32, 32, 16]
//! cluster_counts = [3, 5, 10]
//! num_tasks = 12
//! num_classes = 2
//! alpha = 0.1
//! learning_rate = 1e-5
//! optimizer = "adam"            # or "sgd"
//! batch_size = 32
//! freeze_after_epochs = 4       # or "never"
//! epochs = 10
//! seed = 0
//! regime = "cluster"            # "hard", "specific"
//! cluster_grad = "full"         # "lp_only"
//! batching = "mixed"            # "round_robin"
//! hidden_activation = "tanh"    # "relu", "identity"
//! slot_init = "shared"          # "independent"
//!
//! [data]
//! source = "synthetic"          # or "text"
//! fold = 0                      # held-out fold in 0..10
//! split_seed = 0                # defaults to the run seed
//! # synthetic only
//! num_groups = 3
//! examples_per_task = 200
//! group_separation = 10.0
//! within_group_noise = 1.0
//! label_noise_rate = 0.0
//! seed = 0                      # defaults to the run seed
//! # text only: one "<label>\t<text>" file per task
//! dir = "data/reviews"
//! vocab_size = 2000             # must equal input_dim
//! ```

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::datasets::{
    featurize_documents, generate_synthetic_tasks, read_documents, split_ten_fold, task_files, ten_fold_indices,
    SyntheticSpec, TaskDataset, Vocabulary, DEFAULT_VOCAB_SIZE, NUM_FOLDS,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, SlotInit};
use crate::optimizer::OptimizerKind;
use crate::trainer::{
    evaluate, run_training, AccuracyTable, Batching, ClusterGrad, EpochClusters, History, Regime, TrainConfig,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_HEADER: &str = "epoch,task_id,split,accuracy,loss_lp,loss_lc";

/// Freeze schedule as written in a config file: an epoch count or `"never"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Freeze {
    After(usize),
    Never,
}

impl From<Freeze> for Option<usize> {
    fn from(f: Freeze) -> Self {
        match f {
            Freeze::After(n) => Some(n),
            Freeze::Never => None,
        }
    }
}

impl Serialize for Freeze {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Freeze::After(n) => s.serialize_u64(*n as u64),
            Freeze::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for Freeze {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Freeze;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative epoch count or \"never\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Freeze, E> {
                usize::try_from(v).map(Freeze::After).map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Freeze, E> {
                usize::try_from(v)
                    .map(Freeze::After)
                    .map_err(|_| E::custom("freeze_after_epochs must be non-negative"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Freeze, E> {
                if v == "never" {
                    Ok(Freeze::Never)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub fold: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    pub num_groups: usize,
    pub examples_per_task: usize,
    pub group_separation: f64,
    pub within_group_noise: f64,
    pub label_noise_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        Self {
            source: DataSource::Synthetic,
            fold: 0,
            split_seed: None,
            num_groups: syn.num_groups,
            examples_per_task: syn.examples_per_task,
            group_separation: syn.group_separation,
            within_group_noise: syn.within_group_noise,
            label_noise_rate: syn.label_noise_rate,
            seed: None,
            dir: None,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

/// Everything needed to reproduce a run: model, optimizer, schedule and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
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
    pub freeze_after_epochs: Freeze,
    pub epochs: usize,
    pub seed: u64,
    pub regime: Regime,
    pub cluster_grad: ClusterGrad,
    pub batching: Batching,
    pub hidden_activation: Activation,
    pub slot_init: SlotInit,
    pub data: DataConfig,
}

impl Default for RunConfig {
    /// Trainer defaults on 12 synthetic tasks.
    fn default() -> Self {
        let mut cfg = Self::from_train_config(&TrainConfig::default(), DataConfig::default());
        cfg.num_tasks = SyntheticSpec::default().num_tasks;
        cfg
    }
}

impl RunConfig {
    pub fn from_train_config(t: &TrainConfig, data: DataConfig) -> Self {
        Self {
            input_dim: t.input_dim,
            trunk_dims: t.trunk_dims.clone(),
            cluster_hidden_dims: t.cluster_hidden_dims.clone(),
            cluster_counts: t.cluster_counts.clone(),
            num_tasks: t.num_tasks,
            num_classes: t.num_classes,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            freeze_after_epochs: t.freeze_after_epochs.map_or(Freeze::Never, Freeze::After),
            epochs: t.epochs,
            seed: t.seed,
            regime: t.regime,
            cluster_grad: t.cluster_grad,
            batching: t.batching,
            hidden_activation: t.hidden_activation,
            slot_init: t.slot_init,
            data,
        }
    }

    /// The synthetic benchmark used for the recovery and trend checks:
    /// 12 tasks in 3 groups with 10% label noise, trained with large
    /// mixed batches and Adam at `1e-3` for 60 epochs.
    pub fn synthetic_suite() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1000,
            epochs: 60,
            data: DataConfig {
                label_noise_rate: 0.1,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            input_dim: self.input_dim,
            trunk_dims: self.trunk_dims.clone(),
            cluster_hidden_dims: self.cluster_hidden_dims.clone(),
            cluster_counts: self.cluster_counts.clone(),
            num_tasks: self.num_tasks,
            num_classes: self.num_classes,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            freeze_after_epochs: self.freeze_after_epochs.into(),
            epochs: self.epochs,
            seed: self.seed,
            regime: self.regime,
            cluster_grad: self.cluster_grad,
            batching: self.batching,
            hidden_activation: self.hidden_activation,
            slot_init: self.slot_init,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_tasks: self.num_tasks,
            num_groups: self.data.num_groups,
            input_dim: self.input_dim,
            examples_per_task: self.data.examples_per_task,
            group_separation: self.data.group_separation,
            within_group_noise: self.data.within_group_noise,
            label_noise_rate: self.data.label_noise_rate,
            seed: self.data_seed(),
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        self.data.split_seed.unwrap_or(self.seed)
    }

    /// Copy with every seed written out, so the snapshot does not depend on defaults.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.data.seed = Some(self.data_seed());
        out.data.split_seed = Some(self.split_seed());
        out
    }

    /// Reports every invalid field, trainer and data alike.
    pub fn validate(&self) -> Result<()> {
        let mut bad = match self.train_config().validate() {
            Err(Error::InvalidConfig(v)) => v,
            Err(e) => return Err(e),
            Ok(()) => Vec::new(),
        };
        if self.data.fold >= NUM_FOLDS {
            bad.push(format!("data.fold: {} outside [0, {NUM_FOLDS})", self.data.fold));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.dir.is_some() {
                    bad.push("data.dir: only used when data.source = \"text\"".to_string());
                }
                if self.num_classes != 2 {
                    bad.push("num_classes: synthetic tasks are binary, must be 2".to_string());
                }
                if self.data.examples_per_task < NUM_FOLDS {
                    bad.push(format!("data.examples_per_task: need at least {NUM_FOLDS} for ten folds"));
                }
                if self.num_tasks > 0 && self.input_dim > 0 {
                    if let Err(Error::InvalidConfig(v)) = self.synthetic_spec().validate() {
                        bad.extend(v.into_iter().filter(|m| !m.starts_with("data.num_tasks") && !m.starts_with("data.input_dim")));
                    }
                }
            }
            DataSource::Text => {
                if self.data.dir.is_none() {
                    bad.push("data.dir: required when data.source = \"text\"".to_string());
                }
                if self.data.vocab_size == 0 {
                    bad.push("data.vocab_size: must be positive".to_string());
                } else if self.data.vocab_size != self.input_dim {
                    bad.push(format!(
                        "input_dim: is {} but text features have data.vocab_size = {} entries",
                        self.input_dim, self.data.vocab_size
                    ));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Parses a config file; a relative `data.dir` is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Toml(m) => Error::Toml(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = &cfg.data.dir {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.data.dir = Some(base.join(dir));
            }
        }
        Ok(cfg)
    }
}

/// Train and test folds of every task, in task order.
#[derive(Clone, Debug)]
pub struct RunData<T> {
    pub train: Vec<TaskDataset<T>>,
    pub test: Vec<TaskDataset<T>>,
    /// Per-task vocabularies (text data only).
    pub vocabularies: Vec<Vec<String>>,
}

impl<T> RunData<T> {
    pub fn task_names(&self) -> Vec<String> {
        self.train.iter().map(|d| d.name.clone()).collect()
    }
}

/// Builds the configured tasks and splits off `data.fold` as the test part.
///
/// Text vocabularies are built from the training part of each task only.
pub fn load_run_data<T: crate::Scalar>(cfg: &RunConfig) -> Result<RunData<T>> {
    cfg.validate()?;
    let (fold, split_seed) = (cfg.data.fold, cfg.split_seed());
    match cfg.data.source {
        DataSource::Synthetic => {
            let syn = generate_synthetic_tasks::<T>(&cfg.synthetic_spec())?;
            let (train, test) = syn
                .tasks
                .iter()
                .map(|t| split_ten_fold(t, fold, split_seed))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            Ok(RunData {
                train,
                test,
                vocabularies: Vec::new(),
            })
        }
        DataSource::Text => {
            let dir = cfg.data.dir.as_deref().expect("validated");
            let files = task_files(dir)?;
            if files.len() != cfg.num_tasks {
                return Err(Error::InvalidConfig(vec![format!(
                    "num_tasks: is {} but {} has {} task files",
                    cfg.num_tasks,
                    dir.display(),
                    files.len()
                )]));
            }
            let dim = cfg.data.vocab_size;
            let mut data = RunData {
                train: Vec::new(),
                test: Vec::new(),
                vocabularies: Vec::new(),
            };
            for (id, (name, path)) in files.iter().enumerate() {
                let docs = read_documents(path)?;
                let (tr, te) = ten_fold_indices(docs.len(), fold, split_seed)
                    .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
                let pick = |idx: &[usize]| idx.iter().map(|&i| docs[i].clone()).collect::<Vec<_>>();
                let (tr_docs, te_docs) = (pick(&tr), pick(&te));
                let vocab = Vocabulary::build(&tr_docs, dim);
                data.train.push(featurize_documents(id, name, &tr_docs, &vocab, dim));
                data.test.push(featurize_documents(id, name, &te_docs, &vocab, dim));
                data.vocabularies.push(vocab.tokens().to_vec());
            }
            Ok(data)
        }
    }
}

/// `metrics.csv` content for a training history.
pub fn metrics_csv(history: &History) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in &history.metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.task_id,
            r.split.as_str(),
            r.accuracy,
            r.loss_lp,
            r.loss_lc
        );
    }
    out
}

#[derive(Serialize, Deserialize)]
pub struct ClustersFile {
    pub tasks: Vec<String>,
    pub epochs: Vec<EpochClusters>,
}

pub fn clusters_json(task_names: &[String], history: &History) -> Result<String> {
    let file = ClustersFile {
        tasks: task_names.to_vec(),
        epochs: history.clusters.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

/// Paths written by [`cmd_train`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub clusters: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains from a config file and writes the run directory.
///
/// On divergence the config snapshot, metrics and clusters of the completed
/// epochs are still written, then [`Error::Diverged`] is returned.
pub fn cmd_train(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<RunArtifacts> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = &cfg.data.dir {
        cfg.data.dir = Some(std::fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?);
    }
    train_run(&cfg.resolved(), out_dir)
}

/// [`cmd_train`] for an already loaded config.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = load_run_data::<f64>(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = RunArtifacts {
        config: out_dir.join(CONFIG_FILE),
        metrics: out_dir.join(METRICS_FILE),
        clusters: out_dir.join(CLUSTERS_FILE),
        checkpoint: out_dir.join(CHECKPOINT_FILE),
    };
    write_atomic(&paths.config, cfg.to_toml_string()?.as_bytes())?;
    let train_cfg = cfg.train_config();
    let names = data.task_names();
    let (outcome, history) = match run_training(&train_cfg, &data.train, &data.test) {
        Ok(o) => {
            let history = o.history.clone();
            (Ok(o.state), history)
        }
        Err(f) => (Err(f.error), *f.history),
    };
    write_atomic(&paths.metrics, metrics_csv(&history).as_bytes())?;
    write_atomic(&paths.clusters, clusters_json(&names, &history)?.as_bytes())?;
    let state = outcome?;
    Checkpoint {
        config: train_cfg,
        task_names: names,
        vocabularies: data.vocabularies,
        params: state.params,
        cluster_states: state.cluster_states,
    }
    .save(&paths.checkpoint)?;
    Ok(paths)
}

/// Test sets for evaluating `ck` from `data`.
///
/// `data` is either a run config file, whose held-out folds are rebuilt, or a
/// directory of `<task>.txt` files, every document of which is evaluated with
/// the vocabulary stored for that task. Tasks without a file get an empty set.
pub fn eval_datasets(ck: &Checkpoint, data: &Path) -> Result<Vec<TaskDataset<f64>>> {
    let n = ck.config.num_tasks;
    if data.is_dir() {
        if ck.vocabularies.len() != n {
            return Err(Error::Checkpoint("checkpoint has no text vocabularies".into()));
        }
        let mut sets: Vec<TaskDataset<f64>> = ck
            .task_names
            .iter()
            .enumerate()
            .map(|(id, name)| TaskDataset {
                task_id: id,
                name: name.clone(),
                examples: Vec::new(),
                num_classes: ck.config.num_classes,
            })
            .collect();
        for (name, path) in task_files(data)? {
            let id = ck
                .task_names
                .iter()
                .position(|t| *t == name)
                .ok_or_else(|| Error::Argument(format!("{}: no task named {name} in the checkpoint", path.display())))?;
            let vocab = Vocabulary::from_tokens(ck.vocabularies[id].clone());
            let docs = read_documents(&path)?;
            sets[id].examples = featurize_documents::<f64>(id, &name, &docs, &vocab, ck.config.input_dim).examples;
        }
        return Ok(sets);
    }
    let cfg = RunConfig::load(data)?;
    let test = load_run_data::<f64>(&cfg)?.test;
    if cfg.num_tasks != n || cfg.input_dim != ck.config.input_dim {
        return Err(Error::Checkpoint(format!(
            "data has {} tasks of dimension {}, checkpoint expects {n} of dimension {}",
            cfg.num_tasks, cfg.input_dim, ck.config.input_dim
        )));
    }
    Ok(test)
}

/// Evaluates a checkpoint; returns the table, written as CSV to `csv_out` when given.
pub fn cmd_eval(checkpoint: &Path, data: &Path, csv_out: Option<&Path>) -> Result<AccuracyTable> {
    let ck = Checkpoint::load(checkpoint)?;
    let sets = eval_datasets(&ck, data)?;
    let table = evaluate(&ck.params, &sets)?;
    if let Some(path) = csv_out {
        write_atomic(path, table.to_csv().as_bytes())?;
    }
    Ok(table)
}

/// Cluster membership of every cluster layer as task-name groups.
pub fn cluster_report(ck: &Checkpoint) -> String {
    let mut out = String::new();
    for (i, state) in ck.cluster_states.iter().enumerate() {
        let _ = writeln!(
            out,
            "layer {i} (K={}{})",
            state.cluster_count(),
            if state.frozen { ", frozen" } else { "" }
        );
        for k in 0..state.cluster_count() {
            let members: Vec<&str> = state
                .assignments
                .iter()
                .enumerate()
                .filter(|&(_, &a)| a == k)
                .map(|(t, _)| ck.task_names[t].as_str())
                .collect();
            if !members.is_empty() {
                let _ = writeln!(out, "  cluster {k}: {{{}}}", members.join(", "));
            }
        }
    }
    out
}

pub fn cmd_dump_clusters(checkpoint: &Path) -> Result<String> {
    Ok(cluster_report(&Checkpoint::load(checkpoint)?))
}
