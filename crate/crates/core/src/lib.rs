//! Multi-task learning with cluster layers.
//!
//! A cluster layer holds one set of weights per task. After every training
//! batch the per-task weights of each cluster layer are grouped with
//! k-means++ and every task's weights are overwritten by its cluster's
//! centroid, so tasks in one cluster share a network while different clusters
//! stay specific. The model is `shared trunk -> cluster layers -> per-task
//! softmax heads`, trained on `L = L_p + alpha * L_c` where `L_p` is the mean
//! cross-entropy and `L_c` the squared distance of every slot to its centroid.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which the tolerances in the test suite
//! assume.

pub mod checkpoint;
pub mod cluster_layer;
pub mod clustering;
pub mod datasets;
pub mod error;
pub mod nn;
pub mod optimizer;
pub mod run;
pub mod scalar;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use cluster_layer::{clustering_loss, ClusterDump, ClusterLayerBank, ClusterState, ParameterCount};
pub use clustering::{adjusted_rand_index, cluster_tasks, kmeans_pp_seed, lloyd_iterate, ClusteringResult, PointSet};
pub use error::{Error, Result};
pub use nn::{finite_diff_check, Activation, Architecture, DenseLayer, GradientSet, LossTerms, ModelParams, SlotInit, TaskBatch};
pub use optimizer::{optimizer_step, OptimizerKind, OptimizerState};
pub use run::{cmd_dump_clusters, cmd_eval, cmd_train, RunConfig};
pub use scalar::Scalar;
pub use trainer::{evaluate, freeze_check, run_training, total_loss, train_batch, Regime, TrainConfig, TrainState};

pub type Model = nn::ModelParams<f64>;
pub type Layer = nn::DenseLayer<f64>;
pub type Bank = cluster_layer::ClusterLayerBank<f64>;
pub type Clusters = cluster_layer::ClusterState<f64>;
pub type Gradients = nn::GradientSet<f64>;
pub type Dataset = datasets::TaskDataset<f64>;
pub type Batch<'a> = nn::TaskBatch<'a, f64>;
pub type State = trainer::TrainState<f64>;
pub type Outcome = trainer::TrainOutcome<f64>;
