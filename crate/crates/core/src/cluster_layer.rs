//! Cluster layers: per-task slots that are periodically replaced by the
//! centroid of the cluster their task belongs to.
//!
//! A slot is flattened as its weight matrix in row-major order followed by its
//! bias. Distances between slots, centroids and the clustering loss
//! `L_c = sum_i sum_j ||w'_ij - c_i,r(j)||^2` are all taken over that vector.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusteringResult;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, LayerGrad};
use crate::scalar::{norm, squared_distance, Scalar};

/// One cluster layer: `N` identically shaped task slots and a cluster count `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLayerBank<T> {
    pub layer_index: usize,
    pub slots: Vec<DenseLayer<T>>,
    pub cluster_count: usize,
}

/// Hard cluster membership and centroids for one cluster layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState<T> {
    /// `assignments[j]` is the cluster of task `j`.
    pub assignments: Vec<usize>,
    /// Flattened centroid of every cluster.
    pub centroids: Vec<Vec<T>>,
    pub frozen: bool,
}

/// Stored size of a cluster layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub floats: usize,
    pub assignment_entries: usize,
}

/// Per-layer cluster summary written to `clusters.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDump {
    pub layer: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroid_norms: Vec<f64>,
    pub frozen: bool,
}

impl<T: Scalar> ClusterLayerBank<T> {
    pub fn new(layer_index: usize, slots: Vec<DenseLayer<T>>, cluster_count: usize) -> Result<Self> {
        let first = slots
            .first()
            .ok_or_else(|| Error::Argument("cluster layer needs at least one slot".into()))?;
        if slots
            .iter()
            .any(|s| s.in_dim != first.in_dim || s.out_dim != first.out_dim || !s.is_consistent())
        {
            return Err(Error::Argument(format!("cluster layer {layer_index} has unequal slot shapes")));
        }
        if cluster_count == 0 || cluster_count > slots.len() {
            return Err(Error::Argument(format!(
                "cluster count {cluster_count} outside [1, {}]",
                slots.len()
            )));
        }
        Ok(Self {
            layer_index,
            slots,
            cluster_count,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.slots.len()
    }

    pub fn in_dim(&self) -> usize {
        self.slots[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.slots[0].out_dim
    }

    pub fn activation(&self) -> Activation {
        self.slots[0].activation
    }

    /// Number of scalars in one slot.
    pub fn slot_len(&self) -> usize {
        self.slots[0].param_count()
    }

    /// Task `task`'s slot as one vector: weights row-major, then bias.
    pub fn flatten_slot(&self, task: usize) -> Result<Vec<T>> {
        let slot = self.slots.get(task).ok_or(Error::UnknownTask {
            task,
            num_tasks: self.num_tasks(),
        })?;
        Ok(slot.weights.iter().chain(&slot.bias).copied().collect())
    }

    /// Inverse of [`flatten_slot`](Self::flatten_slot).
    pub fn set_slot(&mut self, task: usize, flat: &[T]) -> Result<()> {
        let len = self.slot_len();
        if flat.len() != len {
            return Err(Error::dim("flattened slot", len, flat.len()));
        }
        let num_tasks = self.num_tasks();
        let slot = self
            .slots
            .get_mut(task)
            .ok_or(Error::UnknownTask { task, num_tasks })?;
        let (w, b) = flat.split_at(slot.weights.len());
        slot.weights.copy_from_slice(w);
        slot.bias.copy_from_slice(b);
        Ok(())
    }

    /// Every slot flattened, indexed by task.
    pub fn flattened(&self) -> Vec<Vec<T>> {
        (0..self.num_tasks())
            .map(|j| self.flatten_slot(j).expect("task in range"))
            .collect()
    }

    /// Overwrites every slot with the centroid of its task's cluster.
    pub fn replace_with_centroids(&mut self, state: &ClusterState<T>) -> Result<()> {
        state.check_against(self)?;
        for (task, &k) in state.assignments.iter().enumerate() {
            self.set_slot(task, &state.centroids[k])?;
        }
        Ok(())
    }

    /// Floats (and assignment entries) this layer needs to store.
    ///
    /// Deployed layers keep only the `K` centroids and the task-to-cluster
    /// table; during training all `N` slots are held.
    pub fn stored_parameter_count(&self, deployed: bool) -> ParameterCount {
        if deployed {
            ParameterCount {
                floats: self.cluster_count * self.slot_len(),
                assignment_entries: self.num_tasks(),
            }
        } else {
            ParameterCount {
                floats: self.num_tasks() * self.slot_len(),
                assignment_entries: 0,
            }
        }
    }
}

impl<T: Scalar> ClusterState<T> {
    /// Every task in its own cluster, centroids equal to the current slots.
    pub fn singletons(bank: &ClusterLayerBank<T>) -> Self {
        Self {
            assignments: (0..bank.num_tasks()).collect(),
            centroids: bank.flattened(),
            frozen: false,
        }
    }

    pub fn from_clustering(result: ClusteringResult<T>) -> Self {
        Self {
            assignments: result.assignments,
            centroids: result.centers,
            frozen: false,
        }
    }

    /// Builds a state from fixed assignments, with centroids as slot means.
    pub fn from_assignments(bank: &ClusterLayerBank<T>, assignments: Vec<usize>, k: usize) -> Result<Self> {
        let mut state = Self {
            assignments,
            centroids: vec![vec![T::zero(); bank.slot_len()]; k],
            frozen: false,
        };
        state.recompute_centroids(bank)?;
        Ok(state)
    }

    pub fn cluster_count(&self) -> usize {
        self.centroids.len()
    }

    fn check_against(&self, bank: &ClusterLayerBank<T>) -> Result<()> {
        if self.assignments.len() != bank.num_tasks() {
            return Err(Error::dim("cluster assignments", bank.num_tasks(), self.assignments.len()));
        }
        if let Some(&bad) = self.assignments.iter().find(|&&k| k >= self.centroids.len()) {
            return Err(Error::Argument(format!(
                "assignment to cluster {bad} but only {} centroids",
                self.centroids.len()
            )));
        }
        let len = bank.slot_len();
        if let Some(c) = self.centroids.iter().find(|c| c.len() != len) {
            return Err(Error::dim("centroid", len, c.len()));
        }
        Ok(())
    }

    /// Sets each centroid to the mean of its members' slots. Clusters with no
    /// members keep their previous centroid.
    ///
    /// A single-member cluster gets a bitwise copy of its member.
    pub fn recompute_centroids(&mut self, bank: &ClusterLayerBank<T>) -> Result<()> {
        if self.assignments.len() != bank.num_tasks() {
            return Err(Error::dim("cluster assignments", bank.num_tasks(), self.assignments.len()));
        }
        let points = bank.flattened();
        let means = cluster_means(&points, &self.assignments, self.centroids.len());
        for (centroid, mean) in self.centroids.iter_mut().zip(means) {
            if let Some(mean) = mean {
                *centroid = mean;
            }
        }
        self.check_against(bank)
    }

    pub fn dump(&self, layer: usize) -> ClusterDump {
        ClusterDump {
            layer,
            k: self.centroids.len(),
            assignments: self.assignments.clone(),
            centroid_norms: self.centroids.iter().map(|c| norm(c).as_f64()).collect(),
            frozen: self.frozen,
        }
    }

    /// Task ids grouped by cluster, in cluster order. Empty clusters are skipped.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.centroids.len()];
        for (task, &k) in self.assignments.iter().enumerate() {
            groups[k].push(task);
        }
        groups.retain(|g| !g.is_empty());
        groups
    }
}

/// Mean of the points assigned to each of `k` clusters (`None` if empty).
///
/// Computed as a running mean, so a cluster whose members are all equal
/// (including a singleton) gets a bitwise copy of that point.
pub(crate) fn cluster_means<T: Scalar>(points: &[Vec<T>], assignments: &[usize], k: usize) -> Vec<Option<Vec<T>>> {
    let mut means: Vec<Option<Vec<T>>> = vec![None; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        match &mut means[c] {
            Some(mean) => {
                let n = T::from_usize(counts[c]).expect("count");
                mean.iter_mut().zip(p).for_each(|(m, &v)| *m += (v - *m) / n);
            }
            slot @ None => *slot = Some(p.clone()),
        }
    }
    means
}

/// Clustering loss restricted to a single layer.
pub fn layer_clustering_loss<T: Scalar>(bank: &ClusterLayerBank<T>, state: &ClusterState<T>) -> Result<T> {
    state.check_against(bank)?;
    let mut total = T::zero();
    for (task, &k) in state.assignments.iter().enumerate() {
        total += squared_distance(&bank.flatten_slot(task)?, &state.centroids[k]);
    }
    Ok(total)
}

/// `L_c`: squared distance of every slot to its assigned centroid, summed over
/// layers and tasks.
pub fn clustering_loss<T: Scalar>(banks: &[ClusterLayerBank<T>], states: &[ClusterState<T>]) -> Result<T> {
    if banks.len() != states.len() {
        return Err(Error::dim("cluster states", banks.len(), states.len()));
    }
    banks
        .iter()
        .zip(states)
        .try_fold(T::zero(), |acc, (bank, state)| Ok(acc + layer_clustering_loss(bank, state)?))
}

/// Adds `alpha * dL_c/dw' = 2 alpha (w'_j - c_r(j))` into the slot gradients.
pub(crate) fn add_clustering_gradient<T: Scalar>(
    banks: &[ClusterLayerBank<T>],
    states: &[ClusterState<T>],
    alpha: T,
    grads: &mut [Vec<LayerGrad<T>>],
) -> Result<()> {
    if banks.len() != states.len() {
        return Err(Error::dim("cluster states", banks.len(), states.len()));
    }
    let two_alpha = alpha + alpha;
    for ((bank, state), layer_grads) in banks.iter().zip(states).zip(grads.iter_mut()) {
        state.check_against(bank)?;
        for (task, &k) in state.assignments.iter().enumerate() {
            let slot = &bank.slots[task];
            let centroid = &state.centroids[k];
            let grad = &mut layer_grads[task];
            let (cw, cb) = centroid.split_at(slot.weights.len());
            for ((g, &w), &c) in grad.weights.iter_mut().zip(&slot.weights).zip(cw) {
                *g += two_alpha * (w - c);
            }
            for ((g, &b), &c) in grad.bias.iter_mut().zip(&slot.bias).zip(cb) {
                *g += two_alpha * (b - c);
            }
        }
    }
    Ok(())
}
