//! Dense network core: layers, the multi-task model, exact backpropagation
//! and a central-difference gradient checker.
//!
//! A task's route through the model is `trunk -> cluster-layer slots -> head`.
//! The trunk is shared by every task, each cluster layer holds one slot per
//! task (see [`crate::cluster_layer`]) and each task owns a softmax head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_layer::{self, ClusterLayerBank, ClusterState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking the logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Softmax,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: &[T]) -> Vec<T> {
        match self {
            Activation::Relu => z.iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Tanh => z.iter().map(|&v| v.tanh()).collect(),
            Activation::Identity => z.to_vec(),
            Activation::Softmax => softmax(z),
        }
    }

    /// Elementwise derivative `da/dz`, given both the pre-activation and the output.
    /// Softmax is never differentiated on its own; it is fused with cross-entropy.
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
            Activation::Identity => T::one(),
            Activation::Softmax => unreachable!("softmax is fused with the loss"),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Fully connected layer `a = act(W x + b)` with row-major `W` of shape
/// `[out_dim x in_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
            activation,
        }
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<T>,
        bias: Vec<T>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::dim("layer weights", in_dim * out_dim, weights.len()));
        }
        if bias.len() != out_dim {
            return Err(Error::dim("layer bias", out_dim, bias.len()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `[-sqrt(6/(in+out)), sqrt(6/(in+out))]`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.random_range(-limit..=limit)))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![T::zero(); out_dim],
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.weights.len() == self.in_dim * self.out_dim && self.bias.len() == self.out_dim
    }

    /// `W x + b`.
    pub fn pre_activation(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim {
            return Err(Error::dim("layer input", self.in_dim, x.len()));
        }
        Ok(self.affine(x))
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.pre_activation(x).map(|z| self.activation.apply(&z))
    }

    fn affine(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v))
            .collect()
    }
}

/// Layer sizes and counts for a multi-task model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub trunk_dims: Vec<usize>,
    pub cluster_dims: Vec<usize>,
    pub cluster_counts: Vec<usize>,
    pub num_tasks: usize,
    pub num_classes: usize,
    pub hidden_activation: Activation,
}

/// How the per-task copies of a cluster layer or head are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotInit {
    /// One draw per layer, copied into every task's slot.
    #[default]
    Shared,
    /// An independent draw for every task.
    Independent,
}

/// Full parameter set: shared trunk, per-task cluster-layer banks, per-task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub input_dim: usize,
    pub trunk: Vec<DenseLayer<T>>,
    pub cluster_layers: Vec<ClusterLayerBank<T>>,
    pub heads: Vec<DenseLayer<T>>,
}

/// A single example inside a batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a, T> {
    pub features: &'a [T],
    pub label: usize,
    pub task: usize,
}

/// Mini-batch of examples, possibly drawn from several tasks.
#[derive(Clone, Debug, Default)]
pub struct TaskBatch<'a, T> {
    pub items: Vec<BatchItem<'a, T>>,
}

impl<'a, T> TaskBatch<'a, T> {
    pub fn new(items: Vec<BatchItem<'a, T>>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug)]
struct ExampleTrace<T> {
    task: usize,
    label: usize,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<T>>,
    pre_activations: Vec<Vec<T>>,
}

/// Forward-pass cache for one batch, consumed by [`ModelParams::backward`].
#[derive(Clone, Debug, Default)]
pub struct BatchTape<T> {
    traces: Vec<ExampleTrace<T>>,
    classification_loss: T,
}

impl<T: Scalar> BatchTape<T> {
    /// Mean cross-entropy over the batch.
    pub fn classification_loss(&self) -> T {
        self.classification_loss
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Class probabilities of example `i`.
    pub fn probabilities(&self, i: usize) -> &[T] {
        self.traces[i].activations.last().expect("non-empty trace")
    }
}

/// Selects which parts of `L = L_p + alpha * L_c` a gradient or objective includes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub classification: bool,
    /// `Some(alpha)` includes `alpha * L_c`.
    pub clustering_weight: Option<T>,
}

impl<T: Scalar> LossTerms<T> {
    pub fn classification_only() -> Self {
        Self {
            classification: true,
            clustering_weight: None,
        }
    }

    pub fn clustering_only(alpha: T) -> Self {
        Self {
            classification: false,
            clustering_weight: Some(alpha),
        }
    }

    pub fn full(alpha: T) -> Self {
        Self {
            classification: true,
            clustering_weight: Some(alpha),
        }
    }
}

/// Gradient of a single dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerGrad<T> {
    pub fn zeros_like(layer: &DenseLayer<T>) -> Self {
        Self {
            weights: vec![T::zero(); layer.weights.len()],
            bias: vec![T::zero(); layer.bias.len()],
        }
    }

    /// Flattened view in slot order: weights row-major, then bias.
    pub fn flat(&self) -> Vec<T> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_zero())
    }
}

/// One gradient tensor per parameter tensor of a [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub trunk: Vec<LayerGrad<T>>,
    /// `banks[i][j]`: cluster layer `i`, task `j`.
    pub banks: Vec<Vec<LayerGrad<T>>>,
    pub heads: Vec<LayerGrad<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            trunk: params.trunk.iter().map(LayerGrad::zeros_like).collect(),
            banks: params
                .cluster_layers
                .iter()
                .map(|bank| bank.slots.iter().map(LayerGrad::zeros_like).collect())
                .collect(),
            heads: params.heads.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &LayerGrad<T>> {
        self.trunk
            .iter()
            .chain(self.banks.iter().flatten())
            .chain(&self.heads)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGrad<T>> {
        self.trunk
            .iter_mut()
            .chain(self.banks.iter_mut().flatten())
            .chain(self.heads.iter_mut())
    }

    /// Tensors in canonical order (see [`ModelParams::tensor_names`]).
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers_mut()
            .flat_map(|g| [&mut g.weights, &mut g.bias])
            .collect()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet<T>, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn max_abs_difference(&self, other: &GradientSet<T>) -> T {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()))
            .fold(T::zero(), T::max)
    }

    /// Index of the first tensor holding a non-finite value, in canonical order.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.tensors()
            .iter()
            .position(|t| t.iter().any(|v| !v.is_finite()))
    }

    pub fn head_is_zero(&self, task: usize) -> bool {
        self.heads[task].is_zero()
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Randomly initialized model (Glorot-uniform weights, zero biases).
    pub fn initialize<R: Rng + ?Sized>(arch: &Architecture, init: SlotInit, rng: &mut R) -> Result<Self> {
        validate_architecture(arch)?;
        let act = arch.hidden_activation;
        let mut dim = arch.input_dim;
        let mut trunk = Vec::with_capacity(arch.trunk_dims.len());
        for &out in &arch.trunk_dims {
            trunk.push(DenseLayer::glorot(dim, out, act, rng));
            dim = out;
        }
        let mut cluster_layers = Vec::with_capacity(arch.cluster_dims.len());
        for (i, (&out, &k)) in arch.cluster_dims.iter().zip(&arch.cluster_counts).enumerate() {
            let slots = replicate(arch.num_tasks, init, rng, |r| DenseLayer::glorot(dim, out, act, r));
            cluster_layers.push(ClusterLayerBank::new(i, slots, k)?);
            dim = out;
        }
        let heads = replicate(arch.num_tasks, init, rng, |r| {
            DenseLayer::glorot(dim, arch.num_classes, Activation::Softmax, r)
        });
        let params = Self {
            input_dim: arch.input_dim,
            trunk,
            cluster_layers,
            heads,
        };
        params.validate()?;
        Ok(params)
    }

    /// All-zero model with the given architecture.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        validate_architecture(arch)?;
        let act = arch.hidden_activation;
        let mut dim = arch.input_dim;
        let mut trunk = Vec::new();
        for &out in &arch.trunk_dims {
            trunk.push(DenseLayer::zeros(dim, out, act));
            dim = out;
        }
        let mut cluster_layers = Vec::new();
        for (i, (&out, &k)) in arch.cluster_dims.iter().zip(&arch.cluster_counts).enumerate() {
            let slots = vec![DenseLayer::zeros(dim, out, act); arch.num_tasks];
            cluster_layers.push(ClusterLayerBank::new(i, slots, k)?);
            dim = out;
        }
        let heads = vec![DenseLayer::zeros(dim, arch.num_classes, Activation::Softmax); arch.num_tasks];
        Ok(Self {
            input_dim: arch.input_dim,
            trunk,
            cluster_layers,
            heads,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.heads.first().map_or(0, |h| h.out_dim)
    }

    /// Checks that every layer is internally consistent and that dimensions chain.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_tasks();
        if n == 0 {
            return Err(Error::Argument("model needs at least one task".into()));
        }
        let mut dim = self.input_dim;
        for (l, layer) in self.trunk.iter().enumerate() {
            check_layer(layer, dim, &format!("trunk layer {l}"))?;
            if layer.activation == Activation::Softmax {
                return Err(Error::Argument(format!("trunk layer {l} uses softmax")));
            }
            dim = layer.out_dim;
        }
        for bank in &self.cluster_layers {
            if bank.slots.len() != n {
                return Err(Error::dim(
                    format!("cluster layer {} slot count", bank.layer_index),
                    n,
                    bank.slots.len(),
                ));
            }
            for (j, slot) in bank.slots.iter().enumerate() {
                check_layer(slot, dim, &format!("cluster layer {} slot {j}", bank.layer_index))?;
                if slot.activation == Activation::Softmax {
                    return Err(Error::Argument("softmax is only allowed in heads".into()));
                }
            }
            dim = bank.out_dim();
        }
        let classes = self.num_classes();
        for (j, head) in self.heads.iter().enumerate() {
            check_layer(head, dim, &format!("head {j}"))?;
            if head.activation != Activation::Softmax {
                return Err(Error::Argument(format!("head {j} must end in softmax")));
            }
            if head.out_dim != classes {
                return Err(Error::dim(format!("head {j} classes"), classes, head.out_dim));
            }
        }
        Ok(())
    }

    /// Layers visited by `task`, in order.
    pub fn route(&self, task: usize) -> impl Iterator<Item = &DenseLayer<T>> {
        self.trunk
            .iter()
            .chain(self.cluster_layers.iter().map(move |b| &b.slots[task]))
            .chain(std::iter::once(&self.heads[task]))
    }

    fn check_input(&self, x: &[T], task: usize) -> Result<()> {
        if task >= self.num_tasks() {
            return Err(Error::UnknownTask {
                task,
                num_tasks: self.num_tasks(),
            });
        }
        if x.len() != self.input_dim {
            return Err(Error::dim("model input", self.input_dim, x.len()));
        }
        Ok(())
    }

    /// Class probabilities for `x` under task `task`.
    pub fn forward(&self, x: &[T], task: usize) -> Result<Vec<T>> {
        self.check_input(x, task)?;
        let mut a = x.to_vec();
        for layer in self.route(task) {
            a = layer.activation.apply(&layer.affine(&a));
        }
        Ok(a)
    }

    /// Index of the most probable class (ties resolve to the lowest index).
    pub fn predict(&self, x: &[T], task: usize) -> Result<usize> {
        let probs = self.forward(x, task)?;
        Ok(argmax(&probs))
    }

    fn trace(&self, item: &BatchItem<'_, T>) -> Result<ExampleTrace<T>> {
        self.check_input(item.features, item.task)?;
        if item.label >= self.num_classes() {
            return Err(Error::Argument(format!(
                "label {} out of range for {} classes",
                item.label,
                self.num_classes()
            )));
        }
        let depth = self.trunk.len() + self.cluster_layers.len() + 1;
        let mut activations = Vec::with_capacity(depth + 1);
        let mut pre_activations = Vec::with_capacity(depth);
        activations.push(item.features.to_vec());
        for layer in self.route(item.task) {
            let z = layer.affine(activations.last().expect("input present"));
            activations.push(layer.activation.apply(&z));
            pre_activations.push(z);
        }
        Ok(ExampleTrace {
            task: item.task,
            label: item.label,
            activations,
            pre_activations,
        })
    }

    /// Forward pass over a batch, caching what the backward pass needs.
    pub fn forward_batch(&self, batch: &TaskBatch<'_, T>) -> Result<BatchTape<T>> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let traces = batch
            .items
            .iter()
            .map(|item| self.trace(item))
            .collect::<Result<Vec<_>>>()?;
        let probs: Vec<&[T]> = traces
            .iter()
            .map(|t| t.activations.last().expect("output").as_slice())
            .collect();
        let labels: Vec<usize> = traces.iter().map(|t| t.label).collect();
        let classification_loss = classification_loss(&probs, &labels)?;
        Ok(BatchTape {
            traces,
            classification_loss,
        })
    }

    /// Exact gradients of the selected loss terms.
    ///
    /// The clustering term treats centroids in `states` as constants, so it only
    /// contributes `2 * alpha * (w'_j - c_k)` to cluster-layer slots.
    pub fn backward(
        &self,
        tape: &BatchTape<T>,
        states: &[ClusterState<T>],
        terms: LossTerms<T>,
    ) -> Result<GradientSet<T>> {
        if tape.is_empty() {
            return Err(Error::State("backward called without a cached forward pass".into()));
        }
        let mut grads = GradientSet::zeros_like(self);
        if terms.classification {
            let scale = T::one() / T::from_usize(tape.len()).expect("batch size");
            for trace in &tape.traces {
                self.backprop_example(trace, scale, &mut grads)?;
            }
        }
        if let Some(alpha) = terms.clustering_weight {
            cluster_layer::add_clustering_gradient(&self.cluster_layers, states, alpha, &mut grads.banks)?;
        }
        Ok(grads)
    }

    fn backprop_example(&self, trace: &ExampleTrace<T>, scale: T, grads: &mut GradientSet<T>) -> Result<()> {
        let layers: Vec<&DenseLayer<T>> = self.route(trace.task).collect();
        if layers.len() != trace.pre_activations.len() {
            return Err(Error::State("forward cache does not match model depth".into()));
        }
        // Softmax + cross-entropy: dL/dz = (p - onehot) / B.
        let probs = trace.activations.last().expect("output");
        let mut delta: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| {
                let target = if c == trace.label { T::one() } else { T::zero() };
                (p - target) * scale
            })
            .collect();
        let n_trunk = self.trunk.len();
        let n_cluster = self.cluster_layers.len();
        for pos in (0..layers.len()).rev() {
            let layer = layers[pos];
            let input = &trace.activations[pos];
            let grad = if pos < n_trunk {
                &mut grads.trunk[pos]
            } else if pos < n_trunk + n_cluster {
                &mut grads.banks[pos - n_trunk][trace.task]
            } else {
                &mut grads.heads[trace.task]
            };
            for (o, &d) in delta.iter().enumerate() {
                let row = &mut grad.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad.bias[o] += d;
            }
            if pos == 0 {
                break;
            }
            let mut upstream = vec![T::zero(); layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (u, &w) in upstream.iter_mut().zip(row) {
                    *u += w * d;
                }
            }
            let below = layers[pos - 1];
            let z = &trace.pre_activations[pos - 1];
            let a = &trace.activations[pos];
            delta = upstream
                .iter()
                .zip(z.iter().zip(a))
                .map(|(&u, (&zv, &av))| u * below.activation.derivative(zv, av))
                .collect();
        }
        Ok(())
    }

    /// `L_p` over `batch` plus `alpha * L_c`, as selected by `terms`.
    pub fn objective(&self, batch: &TaskBatch<'_, T>, states: &[ClusterState<T>], terms: LossTerms<T>) -> Result<T> {
        let mut total = T::zero();
        if terms.classification {
            total += self.forward_batch(batch)?.classification_loss();
        }
        if let Some(alpha) = terms.clustering_weight {
            total += alpha * cluster_layer::clustering_loss(&self.cluster_layers, states)?;
        }
        Ok(total)
    }

    /// Human-readable tensor names in canonical order: trunk layers, then
    /// cluster layers by (layer, task), then heads; weights before bias.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.trunk.len() {
            names.push(format!("trunk.{l}.weight"));
            names.push(format!("trunk.{l}.bias"));
        }
        for bank in &self.cluster_layers {
            for j in 0..bank.slots.len() {
                names.push(format!("cluster.{}.task{j}.weight", bank.layer_index));
                names.push(format!("cluster.{}.task{j}.bias", bank.layer_index));
            }
        }
        for j in 0..self.heads.len() {
            names.push(format!("head.{j}.weight"));
            names.push(format!("head.{j}.bias"));
        }
        names
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer<T>> {
        self.trunk
            .iter()
            .chain(self.cluster_layers.iter().flat_map(|b| b.slots.iter()))
            .chain(&self.heads)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer<T>> {
        self.trunk
            .iter_mut()
            .chain(self.cluster_layers.iter_mut().flat_map(|b| b.slots.iter_mut()))
            .chain(self.heads.iter_mut())
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(DenseLayer::param_count).sum()
    }
}

fn replicate<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    init: SlotInit,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> DenseLayer<T>,
) -> Vec<DenseLayer<T>> {
    match init {
        SlotInit::Shared => vec![draw(rng); n],
        SlotInit::Independent => (0..n).map(|_| draw(rng)).collect(),
    }
}

fn check_layer<T: Scalar>(layer: &DenseLayer<T>, in_dim: usize, what: &str) -> Result<()> {
    if !layer.is_consistent() {
        return Err(Error::Argument(format!("{what} has inconsistent tensor sizes")));
    }
    if layer.in_dim != in_dim {
        return Err(Error::dim(format!("{what} input"), in_dim, layer.in_dim));
    }
    Ok(())
}

fn validate_architecture(arch: &Architecture) -> Result<()> {
    let mut bad = Vec::new();
    if arch.input_dim == 0 {
        bad.push("input_dim must be positive".to_string());
    }
    if arch.num_tasks == 0 {
        bad.push("num_tasks must be positive".to_string());
    }
    if arch.num_classes < 2 {
        bad.push("num_classes must be at least 2".to_string());
    }
    if arch.trunk_dims.iter().chain(&arch.cluster_dims).any(|&d| d == 0) {
        bad.push("layer dimensions must be positive".to_string());
    }
    if arch.cluster_dims.len() != arch.cluster_counts.len() {
        bad.push(format!(
            "cluster_counts has {} entries but cluster_hidden_dims has {}",
            arch.cluster_counts.len(),
            arch.cluster_dims.len()
        ));
    }
    if arch.cluster_counts.iter().any(|&k| k == 0 || k > arch.num_tasks) {
        bad.push(format!("cluster_counts must lie in [1, {}]", arch.num_tasks));
    }
    if arch.hidden_activation == Activation::Softmax {
        bad.push("hidden_activation cannot be softmax".to_string());
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(bad))
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy `-(1/B) sum_b log(max(p_b[y_b], floor))`.
pub fn classification_loss<P: AsRef<[T]>, T: Scalar>(probs: &[P], labels: &[usize]) -> Result<T> {
    if probs.is_empty() {
        return Err(Error::Argument("classification loss of an empty batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::dim("labels", probs.len(), labels.len()));
    }
    let floor = T::lit(PROBABILITY_FLOOR);
    let mut total = T::zero();
    for (p, &y) in probs.iter().zip(labels) {
        let p = p.as_ref();
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Argument(format!("label {y} out of range for {} classes", p.len())))?;
        let clamped = py.max(floor);
        if clamped.is_nan() || clamped > T::one() {
            return Err(Error::Numeric(format!("probability {py} outside [0, 1]")));
        }
        total -= clamped.ln();
    }
    Ok(total / T::from_usize(probs.len()).expect("batch size"))
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_a - g_n| / max(1, |g_a|, |g_n|)` over every parameter.
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Central-difference check of [`ModelParams::backward`] on every parameter.
pub fn finite_diff_check<T: Scalar>(
    params: &ModelParams<T>,
    states: &[ClusterState<T>],
    batch: &TaskBatch<'_, T>,
    terms: LossTerms<T>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Argument(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let tape = params.forward_batch(batch)?;
    let analytic = params.backward(&tape, states, terms)?;
    let names = params.tensor_names();
    let eps = T::lit(epsilon);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (t, grad) in analytic.tensors().into_iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let original = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = original + eps;
            let plus = probe.objective(batch, states, terms)?;
            probe.tensors_mut()[t][i] = original - eps;
            let minus = probe.objective(batch, states, terms)?;
            probe.tensors_mut()[t][i] = original;
            let numeric = ((plus - minus) / (eps + eps)).as_f64();
            let g = g.as_f64();
            let err = (g - numeric).abs() / 1f64.max(g.abs()).max(numeric.abs());
            if err > report.max_relative_error || !err.is_finite() {
                report.max_relative_error = err;
                report.worst_tensor = names[t].clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
