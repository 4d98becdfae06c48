//! SGD and Adam updates over every parameter tensor of a model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradientSet, ModelParams};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Per-parameter moment estimates. Empty for SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &ModelParams<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::default(),
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
                Self {
                    step: 0,
                    first_moment: zeros.clone(),
                    second_moment: zeros,
                }
            }
        }
    }
}

/// Applies one update `theta <- theta - lr * direction` in place.
///
/// SGD uses the raw gradient; Adam uses bias-corrected moments with
/// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
pub fn optimizer_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &GradientSet<T>,
    state: &mut OptimizerState<T>,
    kind: OptimizerKind,
    learning_rate: T,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut tensors = params.tensors_mut();
    if tensors.len() != grad_tensors.len() {
        return Err(Error::dim("gradient tensors", tensors.len(), grad_tensors.len()));
    }
    if let Some((i, _)) = tensors
        .iter()
        .zip(&grad_tensors)
        .enumerate()
        .find(|(_, (p, g))| p.len() != g.len())
    {
        return Err(Error::dim(format!("gradient tensor {i}"), tensors[i].len(), grad_tensors[i].len()));
    }
    let mut bad = None;
    match kind {
        OptimizerKind::Sgd => {
            for (i, (p, g)) in tensors.iter_mut().zip(&grad_tensors).enumerate() {
                for (w, &d) in p.iter_mut().zip(g.iter()) {
                    *w -= learning_rate * d;
                }
                if bad.is_none() && p.iter().any(|v| !v.is_finite()) {
                    bad = Some(i);
                }
            }
        }
        OptimizerKind::Adam => {
            if state.first_moment.len() != tensors.len() {
                return Err(Error::State("Adam moments do not match the model".into()));
            }
            state.step += 1;
            let b1 = T::lit(ADAM_BETA1);
            let b2 = T::lit(ADAM_BETA2);
            let eps = T::lit(ADAM_EPSILON);
            let t = i32::try_from(state.step).unwrap_or(i32::MAX);
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            for (i, (p, g)) in tensors.iter_mut().zip(&grad_tensors).enumerate() {
                let m = &mut state.first_moment[i];
                let v = &mut state.second_moment[i];
                for (((w, &d), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + (T::one() - b1) * d;
                    *vi = b2 * *vi + (T::one() - b2) * d * d;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
                if bad.is_none() && p.iter().any(|v| !v.is_finite()) {
                    bad = Some(i);
                }
            }
        }
    }
    drop(tensors);
    match bad {
        Some(i) => Err(Error::Diverged {
            tensor: params.tensor_names()[i].clone(),
        }),
        None => Ok(()),
    }
}
