//! The differentiable classifier and the variational autoencoder, with
//! seeded training loops and JSON serialization.

mod classifier;
mod io;
mod optim;
mod vae;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, GraphBuilder, NodeId, Tensor};
use crate::data::DataError;
use crate::scalar::Scalar;

pub use classifier::{train_classifier, ClassifierSpec, InputGradient, MlpClassifier, TrainMetrics};
pub use io::{LayerDocument, ModelDocument, ModelKind, FORMAT_VERSION};
pub use optim::{Adam, AdamConfig};
pub use vae::{train_vae, VaeLoss, VaeLossNodes, VaeMode, VaeModel, VaeSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class must be 0 or 1, got {0}")]
    BadClass(u8),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("model parameters are frozen")]
    Frozen,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed model document: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(T::zero()),
        }
    }

    pub(crate) fn node<T: Scalar>(self, g: &mut GraphBuilder<T>, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Fully connected layer: `y = x W + b` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Arc::new(Tensor::zeros(&[inputs, outputs])),
            bias: Arc::new(Tensor::zeros(&[outputs])),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| T::of(rng.gen_range(-limit..limit)))
            .collect();
        Self {
            weights: Arc::new(Tensor::matrix(inputs, outputs, w).expect("shape")),
            bias: Arc::new(Tensor::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Plain forward pass on one vector, same summation order as the graph.
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let m = self.outputs();
        let w = self.weights.data();
        let mut out = vec![T::zero(); m];
        for (i, &xv) in x.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w[i * m..(i + 1) * m]) {
                *o = *o + xv * wv;
            }
        }
        for (o, &b) in out.iter_mut().zip(self.bias.data()) {
            *o = *o + b;
        }
        out
    }

    pub(crate) fn param_count(&self) -> [usize; 2] {
        [self.weights.len(), self.bias.len()]
    }
}

/// How layer parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamMode {
    /// Baked in as constants (inference, input gradients).
    Constant,
    /// Named inputs `"{prefix}{i}.w"` / `"{prefix}{i}.b"` (training).
    Input,
}

pub(crate) fn layer_nodes<T: Scalar>(
    g: &mut GraphBuilder<T>,
    layers: &[Dense<T>],
    prefix: &str,
    mode: ParamMode,
) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| match mode {
            ParamMode::Constant => Ok((
                g.constant_shared(Arc::clone(&l.weights)),
                g.constant_shared(Arc::clone(&l.bias)),
            )),
            ParamMode::Input => Ok((
                g.input(&format!("{prefix}{i}.w"), l.weights.shape())?,
                g.input(&format!("{prefix}{i}.b"), l.bias.shape())?,
            )),
        })
        .collect()
}

pub(crate) fn param_names(prefix: &str, n_layers: usize) -> Vec<String> {
    (0..n_layers)
        .flat_map(|i| [format!("{prefix}{i}.w"), format!("{prefix}{i}.b")])
        .collect()
}

/// `x W + b` for a vector `[in]` or a batch `[rows, in]`.
pub(crate) fn dense_node<T: Scalar>(
    g: &mut GraphBuilder<T>,
    x: NodeId,
    (w, b): (NodeId, NodeId),
) -> Result<NodeId, AutodiffError> {
    let xw = g.matmul(x, w)?;
    let shape = g.shape(xw).to_vec();
    let bias = if shape.len() == 2 { g.broadcast(b, &shape)? } else { b };
    g.add(xw, bias)
}

/// Optimizer settings shared by both training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn classifier_default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn vae_default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            learning_rate: 5e-3,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(
                "epochs, batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::classifier_default()
    }
}

pub fn check_dim(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Mini-batches of row indices for one epoch.
pub(crate) fn epoch_batches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch)
}

/// Copies selected rows into a `[rows, J]` tensor.
pub(crate) fn gather_rows<T: Scalar>(features: &[T], j: usize, rows: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * j);
    for &r in rows {
        data.extend_from_slice(&features[r * j..(r + 1) * j]);
    }
    Tensor::matrix(rows.len(), j, data).expect("shape")
}
