use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Bindings, Graph, GraphBuilder, NodeId, Tensor};
use crate::data::Dataset;
use crate::scalar::Scalar;

use super::{
    check_dim, dense_node, epoch_batches, gather_rows, layer_nodes, param_names, Activation, Adam, Dense, ModelError,
    ParamMode, TrainConfig,
};

/// Architecture of a classifier before training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub threshold: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            activation: Activation::Tanh,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Multilayer perceptron with a single sigmoid output giving `F(1|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier<T> {
    activation: Activation,
    layers: Vec<Dense<T>>,
    threshold: T,
    pub metrics: TrainMetrics,
}

impl<T: Scalar> MlpClassifier<T> {
    pub fn from_layers(layers: Vec<Dense<T>>, activation: Activation, threshold: T) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::InvalidConfig("classifier needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].outputs(), pair[1].inputs())?;
        }
        for l in &layers {
            check_dim(l.outputs(), l.bias.len())?;
        }
        if layers.last().map(Dense::outputs) != Some(1) {
            return Err(ModelError::InvalidConfig("classifier head must have one output".into()));
        }
        if !(threshold > T::zero() && threshold < T::one()) {
            return Err(ModelError::InvalidConfig(format!(
                "threshold {threshold} not in (0, 1)"
            )));
        }
        Ok(Self {
            activation,
            layers,
            threshold,
            metrics: TrainMetrics::default(),
        })
    }

    /// Untrained model with Glorot-initialised weights.
    pub fn random(spec: &ClassifierSpec, n_features: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![n_features];
        widths.extend(&spec.hidden);
        widths.push(1);
        let layers = widths.windows(2).map(|w| Dense::glorot(w[0], w[1], &mut rng)).collect();
        Self::from_layers(layers, spec.activation, T::of(spec.threshold))
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_features()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn n_features(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: T) -> Result<Self, ModelError> {
        if !(threshold > T::zero() && threshold < T::one()) {
            return Err(ModelError::InvalidConfig(format!(
                "threshold {threshold} not in (0, 1)"
            )));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn logit(&self, x: &[T]) -> Result<T, ModelError> {
        check_dim(self.n_features(), x.len())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h[0])
    }

    /// `F(τ|x)`. `F(0|x)` is computed as `1 - F(1|x)`.
    pub fn class_probability(&self, x: &[T], class: u8) -> Result<T, ModelError> {
        let p1 = sigmoid(self.logit(x)?);
        match class {
            1 => Ok(p1),
            0 => Ok(T::one() - p1),
            c => Err(ModelError::BadClass(c)),
        }
    }

    /// Hard decision at the model threshold.
    pub fn predict(&self, x: &[T]) -> Result<u8, ModelError> {
        Ok(u8::from(self.class_probability(x, 1)? >= self.threshold))
    }

    pub fn accuracy(&self, data: &Dataset<T>) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for i in 0..data.len() {
            if self.predict(data.row(i))? == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Adds the logit of `x` (vector or batch) to `g`.
    pub fn logit_node(&self, g: &mut GraphBuilder<T>, x: NodeId) -> Result<NodeId, ModelError> {
        let params = layer_nodes(g, &self.layers, "clf", ParamMode::Constant)?;
        Ok(self.logit_from(g, x, &params)?)
    }

    fn logit_from(
        &self,
        g: &mut GraphBuilder<T>,
        x: NodeId,
        params: &[(NodeId, NodeId)],
    ) -> Result<NodeId, crate::autodiff::AutodiffError> {
        let last = params.len() - 1;
        let mut h = x;
        for (i, &p) in params.iter().enumerate() {
            h = dense_node(g, h, p)?;
            if i < last {
                h = self.activation.node(g, h);
            }
        }
        Ok(h)
    }

    /// Adds `F(τ|x)` to `g`, same shape as the logit.
    pub fn probability_node(&self, g: &mut GraphBuilder<T>, x: NodeId, class: u8) -> Result<NodeId, ModelError> {
        if class > 1 {
            return Err(ModelError::BadClass(class));
        }
        let s = self.logit_node(g, x)?;
        let p1 = g.sigmoid(s);
        if class == 1 {
            return Ok(p1);
        }
        let neg = g.neg(p1);
        Ok(g.offset(neg, T::one())?)
    }

    /// Compiled graph for `∇_x F(τ|x)` at single points.
    pub fn input_gradient(&self, class: u8) -> Result<InputGradient<T>, ModelError> {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[self.n_features()])?;
        let p = self.probability_node(&mut g, x, class)?;
        let out = g.sum(p);
        Ok(InputGradient {
            graph: g.build(out),
            n_features: self.n_features(),
            rows: 1,
            batched: false,
        })
    }

    /// Compiled graph whose output is `Σ_r F(τ|x_r)` over a `[rows, J]`
    /// batch; its input gradient holds `∇F` at every row.
    pub fn batch_input_gradient(&self, class: u8, rows: usize) -> Result<InputGradient<T>, ModelError> {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[rows, self.n_features()])?;
        let p = self.probability_node(&mut g, x, class)?;
        let out = g.sum(p);
        Ok(InputGradient {
            graph: g.build(out),
            n_features: self.n_features(),
            rows,
            batched: true,
        })
    }

    /// Functionally identical model with the units of hidden layer `layer`
    /// reordered by `perm` (new unit `i` is old unit `perm[i]`).
    pub fn with_permuted_hidden_units(&self, layer: usize, perm: &[usize]) -> Result<Self, ModelError> {
        if layer + 1 >= self.layers.len() {
            return Err(ModelError::InvalidConfig(format!("layer {layer} is not hidden")));
        }
        let width = self.layers[layer].outputs();
        let mut seen = vec![false; width];
        if perm.len() != width
            || perm
                .iter()
                .any(|&p| p >= width || std::mem::replace(&mut seen[p], true))
        {
            return Err(ModelError::InvalidConfig(
                "not a permutation of the hidden units".into(),
            ));
        }
        let mut out = self.clone();
        let cur = &self.layers[layer];
        let inputs = cur.inputs();
        let mut w = vec![T::zero(); inputs * width];
        for i in 0..inputs {
            for (new, &old) in perm.iter().enumerate() {
                w[i * width + new] = cur.weights.data()[i * width + old];
            }
        }
        let b = perm.iter().map(|&old| cur.bias.data()[old]).collect();
        out.layers[layer] = Dense {
            weights: Tensor::matrix(inputs, width, w)?.into(),
            bias: Tensor::vector(b).into(),
        };
        let next = &self.layers[layer + 1];
        let m = next.outputs();
        let mut w = vec![T::zero(); width * m];
        for (new, &old) in perm.iter().enumerate() {
            w[new * m..(new + 1) * m].copy_from_slice(&next.weights.data()[old * m..(old + 1) * m]);
        }
        out.layers[layer + 1] = Dense {
            weights: Tensor::matrix(width, m, w)?.into(),
            bias: next.bias.clone(),
        };
        Ok(out)
    }

    /// Minibatch Adam on mean binary cross-entropy.
    pub fn train(data: &Dataset<T>, spec: &ClassifierSpec, cfg: &TrainConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        if !data.has_both_classes() {
            return Err(ModelError::DegenerateDataset(format!(
                "labels contain a single class (counts {:?})",
                data.class_counts()
            )));
        }
        let j = data.n_features();
        let mut model = Self::random(spec, j, cfg.seed)?;
        let names = param_names("clf", model.layers.len());
        let sizes: Vec<usize> = model.layers.iter().flat_map(Dense::param_count).collect();
        let mut adam = Adam::<T>::new(cfg.learning_rate, cfg.adam, &sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut graphs: Vec<(usize, Graph<T>)> = Vec::new();
        let mut last_loss = 0.0;

        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in epoch_batches(&order, cfg.batch_size) {
                let rows = batch.len();
                if !graphs.iter().any(|(r, _)| *r == rows) {
                    graphs.push((rows, model.loss_graph(rows)?));
                }
                let graph = &graphs.iter().find(|(r, _)| *r == rows).expect("cached").1;
                let x = gather_rows(data.features(), j, batch);
                let y: Vec<T> = batch.iter().map(|&r| T::of(data.label(r) as f64)).collect();
                let ny: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
                let y = Tensor::matrix(rows, 1, y)?;
                let ny = Tensor::matrix(rows, 1, ny)?;
                let mut bind = Bindings::new().bind("x", &x).bind("y", &y).bind("ny", &ny);
                for (k, layer) in model.layers.iter().enumerate() {
                    bind.insert(&names[2 * k], &layer.weights);
                    bind.insert(&names[2 * k + 1], &layer.bias);
                }
                let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
                let (loss, grads) = graph.value_and_gradients(&bind, &wrt)?;
                epoch_loss += loss.as_f64() * rows as f64;
                let grad_refs: Vec<&[T]> = grads.iter().map(Tensor::data).collect();
                let mut params: Vec<&mut [T]> = model
                    .layers
                    .iter_mut()
                    .flat_map(|l| {
                        let Dense { weights, bias } = l;
                        [
                            std::sync::Arc::make_mut(weights).data_mut(),
                            std::sync::Arc::make_mut(bias).data_mut(),
                        ]
                    })
                    .collect();
                adam.step(&mut params, &grad_refs);
            }
            last_loss = epoch_loss / data.len() as f64;
        }
        model.metrics = TrainMetrics {
            train_accuracy: Some(model.accuracy(data)?),
            test_accuracy: None,
            final_loss: Some(last_loss),
        };
        Ok(model)
    }

    fn loss_graph(&self, rows: usize) -> Result<Graph<T>, ModelError> {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[rows, self.n_features()])?;
        let y = g.input("y", &[rows, 1])?;
        let ny = g.input("ny", &[rows, 1])?;
        let params = layer_nodes(&mut g, &self.layers, "clf", ParamMode::Input)?;
        let s = self.logit_from(&mut g, x, &params)?;
        let p = g.sigmoid(s);
        let lp = g.log(p);
        let neg_s = g.neg(s);
        let q = g.sigmoid(neg_s);
        let lq = g.log(q);
        let a = g.mul(y, lp)?;
        let b = g.mul(ny, lq)?;
        let ll = g.add(a, b)?;
        let total = g.sum(ll);
        let out = g.scale(total, T::of(-1.0 / rows as f64))?;
        Ok(g.build(out))
    }
}

/// `∇_x F(τ|x)` for one point or a fixed-size batch of points.
#[derive(Debug, Clone)]
pub struct InputGradient<T> {
    graph: Graph<T>,
    n_features: usize,
    rows: usize,
    batched: bool,
}

impl<T: Scalar> InputGradient<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Returns `Σ_r F(τ|x_r)` and the row-major gradient, one row per point.
    pub fn value_and_gradient(&self, points: &[T]) -> Result<(T, Vec<T>), ModelError> {
        check_dim(self.rows * self.n_features, points.len())?;
        let x = if self.batched {
            Tensor::matrix(self.rows, self.n_features, points.to_vec())?
        } else {
            Tensor::vector(points.to_vec())
        };
        let (v, mut g) = self.graph.value_and_gradients(&Bindings::new().bind("x", &x), &["x"])?;
        Ok((v, g.pop().expect("one gradient").into_data()))
    }
}

pub fn train_classifier<T: Scalar>(data: &Dataset<T>, cfg: &TrainConfig) -> Result<MlpClassifier<T>, ModelError> {
    MlpClassifier::train(data, &ClassifierSpec::default(), cfg)
}
