use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{AutodiffError, Bindings, Graph, GraphBuilder, NodeId, Tensor};
use crate::data::Dataset;
use crate::scalar::Scalar;

use super::{
    check_dim, dense_node, epoch_batches, gather_rows, layer_nodes, param_names, Activation, Adam, Dense, ModelError,
    ParamMode, TrainConfig,
};

const ENCODER: usize = 0;
const MU: usize = 1;
const LOGVAR: usize = 2;
const DECODER_HIDDEN: usize = 3;
const DECODER_OUT: usize = 4;

/// Architecture of a VAE before training.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeSpec {
    pub hidden: usize,
    /// Defaults to `max(1, min(8, J / 2))` when `None`.
    pub latent: Option<usize>,
    pub activation: Activation,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            hidden: 16,
            latent: None,
            activation: Activation::Tanh,
        }
    }
}

impl VaeSpec {
    pub fn latent_dim(&self, n_features: usize) -> usize {
        self.latent.unwrap_or_else(|| (n_features / 2).clamp(1, 8))
    }
}

/// How the latent code is chosen when scoring an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VaeMode {
    /// `z = μ`.
    Deterministic,
    /// `z = μ + exp(logvar / 2) ⊙ ε`, `ε` drawn from the given seed.
    Sampled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss<T> {
    pub kl: T,
    pub recon: T,
    pub total: T,
}

/// Graph nodes of the VAE loss terms.
#[derive(Debug, Clone, Copy)]
pub struct VaeLossNodes {
    pub kl: NodeId,
    pub recon: NodeId,
    pub total: NodeId,
    pub reconstruction: NodeId,
}

/// Gaussian-encoder VAE with a unit-variance Gaussian likelihood.
///
/// Encoder `J -> hidden -> (μ, logvar)`, decoder `L -> hidden -> J`.
/// Once frozen the parameters cannot change.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel<T> {
    activation: Activation,
    layers: Vec<Dense<T>>,
    frozen: bool,
    pub final_loss: Option<f64>,
}

impl<T: Scalar> VaeModel<T> {
    /// Layers in order: encoder hidden, μ head, logvar head, decoder hidden,
    /// decoder output.
    pub fn from_layers(layers: Vec<Dense<T>>, activation: Activation, frozen: bool) -> Result<Self, ModelError> {
        if layers.len() != 5 {
            return Err(ModelError::InvalidConfig(format!(
                "VAE needs 5 layers, got {}",
                layers.len()
            )));
        }
        let [enc, mu, lv, dh, out] = [&layers[0], &layers[1], &layers[2], &layers[3], &layers[4]];
        check_dim(enc.outputs(), mu.inputs())?;
        check_dim(enc.outputs(), lv.inputs())?;
        check_dim(mu.outputs(), lv.outputs())?;
        check_dim(mu.outputs(), dh.inputs())?;
        check_dim(dh.outputs(), out.inputs())?;
        check_dim(enc.inputs(), out.outputs())?;
        for l in &layers {
            check_dim(l.outputs(), l.bias.len())?;
        }
        Ok(Self {
            activation,
            layers,
            frozen,
            final_loss: None,
        })
    }

    pub fn random(spec: &VaeSpec, n_features: usize, seed: u64) -> Result<Self, ModelError> {
        let latent = spec.latent_dim(n_features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Dense::glorot(n_features, spec.hidden, &mut rng),
            Dense::glorot(spec.hidden, latent, &mut rng),
            Dense::glorot(spec.hidden, latent, &mut rng),
            Dense::glorot(latent, spec.hidden, &mut rng),
            Dense::glorot(spec.hidden, n_features, &mut rng),
        ];
        Self::from_layers(layers, spec.activation, false)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_features(&self) -> usize {
        self.layers[ENCODER].inputs()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[MU].outputs()
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[ENCODER].outputs()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable access to the layers; refused once frozen.
    pub fn update_parameters(&mut self, f: impl FnOnce(&mut [Dense<T>])) -> Result<(), ModelError> {
        if self.frozen {
            return Err(ModelError::Frozen);
        }
        f(&mut self.layers);
        Ok(())
    }

    fn act(&self, mut v: Vec<T>) -> Vec<T> {
        v.iter_mut().for_each(|x| *x = self.activation.apply(*x));
        v
    }

    /// Posterior mean and log-variance.
    pub fn encode(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>), ModelError> {
        check_dim(self.n_features(), x.len())?;
        let h = self.act(self.layers[ENCODER].forward(x));
        Ok((self.layers[MU].forward(&h), self.layers[LOGVAR].forward(&h)))
    }

    pub fn decode(&self, z: &[T]) -> Result<Vec<T>, ModelError> {
        check_dim(self.latent_dim(), z.len())?;
        let h = self.act(self.layers[DECODER_HIDDEN].forward(z));
        Ok(self.layers[DECODER_OUT].forward(&h))
    }

    /// `decode(μ(x))`.
    pub fn reconstruct(&self, x: &[T]) -> Result<Vec<T>, ModelError> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    pub fn vae_loss(&self, x: &[T], mode: VaeMode) -> Result<VaeLoss<T>, ModelError> {
        let (mu, logvar) = self.encode(x)?;
        let z = match mode {
            VaeMode::Deterministic => mu.clone(),
            VaeMode::Sampled(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                mu.iter()
                    .zip(&logvar)
                    .map(|(&m, &lv)| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + (lv * T::half()).exp() * T::of(e)
                    })
                    .collect()
            }
        };
        let xhat = self.decode(&z)?;
        let kl = kl_divergence(&mu, &logvar);
        let recon = x
            .iter()
            .zip(&xhat)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
            * T::half();
        Ok(VaeLoss {
            kl,
            recon,
            total: kl + recon,
        })
    }

    /// Adds the deterministic-mode loss of `x` (shape `[J]`) to `g`, with the
    /// parameters baked in as constants.
    pub fn loss_nodes(&self, g: &mut GraphBuilder<T>, x: NodeId) -> Result<VaeLossNodes, ModelError> {
        let params = layer_nodes(g, &self.layers, "vae", ParamMode::Constant)?;
        Ok(self.loss_from(g, x, None, &params)?)
    }

    fn loss_from(
        &self,
        g: &mut GraphBuilder<T>,
        x: NodeId,
        noise: Option<NodeId>,
        p: &[(NodeId, NodeId)],
    ) -> Result<VaeLossNodes, AutodiffError> {
        let h = dense_node(g, x, p[ENCODER])?;
        let h = self.activation.node(g, h);
        let mu = dense_node(g, h, p[MU])?;
        let logvar = dense_node(g, h, p[LOGVAR])?;
        let z = match noise {
            None => mu,
            Some(eps) => {
                let half = g.scale(logvar, T::half())?;
                let sd = g.exp(half);
                let spread = g.mul(sd, eps)?;
                g.add(mu, spread)?
            }
        };
        let hd = dense_node(g, z, p[DECODER_HIDDEN])?;
        let hd = self.activation.node(g, hd);
        let xhat = dense_node(g, hd, p[DECODER_OUT])?;

        // kl = ½ Σ (μ² + exp(logvar) − logvar − 1)
        let mu2 = g.square(mu);
        let var = g.exp(logvar);
        let t = g.add(mu2, var)?;
        let t = g.sub(t, logvar)?;
        let t = g.offset(t, -T::one())?;
        let s = g.sum(t);
        let kl = g.scale(s, T::half())?;

        let diff = g.sub(x, xhat)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        let recon = g.scale(s, T::half())?;
        let total = g.add(kl, recon)?;
        Ok(VaeLossNodes {
            kl,
            recon,
            total,
            reconstruction: xhat,
        })
    }

    /// Compiled deterministic loss graph over one input named `"x"`.
    pub fn loss_graph(&self) -> Result<(Graph<T>, VaeLossNodes), ModelError> {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[self.n_features()])?;
        let nodes = self.loss_nodes(&mut g, x)?;
        Ok((g.build(nodes.total), nodes))
    }

    /// Minibatch Adam on the mean sampled-mode loss, one Monte-Carlo sample
    /// per datum. The returned model is frozen.
    pub fn train(data: &Dataset<T>, spec: &VaeSpec, cfg: &TrainConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(ModelError::DegenerateDataset("no rows".into()));
        }
        let j = data.n_features();
        let mut model = Self::random(spec, j, cfg.seed)?;
        let latent = model.latent_dim();
        let names = param_names("vae", model.layers.len());
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
                    graphs.push((rows, model.batch_loss_graph(rows)?));
                }
                let graph = &graphs.iter().find(|(r, _)| *r == rows).expect("cached").1;
                let x = gather_rows(data.features(), j, batch);
                let eps: Vec<T> = (0..rows * latent)
                    .map(|_| T::of(StandardNormal.sample(&mut rng)))
                    .collect();
                let eps = Tensor::matrix(rows, latent, eps)?;
                let mut bind = Bindings::new().bind("x", &x).bind("eps", &eps);
                for (k, layer) in model.layers.iter().enumerate() {
                    bind.insert(&names[2 * k], &layer.weights);
                    bind.insert(&names[2 * k + 1], &layer.bias);
                }
                let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
                let (loss, grads) = graph.value_and_gradients(&bind, &wrt)?;
                epoch_loss += loss.as_f64() * rows as f64;
                let grad_refs: Vec<&[T]> = grads.iter().map(Tensor::data).collect();
                model.update_parameters(|layers| {
                    let mut params: Vec<&mut [T]> = layers
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
                })?;
            }
            last_loss = epoch_loss / data.len() as f64;
        }
        model.final_loss = Some(last_loss);
        model.freeze();
        Ok(model)
    }

    fn batch_loss_graph(&self, rows: usize) -> Result<Graph<T>, ModelError> {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[rows, self.n_features()])?;
        let eps = g.input("eps", &[rows, self.latent_dim()])?;
        let params = layer_nodes(&mut g, &self.layers, "vae", ParamMode::Input)?;
        let nodes = self.loss_from(&mut g, x, Some(eps), &params)?;
        let out = g.scale(nodes.total, T::of(1.0 / rows as f64))?;
        Ok(g.build(out))
    }
}

/// `−½ Σ (1 + logvar − μ² − exp(logvar))`.
pub(crate) fn kl_divergence<T: Scalar>(mu: &[T], logvar: &[T]) -> T {
    let s = mu
        .iter()
        .zip(logvar)
        .fold(T::zero(), |acc, (&m, &lv)| acc + (T::one() + lv - m * m - lv.exp()));
    -T::half() * s
}

pub fn train_vae<T: Scalar>(data: &Dataset<T>, cfg: &TrainConfig) -> Result<VaeModel<T>, ModelError> {
    VaeModel::train(data, &VaeSpec::default(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, Dataset};
    use rand::Rng;
    use std::sync::Arc;

    /// J = 2, hidden = 1, latent = 1 with all weights zero, so μ, logvar
    /// and x̂ are exactly the head biases.
    fn hand_set(decoder_bias: [f64; 2], mu_bias: [f64; 1]) -> VaeModel<f64> {
        let zero = |i, o| Dense::<f64>::zeros(i, o);
        let mut layers = vec![zero(2, 1), zero(1, 1), zero(1, 1), zero(1, 1), zero(1, 2)];
        layers[MU].bias = Arc::new(Tensor::vector(mu_bias.to_vec()));
        layers[DECODER_OUT].bias = Arc::new(Tensor::vector(decoder_bias.to_vec()));
        VaeModel::from_layers(layers, Activation::Tanh, true).unwrap()
    }

    #[test]
    fn kl_is_zero_at_prior() {
        let m = hand_set([0.0, 0.0], [0.0]);
        let l = m.vae_loss(&[0.3, 0.4], VaeMode::Deterministic).unwrap();
        assert_eq!(l.kl, 0.0);
    }

    #[test]
    fn kl_closed_form_unit_mean() {
        // μ = 1, logvar = 0: −½(1 + 0 − 1 − 1) = 0.5
        let m = hand_set([0.0, 0.0], [1.0]);
        let l = m.vae_loss(&[0.0, 0.0], VaeMode::Deterministic).unwrap();
        assert!((l.kl - 0.5).abs() < 1e-15);
        assert_eq!(kl_divergence(&[1.0], &[0.0]), 0.5);
    }

    #[test]
    fn perfect_reconstruction_has_zero_recon() {
        let m = hand_set([0.7, -0.2], [0.0]);
        let l = m.vae_loss(&[0.7, -0.2], VaeMode::Deterministic).unwrap();
        assert_eq!(l.recon, 0.0);
        let l = m.vae_loss(&[1.7, -0.2], VaeMode::Deterministic).unwrap();
        assert!((l.recon - 0.5).abs() < 1e-15);
        assert_eq!(l.total, l.kl + l.recon);
    }

    #[test]
    fn graph_loss_matches_plain_and_finite_differences() {
        let m = VaeModel::<f64>::random(&VaeSpec::default(), 6, 3).unwrap();
        let (graph, nodes) = m.loss_graph().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let xt = Tensor::vector(x.clone());
            let b = Bindings::new().bind("x", &xt);
            let vals = graph.evaluate_nodes(&b, &[nodes.kl, nodes.recon, nodes.total]).unwrap();
            let plain = m.vae_loss(&x, VaeMode::Deterministic).unwrap();
            assert!((vals[0].data()[0] - plain.kl).abs() < 1e-12);
            assert!((vals[1].data()[0] - plain.recon).abs() < 1e-12);
            assert!((vals[2].data()[0] - plain.total).abs() < 1e-12);
            let g = graph.gradient(&b, "x").unwrap();
            for j in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (m.vae_loss(&xp, VaeMode::Deterministic).unwrap().total
                    - m.vae_loss(&xm, VaeMode::Deterministic).unwrap().total)
                    / (2.0 * h);
                let gj = g.data()[j];
                let rel = (fd - gj).abs() / fd.abs().max(gj.abs()).max(1e-8);
                assert!(rel <= 1e-5, "rel {rel}");
            }
        }
    }

    #[test]
    fn sampled_mode_is_seeded() {
        let m = VaeModel::<f64>::random(&VaeSpec::default(), 4, 1).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        let a = m.vae_loss(&x, VaeMode::Sampled(7)).unwrap();
        let b = m.vae_loss(&x, VaeMode::Sampled(7)).unwrap();
        let c = m.vae_loss(&x, VaeMode::Sampled(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.total, c.total);
        assert_eq!(a.kl, m.vae_loss(&x, VaeMode::Deterministic).unwrap().kl);
    }

    #[test]
    fn frozen_model_refuses_updates() {
        let mut m = hand_set([0.0, 0.0], [0.0]);
        assert!(matches!(m.update_parameters(|_| {}), Err(ModelError::Frozen)));
        let mut r = VaeModel::<f64>::random(&VaeSpec::default(), 4, 1).unwrap();
        assert!(r.update_parameters(|_| {}).is_ok());
        r.freeze();
        assert!(r.update_parameters(|_| {}).is_err());
        m.freeze();
    }

    fn gaussian_blob(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            f.push(a);
            f.push(0.6 * a + 0.8 * b);
        }
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        Dataset::new(f, labels, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn trained_vae_scores_far_points_worse_and_is_deterministic() {
        let (ds, _) = normalize(&gaussian_blob(300, 5)).unwrap();
        let cfg = TrainConfig::vae_default().with_epochs(80).with_seed(3);
        let vae = train_vae(&ds, &cfg).unwrap();
        assert!(vae.is_frozen());
        let inside: f64 = ds
            .rows()
            .map(|r| vae.vae_loss(r, VaeMode::Deterministic).unwrap().total)
            .sum::<f64>()
            / ds.len() as f64;
        let outside: f64 = ds
            .rows()
            .map(|r| {
                let far = [r[0] + 5.0, r[1] - 5.0];
                vae.vae_loss(&far, VaeMode::Deterministic).unwrap().total
            })
            .sum::<f64>()
            / ds.len() as f64;
        assert!(inside < outside, "{inside} vs {outside}");
        let again = train_vae(&ds, &cfg).unwrap();
        assert_eq!(vae, again);
    }

    #[test]
    fn default_latent_width() {
        assert_eq!(VaeSpec::default().latent_dim(30), 8);
        assert_eq!(VaeSpec::default().latent_dim(6), 3);
        assert_eq!(VaeSpec::default().latent_dim(2), 1);
    }
}
