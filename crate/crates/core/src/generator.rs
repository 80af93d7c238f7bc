//! Counterfactual generation by gradient descent on the joint
//! validity / proximity / uncertainty objective.
//!
//! Starting from the instance `x`, the candidate `x^c` is repeatedly moved
//! against `∇_{x^c} G` where
//! `G = λ₁·(−log F(τ|x^c)) + λ₂·½‖x^c − x‖² + λ₃·VAELoss(x^c)`.
//! Every iterate is recorded, giving the piecewise-linear path that the
//! attribution module integrates along.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Bindings, Graph, GraphBuilder, NodeId, Tensor};
use crate::models::{check_dim, Adam, AdamConfig, MlpClassifier, ModelError, VaeModel};
use crate::scalar::Scalar;

/// Probabilities below this are clamped inside `−log F`.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("set size must be at least 1")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AutodiffError> for GeneratorError {
    fn from(e: AutodiffError) -> Self {
        GeneratorError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Weights of the prediction, proximity and uncertainty terms.
    pub lambda: [f64; 3],
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Validity threshold ϑ on `F(τ|x^c)`.
    pub threshold: f64,
    pub optimizer: Optimizer,
    /// Standard deviation of the Gaussian jitter added to the start point.
    pub jitter: f64,
    pub seed: u64,
    pub early_stop: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0, 0.5, 0.5],
            learning_rate: 0.05,
            max_iterations: 500,
            threshold: 0.5,
            optimizer: Optimizer::Adam,
            jitter: 0.0,
            seed: 0,
            early_stop: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(GeneratorError::InvalidConfig(
                "λ weights must be finite and non-negative".into(),
            ));
        }
        if self.lambda.iter().all(|&l| l == 0.0) {
            return Err(GeneratorError::InvalidConfig("at least one λ must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(GeneratorError::InvalidConfig(format!(
                "learning rate {} not in (0, 1)",
                self.learning_rate
            )));
        }
        if self.max_iterations == 0 {
            return Err(GeneratorError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(GeneratorError::InvalidConfig(format!(
                "threshold {} not in (0, 1)",
                self.threshold
            )));
        }
        if !(self.jitter >= 0.0) {
            return Err(GeneratorError::InvalidConfig("jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_lambda(mut self, lambda: [f64; 3]) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

/// Values of the objective and its three terms at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms<T> {
    pub total: T,
    pub prediction: T,
    pub proximity: T,
    pub uncertainty: T,
    /// `F(τ|x^c)` fell below [`PROBABILITY_FLOOR`] and was clamped.
    pub floored: bool,
}

/// Compiled objective for a fixed origin, target class and weighting.
#[derive(Debug, Clone)]
pub struct QuceObjective<'m, T> {
    classifier: &'m MlpClassifier<T>,
    class: u8,
    lambda: [T; 3],
    graph: Graph<T>,
    floor_graph: Graph<T>,
    prediction: NodeId,
    proximity: NodeId,
    uncertainty: NodeId,
}

impl<'m, T: Scalar> QuceObjective<'m, T> {
    pub fn new(
        x: &[T],
        class: u8,
        lambda: [f64; 3],
        classifier: &'m MlpClassifier<T>,
        vae: &VaeModel<T>,
    ) -> Result<Self, GeneratorError> {
        let j = classifier.n_features();
        check_dim(j, x.len())?;
        check_dim(j, vae.n_features())?;
        let lambda = lambda.map(T::of);

        let mut g = GraphBuilder::new();
        let xc = g.input("xc", &[j])?;
        let origin = g.constant(Tensor::vector(x.to_vec()));

        let p = classifier.probability_node(&mut g, xc, class)?;
        let lp = g.log(p);
        let lp = g.sum(lp);
        let lpr = g.neg(lp);

        let diff = g.sub(xc, origin)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        let prox = g.scale(s, T::half())?;

        let unc = vae.loss_nodes(&mut g, xc)?.total;

        // −log F(τ|·) with F clamped: the value is constant, the slope follows
        // the asymptote −log σ(s) ≈ −s of the signed logit.
        let logit = classifier.logit_node(&mut g, xc)?;
        let logit = g.sum(logit);
        let signed = if class == 1 { g.neg(logit) } else { logit };

        let weighted = |g: &mut GraphBuilder<T>, pred: NodeId| -> Result<NodeId, AutodiffError> {
            let a = g.scale(pred, lambda[0])?;
            let b = g.scale(prox, lambda[1])?;
            let c = g.scale(unc, lambda[2])?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        };
        let total = weighted(&mut g, lpr)?;
        let floor_total = weighted(&mut g, signed)?;
        let graph = g.build(total);
        let floor_graph = graph.with_output(floor_total);
        Ok(Self {
            classifier,
            class,
            lambda,
            graph,
            floor_graph,
            prediction: lpr,
            proximity: prox,
            uncertainty: unc,
        })
    }

    fn is_floored(&self, xc: &[T]) -> Result<bool, GeneratorError> {
        Ok(self.classifier.class_probability(xc, self.class)? < T::of(PROBABILITY_FLOOR))
    }

    fn terms(&self, xc: &Tensor<T>, floored: bool) -> Result<ObjectiveTerms<T>, GeneratorError> {
        let b = Bindings::new().bind("xc", xc);
        let (prediction, rest) = if floored {
            let v = self.graph.evaluate_nodes(&b, &[self.proximity, self.uncertainty])?;
            (-T::of(PROBABILITY_FLOOR).ln(), v)
        } else {
            let mut v = self
                .graph
                .evaluate_nodes(&b, &[self.prediction, self.proximity, self.uncertainty])?;
            let p = v.remove(0).data()[0];
            (p, v)
        };
        let proximity = rest[0].data()[0];
        let uncertainty = rest[1].data()[0];
        let total = self.lambda[0] * prediction + self.lambda[1] * proximity + self.lambda[2] * uncertainty;
        Ok(ObjectiveTerms {
            total,
            prediction,
            proximity,
            uncertainty,
            floored,
        })
    }

    pub fn evaluate(&self, xc: &[T]) -> Result<ObjectiveTerms<T>, GeneratorError> {
        check_dim(self.classifier.n_features(), xc.len())?;
        let floored = self.is_floored(xc)?;
        self.terms(&Tensor::vector(xc.to_vec()), floored)
    }

    /// Terms at `xc` and `∇_{x^c} G`.
    pub fn value_and_gradient(&self, xc: &[T]) -> Result<(ObjectiveTerms<T>, Vec<T>), GeneratorError> {
        check_dim(self.classifier.n_features(), xc.len())?;
        let floored = self.is_floored(xc)?;
        let t = Tensor::vector(xc.to_vec());
        let terms = self.terms(&t, floored)?;
        let graph = if floored { &self.floor_graph } else { &self.graph };
        let grad = graph.gradient(&Bindings::new().bind("xc", &t), "xc")?;
        Ok((terms, grad.into_data()))
    }
}

/// `G(x^c)` and its three terms.
pub fn quce_objective<T: Scalar>(
    x: &[T],
    xc: &[T],
    class: u8,
    lambda: [f64; 3],
    classifier: &MlpClassifier<T>,
    vae: &VaeModel<T>,
) -> Result<ObjectiveTerms<T>, GeneratorError> {
    QuceObjective::new(x, class, lambda, classifier, vae)?.evaluate(xc)
}

/// Ordered points `⟨x_{Δ₀}, …, x_{Δₙ}⟩`; the first is the origin instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPath<T> {
    points: Vec<Vec<T>>,
}

impl<T: Scalar> CounterfactualPath<T> {
    pub fn new(points: Vec<Vec<T>>) -> Result<Self, GeneratorError> {
        let Some(first) = points.first() else {
            return Err(GeneratorError::InvalidConfig("a path needs at least one point".into()));
        };
        let j = first.len();
        for p in &points {
            check_dim(j, p.len())?;
        }
        Ok(Self { points })
    }

    pub fn straight(a: &[T], b: &[T]) -> Result<Self, GeneratorError> {
        Self::new(vec![a.to_vec(), b.to_vec()])
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn start(&self) -> &[T] {
        &self.points[0]
    }

    pub fn end(&self) -> &[T] {
        self.points.last().expect("non-empty path")
    }

    pub fn segments(&self) -> impl Iterator<Item = (&[T], &[T])> {
        self.points.windows(2).map(|w| (w[0].as_slice(), w[1].as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult<T> {
    pub counterfactual: Vec<T>,
    pub path: CounterfactualPath<T>,
    pub valid: bool,
    /// Objective terms at the point each update was taken from.
    pub loss_trace: Vec<ObjectiveTerms<T>>,
    pub iterations: usize,
    pub target_class: u8,
    /// `F(τ|x^c)`.
    pub probability: T,
}

impl<T: Scalar> CounterfactualResult<T> {
    pub fn origin(&self) -> &[T] {
        self.path.start()
    }

    pub fn any_floored(&self) -> bool {
        self.loss_trace.iter().any(|t| t.floored)
    }
}

/// Per-path seed; path 0 uses the base seed itself.
pub fn path_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn jittered_start<T: Scalar>(x: &[T], sigma: f64, seed: u64) -> Vec<T> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + T::of(sigma * e)
        })
        .collect()
}

/// One run of the generator from `x` toward class `class`.
///
/// Never fails for lack of convergence: an unconverged run comes back with
/// `valid == false`.
pub fn generate_counterfactual<T: Scalar>(
    x: &[T],
    class: u8,
    cfg: &GeneratorConfig,
    classifier: &MlpClassifier<T>,
    vae: &VaeModel<T>,
) -> Result<CounterfactualResult<T>, GeneratorError> {
    cfg.validate()?;
    let objective = QuceObjective::new(x, class, cfg.lambda, classifier, vae)?;
    let threshold = T::of(cfg.threshold);
    let lr = T::of(cfg.learning_rate);

    let mut xc = jittered_start(x, cfg.jitter, cfg.seed);
    let mut points = vec![x.to_vec()];
    if cfg.jitter > 0.0 {
        points.push(xc.clone());
    }
    let mut adam = Adam::<T>::new(cfg.learning_rate, AdamConfig::default(), &[x.len()]);
    let mut trace = Vec::new();

    for _ in 0..cfg.max_iterations {
        if cfg.early_stop && classifier.class_probability(&xc, class)? >= threshold {
            break;
        }
        let (terms, grad) = objective.value_and_gradient(&xc)?;
        trace.push(terms);
        match cfg.optimizer {
            Optimizer::Adam => adam.step(&mut [&mut xc], &[&grad]),
            Optimizer::GradientDescent => {
                for (v, g) in xc.iter_mut().zip(&grad) {
                    *v = *v - lr * *g;
                }
            }
        }
        points.push(xc.clone());
    }

    let probability = classifier.class_probability(&xc, class)?;
    Ok(CounterfactualResult {
        valid: probability >= threshold,
        probability,
        iterations: trace.len(),
        loss_trace: trace,
        target_class: class,
        path: CounterfactualPath::new(points)?,
        counterfactual: xc,
    })
}

/// The set `C` of `k` independent runs for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSet<T> {
    pub members: Vec<CounterfactualResult<T>>,
    /// Set when no member is valid.
    pub all_invalid: bool,
}

impl<T: Scalar> CounterfactualSet<T> {
    pub fn new(members: Vec<CounterfactualResult<T>>) -> Result<Self, GeneratorError> {
        if members.is_empty() {
            return Err(GeneratorError::EmptySet);
        }
        let origin = members[0].origin();
        let class = members[0].target_class;
        if members.iter().any(|m| m.origin() != origin || m.target_class != class) {
            return Err(GeneratorError::InvalidConfig(
                "set members must share origin and target class".into(),
            ));
        }
        let all_invalid = members.iter().all(|m| !m.valid);
        Ok(Self { members, all_invalid })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn origin(&self) -> &[T] {
        self.members[0].origin()
    }

    pub fn target_class(&self) -> u8 {
        self.members[0].target_class
    }

    pub fn valid_members(&self) -> impl Iterator<Item = &CounterfactualResult<T>> {
        self.members.iter().filter(|m| m.valid)
    }
}

/// `k` runs with per-path seeds [`path_seed`]`(cfg.seed, i)`, in parallel.
pub fn generate_counterfactual_set<T: Scalar>(
    x: &[T],
    class: u8,
    k: usize,
    cfg: &GeneratorConfig,
    classifier: &MlpClassifier<T>,
    vae: &VaeModel<T>,
) -> Result<CounterfactualSet<T>, GeneratorError> {
    if k == 0 {
        return Err(GeneratorError::EmptySet);
    }
    let members = (0..k)
        .into_par_iter()
        .map(|i| {
            let cfg = cfg.clone().with_seed(path_seed(cfg.seed, i));
            generate_counterfactual(x, class, &cfg, classifier, vae)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let set = CounterfactualSet::new(members)?;
    if set.all_invalid {
        log::warn!("none of the {k} counterfactuals reached the target class");
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, ClassifierSpec, Dense, VaeSpec};
    use rand::Rng;
    use std::sync::Arc;

    fn flat_classifier(j: usize) -> MlpClassifier<f64> {
        MlpClassifier::from_layers(vec![Dense::zeros(j, 3), Dense::zeros(3, 1)], Activation::Tanh, 0.5).unwrap()
    }

    /// One-layer model `F(1|x) = σ(w·x + b)`.
    fn logistic(w: &[f64], b: f64) -> MlpClassifier<f64> {
        let layer = Dense {
            weights: Arc::new(Tensor::matrix(w.len(), 1, w.to_vec()).unwrap()),
            bias: Arc::new(Tensor::vector(vec![b])),
        };
        MlpClassifier::from_layers(vec![layer], Activation::Tanh, 0.5).unwrap()
    }

    fn vae(j: usize) -> VaeModel<f64> {
        let mut v = VaeModel::random(&VaeSpec::default(), j, 1).unwrap();
        v.freeze();
        v
    }

    #[test]
    fn proximity_only_objective_is_zero_at_origin() {
        let x = [0.4, -1.0, 2.0];
        let t = quce_objective(&x, &x, 1, [0.0, 1.0, 0.0], &flat_classifier(3), &vae(3)).unwrap();
        assert_eq!(t.total, 0.0);
        assert_eq!(t.proximity, 0.0);
    }

    #[test]
    fn prediction_only_objective_at_one_half() {
        let x = [0.4, -1.0];
        let t = quce_objective(&x, &[1.0, 1.0], 1, [1.0, 0.0, 0.0], &flat_classifier(2), &vae(2)).unwrap();
        assert!((t.total - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn objective_equals_independent_resummation() {
        let clf = MlpClassifier::<f64>::random(&ClassifierSpec::default(), 2, 3).unwrap();
        let v = vae(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let xc: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lambda = [
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
            ];
            for class in [0u8, 1] {
                let t = quce_objective(&x, &xc, class, lambda, &clf, &v).unwrap();
                let lpr = -clf.class_probability(&xc, class).unwrap().ln();
                let ld = 0.5 * ((xc[0] - x[0]).powi(2) + (xc[1] - x[1]).powi(2));
                let le = v.vae_loss(&xc, crate::models::VaeMode::Deterministic).unwrap().total;
                let expected = lambda[0] * lpr + lambda[1] * ld + lambda[2] * le;
                assert!((t.total - expected).abs() <= 1e-12 * expected.abs());
                assert!(!t.floored);
            }
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let clf = MlpClassifier::<f64>::random(&ClassifierSpec::default(), 3, 8).unwrap();
        let v = vae(3);
        let x = [0.2, -0.5, 1.0];
        let obj = QuceObjective::new(&x, 1, [1.0, 0.5, 0.5], &clf, &v).unwrap();
        let xc = [0.5, 0.1, -0.3];
        let (_, g) = obj.value_and_gradient(&xc).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut p = xc;
            let mut m = xc;
            p[j] += h;
            m[j] -= h;
            let fd = (obj.evaluate(&p).unwrap().total - obj.evaluate(&m).unwrap().total) / (2.0 * h);
            assert!((fd - g[j]).abs() / fd.abs().max(1e-8) <= 1e-5);
        }
    }

    #[test]
    fn floored_probability_is_clamped_and_flagged() {
        let clf = logistic(&[50.0, 0.0], 0.0);
        let x = [-2.0, 0.0];
        let obj = QuceObjective::new(&x, 1, [1.0, 0.0, 0.0], &clf, &vae(2)).unwrap();
        let (t, g) = obj.value_and_gradient(&x).unwrap();
        assert!(t.floored);
        assert!((t.prediction + PROBABILITY_FLOOR.ln()).abs() < 1e-12);
        // slope of −s = −50·x₀ pushes x₀ upward
        assert!((g[0] + 50.0).abs() < 1e-12);
    }

    #[test]
    fn already_in_target_class_gives_trivial_path() {
        let clf = logistic(&[1.0, 0.0], 0.0);
        let x = [2.0, 0.0];
        let r = generate_counterfactual(&x, 1, &GeneratorConfig::default(), &clf, &vae(2)).unwrap();
        assert_eq!(r.path.points(), &[x.to_vec()]);
        assert_eq!(r.counterfactual, x.to_vec());
        assert!(r.valid);
        assert_eq!(r.iterations, 0);
        assert!(r.loss_trace.is_empty());
    }

    #[test]
    fn proximity_only_descent_stays_at_origin() {
        let clf = logistic(&[1.0, -1.0], 0.3);
        let x = [-1.5, 0.7];
        for optimizer in [Optimizer::Adam, Optimizer::GradientDescent] {
            let cfg = GeneratorConfig {
                lambda: [0.0, 1.0, 0.0],
                optimizer,
                ..GeneratorConfig::default()
            };
            let r = generate_counterfactual(&x, 1, &cfg, &clf, &vae(2)).unwrap();
            let d = crate::scalar::l2_norm(&[r.counterfactual[0] - x[0], r.counterfactual[1] - x[1]]);
            assert!(d <= 1e-3);
            assert_eq!(r.iterations, 500);
            assert!(!r.valid);
        }
    }

    #[test]
    fn trace_and_path_lengths() {
        let clf = logistic(&[1.0, 0.0], 0.0);
        let x = [-1.0, 0.0];
        let cfg = GeneratorConfig::default().with_max_iterations(5);
        let mut cfg_no_stop = cfg.clone();
        cfg_no_stop.early_stop = false;
        let r = generate_counterfactual(&x, 1, &cfg_no_stop, &clf, &vae(2)).unwrap();
        assert_eq!(r.loss_trace.len(), r.iterations);
        assert_eq!(r.path.len(), r.iterations + 1);
        assert_eq!(r.path.end(), r.counterfactual.as_slice());
        assert_eq!(r.path.start(), &x);
        let jittered = generate_counterfactual(&x, 1, &cfg.with_jitter(0.1), &clf, &vae(2)).unwrap();
        assert_eq!(jittered.path.start(), &x);
        assert_eq!(jittered.path.len(), jittered.iterations + 2);
    }

    #[test]
    fn config_validation() {
        let ok = GeneratorConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ok.clone().with_lambda([0.0, 0.0, 0.0]).validate().is_err());
        assert!(ok.clone().with_lambda([-1.0, 0.0, 1.0]).validate().is_err());
        assert!(ok.clone().with_max_iterations(0).validate().is_err());
        assert!(GeneratorConfig {
            learning_rate: 1.5,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig { threshold: 1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn set_rejects_zero_members() {
        let clf = logistic(&[1.0, 0.0], 0.0);
        assert!(matches!(
            generate_counterfactual_set(&[0.0, 0.0], 1, 0, &GeneratorConfig::default(), &clf, &vae(2)),
            Err(GeneratorError::EmptySet)
        ));
    }

    #[test]
    fn path_seed_zero_is_identity() {
        assert_eq!(path_seed(123, 0), 123);
        assert_ne!(path_seed(123, 1), path_seed(123, 2));
    }
}
