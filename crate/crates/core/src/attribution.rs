//! Path-integrated gradient attributions.
//!
//! A path is a polyline `⟨x_{Δ₀}, …, x_{Δₙ}⟩`. For each segment `a → b` the
//! attribution of feature `j` is `(b_j − a_j) · mean_k ∂F(τ | a + α_k (b − a)) / ∂x_j`
//! over `K` Riemann nodes `α_k`; a path's attribution is the sum over its
//! segments. By completeness the attributions sum to `F(τ|end) − F(τ|start)`
//! up to the Riemann error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{CounterfactualPath, CounterfactualSet, GeneratorError};
use crate::models::{check_dim, InputGradient, MlpClassifier, ModelError, VaeModel};
use crate::scalar::{l2_norm, pairwise_sum, Scalar};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("path has no points")]
    EmptyPath,
    #[error("counterfactual set is empty")]
    EmptySet,
    #[error("counterfactual set has no valid member")]
    NoValidMember,
    #[error("Riemann step count must be at least 1")]
    ZeroSteps,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

/// Where the Riemann nodes sit inside each of the `K` sub-intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RiemannRule {
    /// `α_k = k / K`, `k = 1..K`.
    #[default]
    Right,
    /// `α_k = (k − ½) / K`.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiemannConfig {
    pub steps: usize,
    pub rule: RiemannRule,
}

impl Default for RiemannConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            rule: RiemannRule::Right,
        }
    }
}

impl RiemannConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            rule: RiemannRule::Right,
        }
    }

    pub fn midpoint(steps: usize) -> Self {
        Self {
            steps,
            rule: RiemannRule::Midpoint,
        }
    }

    fn alpha<T: Scalar>(&self, k: usize) -> T {
        let kk = T::of(self.steps as f64);
        match self.rule {
            RiemannRule::Right => T::of((k + 1) as f64) / kk,
            RiemannRule::Midpoint => (T::of(k as f64) + T::half()) / kk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Quce,
    Ig,
    Agi,
    Exquce,
    ProximityOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Quce => "QUCE",
            Method::Ig => "IG-QUCE",
            Method::Agi => "AGI",
            Method::Exquce => "exQUCE",
            Method::ProximityOnly => "proximity-only",
        }
    }
}

/// Per-feature attribution vector with the endpoint probabilities it should
/// account for.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation<T> {
    pub attributions: Vec<T>,
    /// `F(τ|·)` at the path start (the instance).
    pub start_probability: T,
    /// `F(τ|·)` at the path end, or the mean over a set.
    pub end_probability: T,
    pub method: Method,
    pub feature_names: Vec<String>,
}

impl<T: Scalar> Explanation<T> {
    fn new(attributions: Vec<T>, start_probability: T, end_probability: T, method: Method) -> Self {
        let feature_names = (0..attributions.len()).map(|j| format!("x{j}")).collect();
        Self {
            attributions,
            start_probability,
            end_probability,
            method,
            feature_names,
        }
    }

    pub fn with_feature_names(mut self, names: &[String]) -> Self {
        if names.len() == self.attributions.len() {
            self.feature_names = names.to_vec();
        }
        self
    }

    pub fn total(&self) -> T {
        pairwise_sum(&self.attributions)
    }

    /// `|ΣΦ − (F_end − F_start)|`.
    pub fn completeness_gap(&self) -> T {
        (self.total() - (self.end_probability - self.start_probability)).abs()
    }
}

/// `Φ^{+ε_d}` and `Φ^{−ε_d}` with the `ε_d` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBand<T> {
    pub plus: Vec<T>,
    pub minus: Vec<T>,
    pub epsilon: Vec<T>,
}

/// Anything exposing `F(class|x)` and its input gradient in batches.
pub trait DifferentiableModel<T>: Sync {
    fn n_features(&self) -> usize;
    fn probability(&self, x: &[T], class: u8) -> Result<T, ModelError>;
    /// Evaluator for `rows` stacked points at a time.
    fn batch_gradient(&self, class: u8, rows: usize) -> Result<Box<dyn BatchGradient<T> + '_>, ModelError>;
}

pub trait BatchGradient<T>: Send + Sync {
    fn rows(&self) -> usize;
    /// Row-major `∂F/∂x` for `rows()` row-major points.
    fn gradients(&self, points: &[T]) -> Result<Vec<T>, ModelError>;
}

impl<T: Scalar> BatchGradient<T> for InputGradient<T> {
    fn rows(&self) -> usize {
        InputGradient::rows(self)
    }

    fn gradients(&self, points: &[T]) -> Result<Vec<T>, ModelError> {
        Ok(self.value_and_gradient(points)?.1)
    }
}

impl<T: Scalar> DifferentiableModel<T> for MlpClassifier<T> {
    fn n_features(&self) -> usize {
        MlpClassifier::n_features(self)
    }

    fn probability(&self, x: &[T], class: u8) -> Result<T, ModelError> {
        self.class_probability(x, class)
    }

    fn batch_gradient(&self, class: u8, rows: usize) -> Result<Box<dyn BatchGradient<T> + '_>, ModelError> {
        Ok(Box::new(self.batch_input_gradient(class, rows)?))
    }
}

/// `F(1|x) = w·x + b` with an identity head, `F(0|x) = 1 − F(1|x)`.
/// Not a probability model; its constant gradient makes Riemann sums exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

struct ConstantGradient<T> {
    rows: usize,
    grad: Vec<T>,
}

impl<T: Scalar> BatchGradient<T> for ConstantGradient<T> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn gradients(&self, points: &[T]) -> Result<Vec<T>, ModelError> {
        check_dim(self.rows * self.grad.len(), points.len())?;
        Ok(self.grad.repeat(self.rows))
    }
}

impl<T: Scalar> DifferentiableModel<T> for LinearModel<T> {
    fn n_features(&self) -> usize {
        self.weights.len()
    }

    fn probability(&self, x: &[T], class: u8) -> Result<T, ModelError> {
        check_dim(self.weights.len(), x.len())?;
        let s = self.weights.iter().zip(x).fold(self.bias, |acc, (&w, &v)| acc + w * v);
        match class {
            1 => Ok(s),
            0 => Ok(T::one() - s),
            _ => Err(ModelError::BadClass(class)),
        }
    }

    fn batch_gradient(&self, class: u8, rows: usize) -> Result<Box<dyn BatchGradient<T> + '_>, ModelError> {
        let grad = match class {
            1 => self.weights.clone(),
            0 => self.weights.iter().map(|&w| -w).collect(),
            _ => return Err(ModelError::BadClass(class)),
        };
        Ok(Box::new(ConstantGradient { rows, grad }))
    }
}

const CHUNK: usize = 256;

/// Batched `∇F(τ|·)` evaluator reused across the segments of a path.
struct SegmentIntegrator<'m, T, M: ?Sized> {
    classifier: &'m M,
    class: u8,
    cfg: RiemannConfig,
    full: Box<dyn BatchGradient<T> + 'm>,
    tail: Option<Box<dyn BatchGradient<T> + 'm>>,
}

impl<'m, T: Scalar, M: DifferentiableModel<T> + ?Sized> SegmentIntegrator<'m, T, M> {
    fn new(classifier: &'m M, class: u8, cfg: RiemannConfig) -> Result<Self, AttributionError> {
        if cfg.steps == 0 {
            return Err(AttributionError::ZeroSteps);
        }
        let chunk = cfg.steps.min(CHUNK);
        let rem = cfg.steps % chunk;
        Ok(Self {
            classifier,
            class,
            cfg,
            full: classifier.batch_gradient(class, chunk)?,
            tail: if rem > 0 {
                Some(classifier.batch_gradient(class, rem)?)
            } else {
                None
            },
        })
    }

    fn integrate(&self, a: &[T], b: &[T]) -> Result<Vec<T>, AttributionError> {
        let j = self.classifier.n_features();
        check_dim(j, a.len())?;
        check_dim(j, b.len())?;
        let delta: Vec<T> = b.iter().zip(a).map(|(&bv, &av)| bv - av).collect();
        if delta.iter().all(|d| d.is_zero()) {
            return Ok(vec![T::zero(); j]);
        }
        // columns[j][k] = ∂F/∂x_j at node k
        let mut columns: Vec<Vec<T>> = vec![Vec::with_capacity(self.cfg.steps); j];
        let mut k0 = 0;
        while k0 < self.cfg.steps {
            let eval = if self.cfg.steps - k0 >= self.full.rows() {
                self.full.as_ref()
            } else {
                self.tail.as_deref().expect("remainder graph")
            };
            let rows = eval.rows();
            let mut pts = Vec::with_capacity(rows * j);
            for k in k0..k0 + rows {
                let alpha: T = self.cfg.alpha(k);
                pts.extend(a.iter().zip(&delta).map(|(&av, &d)| av + alpha * d));
            }
            let grad = eval.gradients(&pts)?;
            for row in grad.chunks(j) {
                for (col, &g) in columns.iter_mut().zip(row) {
                    col.push(g);
                }
            }
            k0 += rows;
        }
        let kk = T::of(self.cfg.steps as f64);
        Ok(columns
            .iter()
            .zip(&delta)
            .map(|(col, &d)| d * (pairwise_sum(col) / kk))
            .collect())
    }

    fn integrate_path(&self, path: &CounterfactualPath<T>) -> Result<Vec<T>, AttributionError> {
        let j = self.classifier.n_features();
        check_dim(j, path.dim())?;
        let pieces = path
            .segments()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(a, b)| self.integrate(a, b))
            .collect::<Result<Vec<_>, _>>()?;
        let mut total = vec![T::zero(); j];
        for piece in &pieces {
            for (t, &v) in total.iter_mut().zip(piece) {
                *t = *t + v;
            }
        }
        Ok(total)
    }

    fn probability(&self, x: &[T]) -> Result<T, AttributionError> {
        Ok(self.classifier.probability(x, self.class)?)
    }
}

/// Riemann approximation of the straight-line integral from `a` to `b`.
pub fn segment_attribution<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    a: &[T],
    b: &[T],
    classifier: &M,
    class: u8,
    cfg: &RiemannConfig,
) -> Result<Vec<T>, AttributionError> {
    SegmentIntegrator::new(classifier, class, *cfg)?.integrate(a, b)
}

/// Sum of segment attributions along a generated path.
pub fn path_attribution<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    path: &CounterfactualPath<T>,
    classifier: &M,
    class: u8,
    cfg: &RiemannConfig,
) -> Result<Explanation<T>, AttributionError> {
    path_attribution_as(path, classifier, class, cfg, Method::Quce)
}

pub(crate) fn path_attribution_as<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    path: &CounterfactualPath<T>,
    classifier: &M,
    class: u8,
    cfg: &RiemannConfig,
    method: Method,
) -> Result<Explanation<T>, AttributionError> {
    if path.is_empty() {
        return Err(AttributionError::EmptyPath);
    }
    let integrator = SegmentIntegrator::new(classifier, class, *cfg)?;
    let phi = integrator.integrate_path(path)?;
    Ok(Explanation::new(
        phi,
        integrator.probability(path.start())?,
        integrator.probability(path.end())?,
        method,
    ))
}

/// Straight-line attribution from the instance to its counterfactual.
pub fn ig_attribution<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    x: &[T],
    xc: &[T],
    classifier: &M,
    class: u8,
    cfg: &RiemannConfig,
) -> Result<Explanation<T>, AttributionError> {
    let path = CounterfactualPath::straight(x, xc)?;
    path_attribution_as(&path, classifier, class, cfg, Method::Ig)
}

/// Mean path attribution over every member of `set`.
pub fn exquce_attribution<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    set: &CounterfactualSet<T>,
    classifier: &M,
    class: u8,
    cfg: &RiemannConfig,
) -> Result<Explanation<T>, AttributionError> {
    if set.is_empty() {
        return Err(AttributionError::EmptySet);
    }
    let integrator = SegmentIntegrator::new(classifier, class, *cfg)?;
    let j = classifier.n_features();
    let k = T::of(set.len() as f64);
    let mut sum = vec![T::zero(); j];
    let mut end = T::zero();
    for member in &set.members {
        let phi = integrator.integrate_path(&member.path)?;
        for (s, v) in sum.iter_mut().zip(phi) {
            *s = *s + v;
        }
        end = end + integrator.probability(member.path.end())?;
    }
    Ok(Explanation::new(
        sum.into_iter().map(|v| v / k).collect(),
        integrator.probability(set.origin())?,
        end / k,
        Method::Exquce,
    ))
}

/// `ε_d = |x^c − decode(μ(x^c))|`.
pub fn featurewise_uncertainty<T: Scalar>(xc: &[T], vae: &VaeModel<T>) -> Result<Vec<T>, AttributionError> {
    let xhat = vae.reconstruct(xc)?;
    Ok(xc.iter().zip(&xhat).map(|(&a, &b)| (a - b).abs()).collect())
}

/// Attributions of the moves `x^c → x^c + ε_d` and `x^c → x^c − ε_d`.
pub fn explanation_uncertainty<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    xc: &[T],
    epsilon: &[T],
    classifier: &M,
    class: u8,
    cfg: &RiemannConfig,
) -> Result<UncertaintyBand<T>, AttributionError> {
    check_dim(xc.len(), epsilon.len())?;
    let integrator = SegmentIntegrator::new(classifier, class, *cfg)?;
    let up: Vec<T> = xc.iter().zip(epsilon).map(|(&a, &e)| a + e).collect();
    let down: Vec<T> = xc.iter().zip(epsilon).map(|(&a, &e)| a - e).collect();
    Ok(UncertaintyBand {
        plus: integrator.integrate(xc, &up)?,
        minus: integrator.integrate(xc, &down)?,
        epsilon: epsilon.to_vec(),
    })
}

/// Mean uncertainty band over the valid members of `set`, each with its own
/// `ε_d`.
pub fn exquce_uncertainty<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    set: &CounterfactualSet<T>,
    vae: &VaeModel<T>,
    classifier: &M,
    class: u8,
    cfg: &RiemannConfig,
) -> Result<UncertaintyBand<T>, AttributionError> {
    if set.is_empty() {
        return Err(AttributionError::EmptySet);
    }
    let j = classifier.n_features();
    let mut plus = vec![T::zero(); j];
    let mut minus = vec![T::zero(); j];
    let mut eps = vec![T::zero(); j];
    let mut n = 0usize;
    for member in set.valid_members() {
        let e = featurewise_uncertainty(&member.counterfactual, vae)?;
        let band = explanation_uncertainty(&member.counterfactual, &e, classifier, class, cfg)?;
        for i in 0..j {
            plus[i] = plus[i] + band.plus[i];
            minus[i] = minus[i] + band.minus[i];
            eps[i] = eps[i] + band.epsilon[i];
        }
        n += 1;
    }
    if n == 0 {
        return Err(AttributionError::NoValidMember);
    }
    let nn = T::of(n as f64);
    let mean = |v: Vec<T>| v.into_iter().map(|x| x / nn).collect();
    Ok(UncertaintyBand {
        plus: mean(plus),
        minus: mean(minus),
        epsilon: mean(eps),
    })
}

/// Settings for the adversarial-path baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgiConfig {
    pub steps: usize,
    pub step_size: f64,
    pub threshold: f64,
}

impl Default for AgiConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.05,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgiResult<T> {
    pub path: CounterfactualPath<T>,
    pub explanation: Explanation<T>,
    pub counterfactual: Vec<T>,
    pub valid: bool,
    pub probability: T,
}

/// Normalised steepest descent on `−log F(τ|·)` from `x`, stopping once
/// `F(τ|·) ≥ ϑ`, followed by path attribution along the visited points.
pub fn agi_generate_and_attribute<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    x: &[T],
    class: u8,
    agi: &AgiConfig,
    classifier: &M,
    cfg: &RiemannConfig,
) -> Result<AgiResult<T>, AttributionError> {
    check_dim(classifier.n_features(), x.len())?;
    let grad_f = classifier.batch_gradient(class, 1)?;
    let threshold = T::of(agi.threshold);
    let eta = T::of(agi.step_size);
    let floor = T::of(crate::generator::PROBABILITY_FLOOR);
    let mut xt = x.to_vec();
    let mut points = vec![xt.clone()];
    for _ in 0..agi.steps {
        let p = classifier.probability(&xt, class)?;
        if p >= threshold {
            break;
        }
        let dp = grad_f.gradients(&xt)?;
        // ∇(−log F) = −∇F / F
        let g: Vec<T> = dp.iter().map(|&d| -d / p.max(floor)).collect();
        let norm = l2_norm(&g);
        if !(norm > T::zero()) || !norm.is_finite() {
            break;
        }
        for (v, &gv) in xt.iter_mut().zip(&g) {
            *v = *v - eta * gv / norm;
        }
        points.push(xt.clone());
    }
    let path = CounterfactualPath::new(points)?;
    let explanation = path_attribution_as(&path, classifier, class, cfg, Method::Agi)?;
    let probability = classifier.probability(&xt, class)?;
    Ok(AgiResult {
        path,
        explanation,
        valid: probability >= threshold,
        probability,
        counterfactual: xt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::models::{Activation, ClassifierSpec, Dense};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn logistic(w: &[f64], b: f64) -> MlpClassifier<f64> {
        let layer = Dense {
            weights: Arc::new(Tensor::matrix(w.len(), 1, w.to_vec()).unwrap()),
            bias: Arc::new(Tensor::vector(vec![b])),
        };
        MlpClassifier::from_layers(vec![layer], Activation::Tanh, 0.5).unwrap()
    }

    #[test]
    fn zero_displacement_gives_zero() {
        let m = MlpClassifier::<f64>::random(&ClassifierSpec::default(), 3, 1).unwrap();
        let a = [0.1, 0.2, 0.3];
        let phi = segment_attribution(&a, &a, &m, 1, &RiemannConfig::new(10)).unwrap();
        assert_eq!(phi, vec![0.0; 3]);
    }

    #[test]
    fn single_point_path_is_zero_explanation() {
        let m = MlpClassifier::<f64>::random(&ClassifierSpec::default(), 2, 1).unwrap();
        let path = CounterfactualPath::new(vec![vec![0.5, 0.5]]).unwrap();
        let e = path_attribution(&path, &m, 1, &RiemannConfig::default()).unwrap();
        assert_eq!(e.attributions, vec![0.0, 0.0]);
        assert_eq!(e.completeness_gap(), 0.0);
        let path = CounterfactualPath::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let e = path_attribution(&path, &m, 1, &RiemannConfig::default()).unwrap();
        assert!(e.completeness_gap() <= 1e-12);
    }

    #[test]
    fn chunked_integration_matches_unchunked_sum() {
        // K not a multiple of the chunk size exercises the tail graph.
        let m = MlpClassifier::<f64>::random(&ClassifierSpec::default(), 2, 9).unwrap();
        let a = [-1.0, 0.5];
        let b = [1.5, -0.2];
        let k = CHUNK + 37;
        let phi = segment_attribution(&a, &b, &m, 1, &RiemannConfig::new(k)).unwrap();
        let single = m.input_gradient(1).unwrap();
        let mut sums = [0.0; 2];
        for i in 1..=k {
            let t = i as f64 / k as f64;
            let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            let (_, g) = single.value_and_gradient(&p).unwrap();
            sums[0] += g[0];
            sums[1] += g[1];
        }
        for jj in 0..2 {
            let expected = (b[jj] - a[jj]) * sums[jj] / k as f64;
            assert!((phi[jj] - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn agi_from_target_class_is_trivial() {
        let m = logistic(&[1.0, 0.0], 0.0);
        let r =
            agi_generate_and_attribute(&[1.0, 0.0], 1, &AgiConfig::default(), &m, &RiemannConfig::default()).unwrap();
        assert_eq!(r.path.len(), 1);
        assert!(r.valid);
        assert_eq!(r.explanation.attributions, vec![0.0, 0.0]);
    }

    #[test]
    fn agi_steps_have_fixed_length() {
        let m = logistic(&[2.0, 1.0], -0.5);
        let cfg = AgiConfig::default();
        let r = agi_generate_and_attribute(&[-1.0, -1.0], 1, &cfg, &m, &RiemannConfig::new(50)).unwrap();
        assert!(r.valid);
        for (a, b) in r.path.segments() {
            let d = l2_norm(&[b[0] - a[0], b[1] - a[1]]);
            assert!((d - cfg.step_size).abs() < 1e-12);
        }
    }

    #[test]
    fn exquce_rejects_empty_and_invalid_sets() {
        let m = logistic(&[1.0, 0.0], 0.0);
        let eps = [0.1, 0.2];
        assert!(explanation_uncertainty(&[0.0], &eps, &m, 1, &RiemannConfig::default()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let band = explanation_uncertainty(&[0.3, 0.4], &e, &m, 1, &RiemannConfig::default()).unwrap();
        assert_eq!(band.epsilon, e);
    }

    #[test]
    fn zero_riemann_steps_is_an_error() {
        let m = logistic(&[1.0, 0.0], 0.0);
        assert!(matches!(
            segment_attribution(&[0.0, 0.0], &[1.0, 1.0], &m, 1, &RiemannConfig::new(0)),
            Err(AttributionError::ZeroSteps)
        ));
    }
}
