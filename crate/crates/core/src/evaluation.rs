//! Benchmark harness: path uncertainty, counterfactual VAE loss,
//! reconstruction error and deletion score per method and split.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    agi_generate_and_attribute, ig_attribution, path_attribution, AgiConfig, AttributionError, DifferentiableModel,
    Method, RiemannConfig,
};
use crate::data::{Dataset, Split};
use crate::generator::{generate_counterfactual, CounterfactualPath, GeneratorConfig, GeneratorError};
use crate::models::{check_dim, MlpClassifier, ModelError, VaeMode, VaeModel};
use crate::scalar::{pairwise_sum, Scalar};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("path has no points")]
    EmptyPath,
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error("no valid counterfactual among {0} candidates")]
    NoValid(usize),
    #[error("VAE must be frozen before evaluation")]
    UnfrozenVae,
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

fn mean_std<T: Scalar>(values: &[T]) -> (T, T) {
    let n = T::of(values.len() as f64);
    let mean = pairwise_sum(values) / n;
    let sq: Vec<T> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    (mean, (pairwise_sum(&sq) / n).sqrt())
}

/// Point at global parameter `alpha ∈ [0, 1)` of the polyline, with every
/// segment taking an equal share of the parameter range.
fn polyline_point<T: Scalar>(points: &[Vec<T>], alpha: f64) -> Vec<T> {
    if points.len() == 1 {
        return points[0].clone();
    }
    let u = alpha * (points.len() - 1) as f64;
    let seg = (u.floor() as usize).min(points.len() - 2);
    let frac = T::of(u - seg as f64);
    let (a, b) = (&points[seg], &points[seg + 1]);
    a.iter().zip(b).map(|(&av, &bv)| av + frac * (bv - av)).collect()
}

/// Mean and population standard deviation of the deterministic VAE loss at
/// `steps` points `α = i/steps`, `i = 0..steps`, along the path.
pub fn path_uncertainty<T: Scalar>(
    path: &CounterfactualPath<T>,
    vae: &VaeModel<T>,
    steps: usize,
) -> Result<(T, T), EvaluationError> {
    if path.is_empty() {
        return Err(EvaluationError::EmptyPath);
    }
    if steps == 0 {
        return Err(EvaluationError::ZeroSteps);
    }
    if path.len() == 1 {
        let loss = vae.vae_loss(path.start(), VaeMode::Deterministic)?.total;
        return Ok((loss, T::zero()));
    }
    let losses = (0..steps)
        .into_par_iter()
        .map(|i| {
            let p = polyline_point(path.points(), i as f64 / steps as f64);
            Ok(vae.vae_loss(&p, VaeMode::Deterministic)?.total)
        })
        .collect::<Result<Vec<T>, EvaluationError>>()?;
    Ok(mean_std(&losses))
}

/// A generated counterfactual as seen by the set metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub point: Vec<T>,
    pub valid: bool,
}

/// Mean over the valid candidates, with how many were used and skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidMean {
    pub mean: f64,
    pub count: usize,
    pub excluded: usize,
}

fn valid_mean<T: Scalar>(
    set: &[Candidate<T>],
    f: impl Fn(&[T]) -> Result<T, EvaluationError> + Sync,
) -> Result<ValidMean, EvaluationError> {
    let values = set
        .iter()
        .filter(|c| c.valid)
        .map(|c| f(&c.point))
        .collect::<Result<Vec<T>, _>>()?;
    if values.is_empty() {
        return Err(EvaluationError::NoValid(set.len()));
    }
    Ok(ValidMean {
        mean: (pairwise_sum(&values) / T::of(values.len() as f64)).as_f64(),
        count: values.len(),
        excluded: set.len() - values.len(),
    })
}

/// Mean deterministic VAE loss of the valid counterfactuals.
pub fn set_counterfactual_uncertainty<T: Scalar>(
    set: &[Candidate<T>],
    vae: &VaeModel<T>,
) -> Result<ValidMean, EvaluationError> {
    valid_mean(set, |p| Ok(vae.vae_loss(p, VaeMode::Deterministic)?.total))
}

/// Mean of `Σ_j |x^c_j − x̂^c_j|` over the valid counterfactuals.
pub fn set_reconstruction_error<T: Scalar>(
    set: &[Candidate<T>],
    vae: &VaeModel<T>,
) -> Result<ValidMean, EvaluationError> {
    valid_mean(set, |p| {
        let eps = crate::attribution::featurewise_uncertainty(p, vae)?;
        Ok(pairwise_sum(&eps))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve<T> {
    /// `F(ŷ | x with the top-i features replaced)`, `i = 0..=J`.
    pub probabilities: Vec<T>,
    pub score: T,
    /// Feature indices in deletion order.
    pub order: Vec<usize>,
}

/// Features ordered by attribution, largest first, ties by index.
pub fn deletion_order<T: Scalar>(attributions: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attributions.len()).collect();
    order.sort_by(|&a, &b| {
        attributions[b]
            .partial_cmp(&attributions[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Deletion game on the class the model predicts for `x`.
pub fn deletion_score<T: Scalar, M: DifferentiableModel<T> + ?Sized>(
    x: &[T],
    attributions: &[T],
    classifier: &M,
    baseline: &[T],
    predicted: u8,
) -> Result<DeletionCurve<T>, EvaluationError> {
    let j = classifier.n_features();
    check_dim(j, x.len())?;
    check_dim(j, attributions.len())?;
    check_dim(j, baseline.len())?;
    let order = deletion_order(attributions);
    let mut current = x.to_vec();
    let mut probabilities = Vec::with_capacity(j + 1);
    probabilities.push(classifier.probability(&current, predicted)?);
    for &f in &order {
        current[f] = baseline[f];
        probabilities.push(classifier.probability(&current, predicted)?);
    }
    let score = pairwise_sum(&probabilities) / T::of((j + 1) as f64);
    Ok(DeletionCurve {
        probabilities,
        score,
        order,
    })
}

/// Methods the benchmark can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMethod {
    Quce,
    IgQuce,
    Agi,
    ProximityOnly,
}

impl BenchmarkMethod {
    pub const ALL: [BenchmarkMethod; 4] = [
        BenchmarkMethod::Quce,
        BenchmarkMethod::IgQuce,
        BenchmarkMethod::Agi,
        BenchmarkMethod::ProximityOnly,
    ];

    pub fn name(self) -> &'static str {
        self.method().name()
    }

    pub fn method(self) -> Method {
        match self {
            BenchmarkMethod::Quce => Method::Quce,
            BenchmarkMethod::IgQuce => Method::Ig,
            BenchmarkMethod::Agi => Method::Agi,
            BenchmarkMethod::ProximityOnly => Method::ProximityOnly,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "quce" => Some(Self::Quce),
            "ig" | "ig-quce" => Some(Self::IgQuce),
            "agi" => Some(Self::Agi),
            "proximity" | "proximity-only" => Some(Self::ProximityOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Instances sampled per split (capped at the split size).
    pub instances: usize,
    /// Interpolation points per path for path uncertainty.
    pub steps: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub riemann: RiemannConfig,
    pub agi: AgiConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            steps: 1000,
            seed: 0,
            generator: GeneratorConfig::default(),
            riemann: RiemannConfig::default(),
            agi: AgiConfig::default(),
        }
    }
}

/// Everything measured for one instance under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome<T> {
    pub index: usize,
    pub target_class: u8,
    pub counterfactual: Candidate<T>,
    pub path_uncertainty: (T, T),
    pub attributions: Vec<T>,
    pub deletion: DeletionCurve<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: BenchmarkMethod,
    pub split: Split,
    pub instances: usize,
    pub valid: usize,
    pub path_uncertainty_mean: f64,
    /// Across instances, of the per-path means.
    pub path_uncertainty_std: f64,
    /// Over valid counterfactuals only; `None` when there are none.
    pub counterfactual_vae_loss: Option<f64>,
    pub reconstruction_error: Option<f64>,
    pub deletion_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub config: BenchmarkConfig,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, method: BenchmarkMethod, split: Split) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.split == split)
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    /// Aligned text table, one row per method and split.
    pub fn to_table(&self) -> String {
        let header = [
            "method",
            "split",
            "n",
            "valid",
            "path uncertainty",
            "cf VAE loss",
            "recon. error",
            "deletion",
        ];
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let cells: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.name().to_string(),
                    format!("{:?}", r.split).to_lowercase(),
                    r.instances.to_string(),
                    r.valid.to_string(),
                    format!("{:.4} ± {:.4}", r.path_uncertainty_mean, r.path_uncertainty_std),
                    opt(r.counterfactual_vae_loss),
                    opt(r.reconstruction_error),
                    format!("{:.4}", r.deletion_score),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let padded: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i < 2 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// Indices of the instances a split contributes, sorted.
pub fn sample_instances(n: usize, wanted: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, wanted.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// One method on one instance, toward the class the model does not predict.
pub fn run_instance<T: Scalar>(
    x: &[T],
    method: BenchmarkMethod,
    cfg: &BenchmarkConfig,
    classifier: &MlpClassifier<T>,
    vae: &VaeModel<T>,
) -> Result<InstanceOutcome<T>, EvaluationError> {
    let predicted = classifier.predict(x)?;
    let tau = 1 - predicted;
    let generate = |gen: &GeneratorConfig| generate_counterfactual(x, tau, gen, classifier, vae);
    let (path, candidate, attributions) = match method {
        BenchmarkMethod::Quce | BenchmarkMethod::ProximityOnly => {
            let mut gen = cfg.generator.clone();
            if method == BenchmarkMethod::ProximityOnly {
                gen.lambda[2] = 0.0;
            }
            let r = generate(&gen)?;
            let e = path_attribution(&r.path, classifier, tau, &cfg.riemann)?;
            let c = Candidate {
                point: r.counterfactual,
                valid: r.valid,
            };
            (r.path, c, e.attributions)
        }
        BenchmarkMethod::IgQuce => {
            let r = generate(&cfg.generator)?;
            let e = ig_attribution(x, &r.counterfactual, classifier, tau, &cfg.riemann)?;
            let path = CounterfactualPath::straight(x, &r.counterfactual)?;
            let c = Candidate {
                point: r.counterfactual,
                valid: r.valid,
            };
            (path, c, e.attributions)
        }
        BenchmarkMethod::Agi => {
            let r = agi_generate_and_attribute(x, tau, &cfg.agi, classifier, &cfg.riemann)?;
            let c = Candidate {
                point: r.counterfactual,
                valid: r.valid,
            };
            (r.path, c, r.explanation.attributions)
        }
    };
    let path_uncertainty = path_uncertainty(&path, vae, cfg.steps)?;
    let baseline = vec![T::zero(); x.len()];
    let deletion = deletion_score(x, &attributions, classifier, &baseline, predicted)?;
    Ok(InstanceOutcome {
        index: 0,
        target_class: tau,
        counterfactual: candidate,
        path_uncertainty,
        attributions,
        deletion,
    })
}

fn aggregate<T: Scalar>(
    method: BenchmarkMethod,
    split: Split,
    outcomes: &[InstanceOutcome<T>],
    vae: &VaeModel<T>,
) -> Result<MetricRow, EvaluationError> {
    let path_means: Vec<T> = outcomes.iter().map(|o| o.path_uncertainty.0).collect();
    let (pu_mean, pu_std) = mean_std(&path_means);
    let candidates: Vec<Candidate<T>> = outcomes.iter().map(|o| o.counterfactual.clone()).collect();
    let valid = candidates.iter().filter(|c| c.valid).count();
    let optional = |r: Result<ValidMean, EvaluationError>| match r {
        Ok(v) => Ok(Some(v.mean)),
        Err(EvaluationError::NoValid(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let deletion: Vec<T> = outcomes.iter().map(|o| o.deletion.score).collect();
    Ok(MetricRow {
        method,
        split,
        instances: outcomes.len(),
        valid,
        path_uncertainty_mean: pu_mean.as_f64(),
        path_uncertainty_std: pu_std.as_f64(),
        counterfactual_vae_loss: optional(set_counterfactual_uncertainty(&candidates, vae))?,
        reconstruction_error: optional(set_reconstruction_error(&candidates, vae))?,
        deletion_score: mean_std(&deletion).0.as_f64(),
    })
}

/// Runs `methods` on up to `cfg.instances` sampled rows of each split.
///
/// Rows are sampled with `cfg.seed` salted by the split, so train and test
/// draws are independent but reproducible.
pub fn run_benchmark<T: Scalar>(
    splits: &[&Dataset<T>],
    methods: &[BenchmarkMethod],
    cfg: &BenchmarkConfig,
    classifier: &MlpClassifier<T>,
    vae: &VaeModel<T>,
) -> Result<MetricReport, EvaluationError> {
    if !vae.is_frozen() {
        return Err(EvaluationError::UnfrozenVae);
    }
    if methods.is_empty() || splits.is_empty() {
        return Err(EvaluationError::InvalidConfig("no methods or splits".into()));
    }
    if cfg.instances == 0 {
        return Err(EvaluationError::InvalidConfig("instances must be at least 1".into()));
    }
    cfg.generator.validate()?;
    let mut rows = Vec::new();
    for (s, data) in splits.iter().enumerate() {
        check_dim(classifier.n_features(), data.n_features())?;
        let idx = sample_instances(data.len(), cfg.instances, cfg.seed.wrapping_add(s as u64));
        for &method in methods {
            let outcomes = idx
                .par_iter()
                .map(|&i| {
                    let mut o = run_instance(data.row(i), method, cfg, classifier, vae)?;
                    o.index = i;
                    Ok(o)
                })
                .collect::<Result<Vec<_>, EvaluationError>>()?;
            log::info!("{} on {:?}: {} instances", method.name(), data.split, outcomes.len());
            rows.push(aggregate(method, data.split, &outcomes, vae)?);
        }
    }
    Ok(MetricReport {
        schema_version: crate::explain::SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
    })
}
