//! One instance in, one self-contained explanation document out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    agi_generate_and_attribute, explanation_uncertainty, exquce_attribution, exquce_uncertainty,
    featurewise_uncertainty, ig_attribution, path_attribution, AgiConfig, AttributionError, Explanation, RiemannConfig,
    UncertaintyBand,
};
use crate::data::{Normalizer, Split};
use crate::generator::{generate_counterfactual_set, GeneratorConfig, GeneratorError};
use crate::models::{check_dim, MlpClassifier, ModelError, VaeModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid explain configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMethod {
    #[default]
    Quce,
    Ig,
    Agi,
    Exquce,
}

impl std::str::FromStr for ExplainMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "quce" => Ok(Self::Quce),
            "ig" | "ig-quce" => Ok(Self::Ig),
            "agi" => Ok(Self::Agi),
            "exquce" => Ok(Self::Exquce),
            other => Err(format!("unknown method '{other}' (quce, ig, agi, exquce)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub method: ExplainMethod,
    /// Class to explain toward; the non-predicted class when absent.
    pub target_class: Option<u8>,
    pub generator: GeneratorConfig,
    /// Number of generator runs `k`; only exQUCE averages over more than one.
    pub paths: usize,
    pub riemann: RiemannConfig,
    pub agi: AgiConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            method: ExplainMethod::Quce,
            target_class: None,
            generator: GeneratorConfig::default(),
            paths: 1,
            riemann: RiemannConfig::default(),
            agi: AgiConfig::default(),
        }
    }
}

/// Where the explained instance came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRef {
    pub index: Option<usize>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub feature: String,
    pub attribution: f64,
    /// `Φ^{+ε_d}`.
    pub plus: Option<f64>,
    /// `Φ^{−ε_d}`.
    pub minus: Option<f64>,
    /// `ε_d` in normalised units.
    pub epsilon: Option<f64>,
    /// `ε_d` in original units.
    pub epsilon_original: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationDocument {
    pub schema_version: u32,
    pub method: ExplainMethod,
    pub seed: u64,
    pub instance: InstanceRef,
    pub feature_names: Vec<String>,
    pub origin: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub origin_normalized: Vec<f64>,
    pub counterfactual_normalized: Vec<f64>,
    pub predicted_class: u8,
    pub target_class: u8,
    pub valid: bool,
    /// `F(τ|x^c)`.
    pub target_probability: f64,
    pub paths: usize,
    pub valid_paths: usize,
    pub start_probability: f64,
    pub end_probability: f64,
    pub attribution_sum: f64,
    pub completeness_gap: f64,
    pub attributions: Vec<FeatureAttribution>,
    pub config: ExplainConfig,
}

impl ExplanationDocument {
    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }
}

struct Outcome {
    counterfactual: Vec<f64>,
    valid: bool,
    paths: usize,
    valid_paths: usize,
    explanation: Explanation<f64>,
    band: Option<UncertaintyBand<f64>>,
}

fn single_band(
    xc: &[f64],
    classifier: &MlpClassifier<f64>,
    vae: &VaeModel<f64>,
    tau: u8,
    cfg: &RiemannConfig,
) -> Result<UncertaintyBand<f64>, ExplainError> {
    let eps = featurewise_uncertainty(xc, vae)?;
    Ok(explanation_uncertainty(xc, &eps, classifier, tau, cfg)?)
}

/// Explains the normalised instance `x`.
pub fn explain_instance(
    x: &[f64],
    instance: InstanceRef,
    cfg: &ExplainConfig,
    classifier: &MlpClassifier<f64>,
    vae: &VaeModel<f64>,
    normalizer: &Normalizer,
    feature_names: &[String],
) -> Result<ExplanationDocument, ExplainError> {
    let j = classifier.n_features();
    check_dim(j, x.len())?;
    check_dim(j, vae.n_features())?;
    check_dim(j, normalizer.dim())?;
    check_dim(j, feature_names.len())?;
    if cfg.paths == 0 {
        return Err(ExplainError::InvalidConfig("at least one path is needed".into()));
    }
    if cfg.method != ExplainMethod::Exquce && cfg.paths > 1 {
        return Err(ExplainError::InvalidConfig("k > 1 needs the exquce method".into()));
    }
    let predicted = classifier.predict(x)?;
    let tau = match cfg.target_class {
        Some(c) if c > 1 => return Err(ExplainError::InvalidConfig(format!("target class {c}"))),
        Some(c) => c,
        None => 1 - predicted,
    };
    let rc = &cfg.riemann;

    let outcome = match cfg.method {
        ExplainMethod::Agi => {
            let r = agi_generate_and_attribute(x, tau, &cfg.agi, classifier, rc)?;
            Outcome {
                band: Some(single_band(&r.counterfactual, classifier, vae, tau, rc)?),
                valid_paths: usize::from(r.valid),
                paths: 1,
                valid: r.valid,
                counterfactual: r.counterfactual,
                explanation: r.explanation,
            }
        }
        ExplainMethod::Quce | ExplainMethod::Ig | ExplainMethod::Exquce => {
            let set = generate_counterfactual_set(x, tau, cfg.paths, &cfg.generator, classifier, vae)?;
            let valid_paths = set.valid_members().count();
            // The document shows the first valid member, or the first run.
            let shown = set.valid_members().next().unwrap_or(&set.members[0]);
            let (explanation, band) = match cfg.method {
                ExplainMethod::Quce => (
                    path_attribution(&shown.path, classifier, tau, rc)?,
                    Some(single_band(&shown.counterfactual, classifier, vae, tau, rc)?),
                ),
                ExplainMethod::Ig => (
                    ig_attribution(x, &shown.counterfactual, classifier, tau, rc)?,
                    Some(single_band(&shown.counterfactual, classifier, vae, tau, rc)?),
                ),
                _ => {
                    let band = if valid_paths > 0 {
                        Some(exquce_uncertainty(&set, vae, classifier, tau, rc)?)
                    } else {
                        log::warn!("no valid path among {}; uncertainty bands omitted", set.len());
                        None
                    };
                    (exquce_attribution(&set, classifier, tau, rc)?, band)
                }
            };
            Outcome {
                counterfactual: shown.counterfactual.clone(),
                valid: shown.valid,
                paths: set.len(),
                valid_paths,
                explanation,
                band,
            }
        }
    };

    let attributions = (0..j)
        .map(|i| {
            let band = outcome.band.as_ref();
            FeatureAttribution {
                feature: feature_names[i].clone(),
                attribution: outcome.explanation.attributions[i],
                plus: band.map(|b| b.plus[i]),
                minus: band.map(|b| b.minus[i]),
                epsilon: band.map(|b| b.epsilon[i]),
                epsilon_original: band.map(|b| b.epsilon[i] * normalizer.std[i]),
            }
        })
        .collect();
    Ok(ExplanationDocument {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        seed: cfg.generator.seed,
        instance,
        feature_names: feature_names.to_vec(),
        origin: normalizer.inverse(x),
        counterfactual: normalizer.inverse(&outcome.counterfactual),
        origin_normalized: x.to_vec(),
        target_probability: classifier.class_probability(&outcome.counterfactual, tau)?,
        counterfactual_normalized: outcome.counterfactual,
        predicted_class: predicted,
        target_class: tau,
        valid: outcome.valid,
        paths: outcome.paths,
        valid_paths: outcome.valid_paths,
        start_probability: outcome.explanation.start_probability,
        end_probability: outcome.explanation.end_probability,
        attribution_sum: outcome.explanation.total(),
        completeness_gap: outcome.explanation.completeness_gap(),
        attributions,
        config: cfg.clone(),
    })
}
