//! Counterfactual paths with VAE-based uncertainty and path-integrated
//! gradient attributions.
//!
//! Everything is generic over [`Scalar`] (`f64`, `f32`); the aliases below
//! fix the scalar for the common case.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod evaluation;
pub mod explain;
pub mod generator;
pub mod models;
pub mod scalar;

pub use scalar::Scalar;

pub type Dataset = data::Dataset<f64>;
pub type Classifier = models::MlpClassifier<f64>;
pub type Vae = models::VaeModel<f64>;
pub type CfPath = generator::CounterfactualPath<f64>;
pub type Counterfactual = generator::CounterfactualResult<f64>;
pub type CfSet = generator::CounterfactualSet<f64>;
pub type Explanation = attribution::Explanation<f64>;
pub type Band = attribution::UncertaintyBand<f64>;

pub type Dataset32 = data::Dataset<f32>;
pub type Classifier32 = models::MlpClassifier<f32>;
pub type Vae32 = models::VaeModel<f32>;
