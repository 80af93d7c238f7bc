//! Versioned JSON documents for trained models.
//!
//! Parameters are written as `f64` decimals in shortest round-trip form, so
//! reading a document back reproduces every stored value bit for bit.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::{Activation, Dense, MlpClassifier, ModelError, VaeModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    /// `[inputs][outputs]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<LayerDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
}

impl ModelDocument {
    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let doc: Self = serde_json::from_str(s)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported format_version {}",
                doc.format_version
            )));
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn layer_doc<T: Scalar>(l: &Dense<T>) -> LayerDocument {
    let m = l.outputs();
    LayerDocument {
        weights: l
            .weights
            .data()
            .chunks(m)
            .map(|row| row.iter().map(|v| v.as_f64()).collect())
            .collect(),
        bias: l.bias.data().iter().map(|v| v.as_f64()).collect(),
    }
}

fn layer_from_doc<T: Scalar>(d: &LayerDocument) -> Result<Dense<T>, ModelError> {
    let inputs = d.weights.len();
    let outputs = d.bias.len();
    if inputs == 0 || d.weights.iter().any(|r| r.len() != outputs) {
        return Err(ModelError::Format("ragged or empty weight matrix".into()));
    }
    let w = d.weights.iter().flatten().map(|&v| T::of(v)).collect();
    Ok(Dense {
        weights: Arc::new(Tensor::matrix(inputs, outputs, w)?),
        bias: Arc::new(Tensor::vector(d.bias.iter().map(|&v| T::of(v)).collect())),
    })
}

impl<T: Scalar> MlpClassifier<T> {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Mlp,
            widths: self.widths(),
            activation: self.activation(),
            layers: self.layers().iter().map(layer_doc).collect(),
            threshold: Some(self.threshold().as_f64()),
            latent_dim: None,
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self, ModelError> {
        if doc.kind != ModelKind::Mlp {
            return Err(ModelError::Format("expected kind \"mlp\"".into()));
        }
        let layers = doc.layers.iter().map(layer_from_doc).collect::<Result<Vec<_>, _>>()?;
        let threshold = doc
            .threshold
            .ok_or_else(|| ModelError::Format("missing threshold".into()))?;
        let model = Self::from_layers(layers, doc.activation, T::of(threshold))?;
        if model.widths() != doc.widths {
            return Err(ModelError::Format("widths disagree with layer shapes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.to_document().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_document(&ModelDocument::load(path)?)
    }
}

impl<T: Scalar> VaeModel<T> {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Vae,
            widths: vec![self.n_features(), self.hidden_width(), self.latent_dim()],
            activation: self.activation(),
            layers: self.layers().iter().map(layer_doc).collect(),
            threshold: None,
            latent_dim: Some(self.latent_dim()),
        }
    }

    /// Loaded models are always frozen.
    pub fn from_document(doc: &ModelDocument) -> Result<Self, ModelError> {
        if doc.kind != ModelKind::Vae {
            return Err(ModelError::Format("expected kind \"vae\"".into()));
        }
        let layers = doc.layers.iter().map(layer_from_doc).collect::<Result<Vec<_>, _>>()?;
        let model = Self::from_layers(layers, doc.activation, true)?;
        let widths = vec![model.n_features(), model.hidden_width(), model.latent_dim()];
        if widths != doc.widths || doc.latent_dim != Some(model.latent_dim()) {
            return Err(ModelError::Format("widths disagree with layer shapes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.to_document().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_document(&ModelDocument::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierSpec, VaeSpec};
    use proptest::prelude::*;

    #[test]
    fn classifier_round_trip_is_exact() {
        let m = MlpClassifier::<f64>::random(&ClassifierSpec::default(), 7, 11).unwrap();
        let json = m.to_document().to_json().unwrap();
        let back = MlpClassifier::<f64>::from_document(&ModelDocument::from_json(&json).unwrap()).unwrap();
        assert_eq!(m.layers(), back.layers());
        assert_eq!(m.threshold(), back.threshold());
        assert!(json.contains("\"kind\": \"mlp\""));
    }

    #[test]
    fn vae_round_trip_is_exact_and_frozen() {
        let mut v = VaeModel::<f64>::random(&VaeSpec::default(), 6, 2).unwrap();
        v.freeze();
        let json = v.to_document().to_json().unwrap();
        let back = VaeModel::<f64>::from_document(&ModelDocument::from_json(&json).unwrap()).unwrap();
        assert_eq!(v.layers(), back.layers());
        assert!(back.is_frozen());
    }

    #[test]
    fn rejects_wrong_kind_and_version() {
        let m = MlpClassifier::<f64>::random(&ClassifierSpec::default(), 3, 1).unwrap();
        let doc = m.to_document();
        assert!(VaeModel::<f64>::from_document(&doc).is_err());
        let mut bad = doc.clone();
        bad.format_version = 99;
        assert!(ModelDocument::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn any_finite_weight_survives_json(vals in prop::collection::vec(-1e300f64..1e300, 4)) {
            let doc = LayerDocument { weights: vec![vals[..2].to_vec(), vals[2..].to_vec()], bias: vec![vals[0], vals[3]] };
            let s = serde_json::to_string(&doc).unwrap();
            let back: LayerDocument = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(doc, back);
        }
    }
}
