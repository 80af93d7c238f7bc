#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use quce_core::data::{load_csv, prepare, synthetic_blobs, Dataset, Normalizer};
use quce_core::models::{train_classifier, train_vae, MlpClassifier, TrainConfig, VaeModel};

pub struct Fixture {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    pub normalizer: Normalizer,
    pub classifier: MlpClassifier<f64>,
    pub vae: VaeModel<f64>,
}

impl Fixture {
    fn build(data: Dataset<f64>, seed: u64) -> Self {
        let (train, test, normalizer) = prepare(&data, 0.8, seed).unwrap();
        let mut classifier = train_classifier(&train, &TrainConfig::classifier_default().with_seed(seed)).unwrap();
        classifier.metrics.test_accuracy = Some(classifier.accuracy(&test).unwrap());
        let vae = train_vae(&train, &TrainConfig::vae_default().with_seed(seed)).unwrap();
        Self {
            train,
            test,
            normalizer,
            classifier,
            vae,
        }
    }

    /// Indices of rows predicted as `class`.
    pub fn rows_predicted(&self, data: &Dataset<f64>, class: u8) -> Vec<usize> {
        (0..data.len())
            .filter(|&i| self.classifier.predict(data.row(i)).unwrap() == class)
            .collect()
    }
}

pub fn wbc_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/wbc.csv")
}

pub fn wbc() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::build(load_csv(wbc_path(), "target").unwrap(), 42))
}

/// Two 2-D clusters at separation 6, 400 points.
pub fn blobs() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::build(synthetic_blobs(400, 2, 6.0, 7).unwrap(), 7))
}

/// Four-feature clusters, used where more than two features matter.
pub fn blobs4() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::build(synthetic_blobs(400, 4, 4.0, 11).unwrap(), 11))
}
