use quce_core::attribution::{path_attribution, RiemannConfig};
use quce_core::data::{prepare, synthetic_blobs};
use quce_core::generator::{generate_counterfactual, GeneratorConfig};
use quce_core::models::{train_classifier, train_vae, TrainConfig};
use quce_core::{Classifier32, Dataset32, Vae32};

#[test]
fn f32_pipeline_runs_end_to_end() {
    let data: Dataset32 = synthetic_blobs(200, 2, 6.0, 4).unwrap();
    let (train, test, _) = prepare(&data, 0.8, 4).unwrap();
    let clf: Classifier32 = train_classifier(&train, &TrainConfig::classifier_default().with_seed(4)).unwrap();
    assert!(clf.accuracy(&test).unwrap() >= 0.95);
    let vae: Vae32 = train_vae(&train, &TrainConfig::vae_default().with_seed(4).with_epochs(50)).unwrap();
    let x = test.row(0);
    let tau = 1 - clf.predict(x).unwrap();
    let r = generate_counterfactual(x, tau, &GeneratorConfig::default(), &clf, &vae).unwrap();
    assert!(r.valid);
    let e = path_attribution(&r.path, &clf, tau, &RiemannConfig::new(200)).unwrap();
    assert!(e.completeness_gap() <= 1e-2);
}
