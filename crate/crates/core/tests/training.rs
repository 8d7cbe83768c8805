//! Optimisation behaviour of `fit` on synthetic data.

use midpg::data::{generate_synthetic, split, SyntheticSpec};
use midpg::{fit, Dataset, Model, ModelConfig, TrainConfig};

fn small_data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        samples_per_scenario: 300,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    split(&data.dataset, 0.8, 42).unwrap()
}

fn small_model(train: &Dataset) -> Model {
    let cfg = ModelConfig {
        hidden_dims: vec![16, 8],
        ..ModelConfig::default()
    };
    Model::new(cfg, &train.schema, 7).unwrap()
}

fn all_params(model: &Model) -> Vec<(String, Vec<f64>)> {
    model.params().iter().map(|(_, name, t)| (name.to_string(), t.values().to_vec())).collect()
}

fn non_discriminator_params(model: &Model) -> Vec<(String, Vec<f64>)> {
    all_params(model).into_iter().filter(|(name, _)| !name.starts_with("disc")).collect()
}

fn after_steps(lambda: f64, steps: usize) -> (Model, Vec<f64>) {
    let (train, eval) = small_data();
    let mut model = small_model(&train);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        lambda,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &train, &eval, &cfg).unwrap();
    (model, report.step_losses)
}

#[test]
fn mi_term_takes_one_step_to_reach_the_predictor() {
    // The zero-initialised discriminator output layer blocks the MI gradient
    // at the first step, so only the discriminator moves.
    let (m0, l0) = after_steps(0.0, 1);
    let (m1, l1) = after_steps(1.0, 1);
    assert_eq!(non_discriminator_params(&m0), non_discriminator_params(&m1));
    assert!((l1[0] - l0[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

    let (m0, _) = after_steps(0.0, 2);
    let (m1, _) = after_steps(1.0, 2);
    assert_ne!(non_discriminator_params(&m0), non_discriminator_params(&m1));
}

#[test]
fn fit_is_deterministic() {
    let (train, eval) = small_data();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = small_model(&train);
        let report = fit(&mut model, &train, &eval, &cfg).unwrap();
        (report.metric_rows(), report.step_losses, all_params(&model))
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn default_training_reduces_the_loss() {
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train, eval) = split(&data.dataset, 0.8, 42).unwrap();
    let mut model = Model::new(ModelConfig::default(), &train.schema, 42).unwrap();
    let report = fit(&mut model, &train, &eval, &TrainConfig::default()).unwrap();
    let first = report.epochs.first().unwrap();
    let last = report.epochs.last().unwrap();
    assert_eq!(report.epochs.len(), 20);
    assert!(last.train_loss < first.train_loss, "{} -> {}", first.train_loss, last.train_loss);
    assert!(last.train_cvr_loss < first.train_cvr_loss);
    assert!(report.final_auc > 0.8, "{}", report.final_auc);
}
