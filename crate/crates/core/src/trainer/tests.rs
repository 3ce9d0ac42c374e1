use super::*;
use crate::adversary::PerturbTarget;
use crate::autodiff::relative_error;
use crate::dataset::{generate_synthetic, SynthConfig};
use crate::model::forward;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        dt: 6,
        da: 4,
        u_text: 4,
        u_audio: 3,
        u_fused: 4,
        attn_dim: 3,
        feature_dim: 4,
        ..Default::default()
    }
}

fn corpus(p: usize, noise: f64, seed: u64) -> Vec<EarningsCallRecord> {
    generate_synthetic(&SynthConfig {
        p,
        q_max: 4,
        dt: 6,
        da: 4,
        latent_dim: 3,
        noise_sigma: noise,
        female_fraction: 0.25,
        seed,
        ..Default::default()
    })
    .unwrap()
    .records
}

fn samples(records: &[EarningsCallRecord]) -> Vec<Sample> {
    let s = Standardizer::fit(records).unwrap();
    prepare_samples(records, &s, 3).unwrap()
}

fn batch_mse(batch: &[Sample], params: &ModelParams, cfg: &ModelConfig) -> f64 {
    batch
        .iter()
        .map(|s| (forward(&s.text, &s.audio, params, cfg).unwrap() - s.target).powi(2))
        .sum::<f64>()
        / batch.len() as f64
}

#[test]
fn plain_objective_is_batch_mse() {
    let cfg = tiny_model();
    let params = init_params(&cfg);
    let batch = samples(&corpus(6, 0.3, 1));
    let tcfg = TrainConfig {
        lambda: 0.0,
        attack: AttackConfig {
            mode: AttackMode::None,
            ..Default::default()
        },
        clean_mix: 0.0,
        ..Default::default()
    };
    let obj = objective(&batch, &params, &cfg, &tcfg, 0).unwrap();
    assert!((obj.loss - batch_mse(&batch, &params, &cfg)).abs() < 1e-12);
    assert_eq!(obj.perturbed, 0);
}

#[test]
fn zero_error_objective_is_parameter_norm() {
    let cfg = tiny_model();
    let params = init_params(&cfg);
    let mut batch = samples(&corpus(4, 0.3, 2));
    for s in &mut batch {
        s.target = forward(&s.text, &s.audio, &params, &cfg).unwrap();
    }
    let mut tcfg = TrainConfig {
        lambda: 1.0,
        attack: AttackConfig {
            epsilon: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let obj = objective(&batch, &params, &cfg, &tcfg, 0).unwrap();
    assert_eq!(obj.data_loss, 0.0);
    assert_eq!(obj.loss, params.squared_norm());

    tcfg.lambda = 0.0;
    assert_eq!(
        objective(&batch, &params, &cfg, &tcfg, 0).unwrap().loss,
        0.0
    );
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let cfg = tiny_model();
    let params = init_params(&cfg);
    let batch = samples(&corpus(2, 0.3, 3));
    // stochastic perturbations are fixed per step, so the objective is a
    // smooth function of the parameters
    let tcfg = TrainConfig {
        lambda: 0.1,
        clean_mix: 0.3,
        attack: AttackConfig {
            epsilon: 0.2,
            mode: AttackMode::Stochastic,
            seed: 9,
            ..Default::default()
        },
        ..Default::default()
    };
    let obj = objective(&batch, &params, &cfg, &tcfg, 5).unwrap();
    assert_eq!(obj.perturbed, 2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for leaf in 0..obj.grads.len() {
        for j in 0..obj.grads[leaf].len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.refs_mut()[leaf].data_mut()[j] += delta;
                objective(&batch, &p, &cfg, &tcfg, 5).unwrap().loss
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(relative_error(obj.grads[leaf][j], numeric));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn clean_training_fits_noiseless_corpus() {
    let records = corpus(32, 0.0, 4);
    let cfg = tiny_model();
    let tcfg = TrainConfig {
        epochs: 300,
        patience: 0,
        lambda: 0.0,
        learning_rate: 0.01,
        attack: AttackConfig {
            mode: AttackMode::None,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train(&records, &records, &cfg, &tcfg).unwrap();
    let train_mse = batch_mse(&samples(&records), &out.params, &cfg);
    assert!(train_mse < 0.01, "train mse {train_mse}");
    assert_eq!(out.perturbed_examples, 0);
}

#[test]
fn zero_epochs_returns_initial_params() {
    let records = corpus(8, 0.3, 5);
    let cfg = tiny_model();
    let out = train(
        &records,
        &records,
        &cfg,
        &TrainConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.params, initial_params(&cfg, &samples(&records)));
}

#[test]
fn training_is_deterministic_and_counts_attacks() {
    let records = corpus(24, 0.3, 6);
    let (train_r, val_r) = records.split_at(16);
    let cfg = tiny_model();
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        patience: 0,
        ..Default::default()
    };
    let a = train(train_r, val_r, &cfg, &tcfg).unwrap();
    let b = train(train_r, val_r, &cfg, &tcfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.history.len(), 3);
    assert_eq!(a.optimizer_steps, 3 * 4);
    assert_eq!(a.perturbed_examples, a.optimizer_steps * 4);

    let par = train(
        train_r,
        val_r,
        &cfg,
        &TrainConfig {
            jobs: 3,
            ..tcfg.clone()
        },
    )
    .unwrap();
    assert_eq!(a.history, par.history);

    let text_only = TrainConfig {
        attack: AttackConfig {
            target: PerturbTarget::Text,
            ..Default::default()
        },
        ..tcfg
    };
    assert_ne!(
        train(train_r, val_r, &cfg, &text_only).unwrap().history,
        a.history
    );
}

#[test]
fn stronger_regularization_shrinks_parameters() {
    let cfg = tiny_model();
    for seed in 0..3 {
        let records = corpus(16, 0.3, 10 + seed);
        let norms: Vec<f64> = [0.0, 0.1, 1.0]
            .iter()
            .map(|&lambda| {
                let tcfg = TrainConfig {
                    epochs: 80,
                    patience: 0,
                    lambda,
                    learning_rate: 0.01,
                    seed,
                    attack: AttackConfig {
                        mode: AttackMode::None,
                        ..Default::default()
                    },
                    ..Default::default()
                };
                let out = train(&records, &records, &cfg, &tcfg).unwrap();
                out.history.epochs.last().unwrap().theta_norm
            })
            .collect();
        assert!(
            norms[0] >= norms[1] && norms[1] >= norms[2],
            "seed {seed}: {norms:?}"
        );
    }
}

#[test]
fn runaway_learning_rate_reports_history() {
    let records = corpus(16, 0.3, 7);
    let tcfg = TrainConfig {
        epochs: 20,
        learning_rate: 1e4,
        optimizer: OptimizerKind::Sgd,
        patience: 0,
        ..Default::default()
    };
    let err = train(&records, &records, &tiny_model(), &tcfg).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn invalid_configs_rejected() {
    let records = corpus(4, 0.3, 8);
    let cfg = tiny_model();
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
        TrainConfig {
            lambda: -1.0,
            ..Default::default()
        },
        TrainConfig {
            clean_mix: 1.5,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(
            train(&records, &records, &cfg, &bad),
            Err(TrainError::Config(_))
        ));
    }
    assert!(train(&[], &records, &cfg, &TrainConfig::default()).is_err());
    let missing = TrainConfig {
        horizon: 4,
        ..Default::default()
    };
    assert!(matches!(
        train(&records, &records, &cfg, &missing),
        Err(TrainError::Data(_))
    ));
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let h = TrainHistory {
        epochs: vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_mse: 0.25,
            val_adv_mse: 0.375,
            theta_norm: 2.0,
        }],
    };
    let mut buf = Vec::new();
    h.write_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "epoch,train_loss,val_mse,val_adv_mse,theta_norm\n1,0.5,0.25,0.375,2\n"
    );
}
