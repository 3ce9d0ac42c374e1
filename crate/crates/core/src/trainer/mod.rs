//! Min-max training: every optimizer step regenerates perturbed inputs
//! against the current parameters, then descends on a mix of the
//! perturbed and clean squared errors plus an L2 penalty.

mod optimizer;

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, AdversaryError, AttackConfig, AttackMode};
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::dataset::{DatasetError, EarningsCallRecord, Gender, Standardizer};
use crate::evaluator;
use crate::model::{
    bind, init_params, predict_graph, ModelConfig, ModelError, ModelParams, Regressor,
};
use crate::par::{self, Execution};
use crate::seed::{self, Stream};

pub use optimizer::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Batch objective above which training is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Eval(#[from] evaluator::EvalError),
    #[error("gradient shape: {0}")]
    Shape(String),
    #[error(
        "non-finite loss at epoch {epoch}, step {step}; the learning rate may be too high or the data degenerate"
    )]
    NonFinite {
        epoch: usize,
        step: u64,
        history: TrainHistory,
    },
    #[error("loss {loss:e} exceeded {DIVERGENCE_THRESHOLD:e} at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: u64,
        loss: f64,
        history: TrainHistory,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl TrainError {
    /// True for failures of the optimization itself rather than of its inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Diverged { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 coefficient on the summed squared parameter norms
    pub lambda: f64,
    pub attack: AttackConfig,
    /// weight of the clean loss; `1 - clean_mix` goes to the perturbed loss
    pub clean_mix: f64,
    pub optimizer: OptimizerKind,
    /// epochs without a validation improvement before stopping; 0 never stops
    pub patience: usize,
    pub seed: u64,
    pub horizon: usize,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.003,
            lambda: 1e-4,
            attack: AttackConfig::default(),
            clean_mix: 0.5,
            optimizer: OptimizerKind::Adam,
            patience: 15,
            seed: 0,
            horizon: 3,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.clean_mix) {
            return bad(format!("clean_mix {} must lie in [0, 1]", self.clean_mix));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.attack.validate()?;
        Ok(())
    }

    /// Weights of the clean and perturbed squared errors.
    fn loss_weights(&self) -> (f64, f64) {
        if self.attack.mode == AttackMode::None {
            (1.0, 0.0)
        } else {
            (self.clean_mix, 1.0 - self.clean_mix)
        }
    }

    pub fn execution(&self) -> Execution {
        Execution::from_jobs(self.jobs)
    }
}

/// A standardized call ready for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub text: Tensor,
    pub audio: Tensor,
    pub target: f64,
    pub gender: Gender,
}

pub fn prepare_samples(
    records: &[EarningsCallRecord],
    standardizer: &Standardizer,
    horizon: usize,
) -> Result<Vec<Sample>, DatasetError> {
    records
        .iter()
        .map(|r| {
            let target = r
                .target(horizon)
                .ok_or_else(|| DatasetError::MissingTarget {
                    call_id: r.call_id.clone(),
                    horizon,
                })?;
            let (text, audio) = standardizer.apply(r);
            Ok(Sample {
                text,
                audio,
                target,
                gender: r.gender,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_adv_mse: f64,
    /// summed squared parameter norms
    pub theta_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_mse,val_adv_mse,theta_norm")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_mse, e.val_adv_mse, e.theta_norm
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for TrainHistory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.epochs {
            writeln!(
                f,
                "epoch {:>4}  loss {:.6}  val {:.6}  val_adv {:.6}  |θ|² {:.4}",
                e.epoch, e.train_loss, e.val_mse, e.val_adv_mse, e.theta_norm
            )?;
        }
        Ok(())
    }
}

/// Value and parameter gradient of the batch objective.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    /// the loss without the L2 term
    pub data_loss: f64,
    /// per-leaf gradients in canonical parameter order
    pub grads: Vec<Vec<f64>>,
    /// perturbed inputs generated for this evaluation
    pub perturbed: usize,
}

fn squared_error_grads(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    sample: &Sample,
    perturbed: Option<&(Tensor, Tensor)>,
    (w_clean, w_adv): (f64, f64),
) -> Result<(f64, Vec<Vec<f64>>), TensorError> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, true);
    let target = g.constant(Tensor::matrix(1, 1, vec![sample.target])?);
    let mut terms = Vec::with_capacity(2);
    let mut inputs: Vec<(&Tensor, &Tensor, f64)> = Vec::with_capacity(2);
    if w_clean > 0.0 {
        inputs.push((&sample.text, &sample.audio, w_clean));
    }
    if let Some((t, a)) = perturbed.filter(|_| w_adv > 0.0) {
        inputs.push((t, a, w_adv));
    }
    for (text, audio, w) in inputs {
        let (t, a) = (g.leaf_ref(text, false), g.leaf_ref(audio, false));
        let y = predict_graph(&mut g, &p, t, a, model_cfg, model_cfg.modality)?.y;
        let r = g.sub(y, target)?;
        let sq = g.square(r)?;
        terms.push(if w == 1.0 { sq } else { g.scale(sq, w)? });
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    g.backward(loss)?;
    let value = g.value(loss).item();
    let grads = p
        .refs()
        .into_iter()
        .map(|&v| {
            g.take_grad(v)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    Ok((value, grads))
}

/// Stream index of the noise drawn for record `i` of optimizer step `step`.
fn noise_index(step: u64, i: usize) -> u64 {
    (step << 24) | i as u64
}

/// The mixed objective on one batch and its gradient.
///
/// Perturbed inputs are generated against `params` as given and then held
/// fixed while differentiating; `step` selects the noise stream in
/// stochastic mode.
pub fn objective(
    batch: &[Sample],
    params: &ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    step: u64,
) -> Result<BatchObjective, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Data(DatasetError::Empty));
    }
    let weights = cfg.loss_weights();
    let model = Regressor::new(params, model_cfg);
    let per_record = par::map(cfg.execution(), batch, |i, s| -> Result<_, TrainError> {
        let perturbed = if weights.1 > 0.0 {
            Some(adversary::perturb(
                &model,
                &s.text,
                &s.audio,
                s.target,
                &cfg.attack,
                noise_index(step, i),
            )?)
        } else {
            None
        };
        Ok(squared_error_grads(
            params,
            model_cfg,
            s,
            perturbed.as_ref(),
            weights,
        )?)
    });

    let n = batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = params.refs().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut data_loss = 0.0;
    for r in per_record {
        let (loss, g) = r?;
        data_loss += loss;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    data_loss /= n;
    for (acc, theta) in grads.iter_mut().zip(params.refs()) {
        for (a, w) in acc.iter_mut().zip(theta.data()) {
            *a = *a / n + 2.0 * cfg.lambda * w;
        }
    }
    Ok(BatchObjective {
        loss: data_loss + cfg.lambda * params.squared_norm(),
        data_loss,
        grads,
        perturbed: if weights.1 > 0.0 { batch.len() } else { 0 },
    })
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// parameters of the best validation epoch (initial ones if none ran)
    pub params: ModelParams,
    pub standardizer: Standardizer,
    pub history: TrainHistory,
    pub best_epoch: Option<usize>,
    pub optimizer_steps: u64,
    /// perturbed inputs generated across all steps
    pub perturbed_examples: u64,
}

/// Called with `(epoch, params, standardizer)` whenever validation MSE improves.
pub type BestCallback<'c> = dyn FnMut(usize, &ModelParams, &Standardizer) + Send + 'c;

pub fn train(
    train: &[EarningsCallRecord],
    val: &[EarningsCallRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_callback(train, val, model_cfg, cfg, &mut |_, _, _| {})
}

pub fn train_with_callback(
    train: &[EarningsCallRecord],
    val: &[EarningsCallRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_best: &mut BestCallback<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Data(DatasetError::Empty));
    }
    let standardizer = Standardizer::fit(train)?;
    let train_s = prepare_samples(train, &standardizer, cfg.horizon)?;
    let val_s = prepare_samples(val, &standardizer, cfg.horizon)?;
    par::with_jobs(cfg.jobs, || {
        run(&train_s, &val_s, standardizer, model_cfg, cfg, on_best)
    })
}

/// Initial parameters with the output bias set to the mean training target.
pub fn initial_params(model_cfg: &ModelConfig, samples: &[Sample]) -> ModelParams {
    let mut params = init_params(model_cfg);
    let mean = samples.iter().map(|s| s.target).sum::<f64>() / samples.len().max(1) as f64;
    params.head_b.data_mut()[0] = mean;
    params
}

fn run(
    train: &[Sample],
    val: &[Sample],
    standardizer: Standardizer,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_best: &mut BestCallback<'_>,
) -> Result<TrainOutcome, TrainError> {
    let mut params = initial_params(model_cfg, train);
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_val = f64::INFINITY;
    let mut history = TrainHistory::default();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut perturbed_examples = 0u64;
    let val_attack = AttackConfig {
        mode: AttackMode::Adversarial,
        ..cfg.attack.clone()
    };
    let exec = cfg.execution();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut rng = seed::rng(cfg.seed, Stream::Shuffle, epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let step = opt.steps();
            let obj = objective(&batch, &params, model_cfg, cfg, step)?;
            if !obj.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    history,
                });
            }
            if obj.loss > DIVERGENCE_THRESHOLD {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: obj.loss,
                    history,
                });
            }
            perturbed_examples += obj.perturbed as u64;
            loss_sum += obj.loss * batch.len() as f64;
            opt.step(params.refs_mut(), &obj.grads)?;
        }
        if !params.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                step: opt.steps(),
                history,
            });
        }

        let model = Regressor::new(&params, model_cfg);
        let val_mse = evaluator::mse_under(&model, val, None, exec)?;
        let val_adv_mse = evaluator::mse_under(&model, val, Some(&val_attack), exec)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mse,
            val_adv_mse,
            theta_norm: params.squared_norm(),
        };
        log::debug!(
            "epoch {epoch}: loss {:.6} val {:.6} val_adv {:.6}",
            record.train_loss,
            val_mse,
            val_adv_mse
        );
        history.epochs.push(record);

        if val_mse < best_val {
            best_val = val_mse;
            best = params.clone();
            best_epoch = Some(epoch);
            since_best = 0;
            on_best(epoch, &best, &standardizer);
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch:?}");
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best,
        standardizer,
        history,
        best_epoch,
        optimizer_steps: opt.steps(),
        perturbed_examples,
    })
}

#[cfg(test)]
mod tests;
