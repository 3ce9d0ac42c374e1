//! Error metrics: overall and per-gender MSE, the signed gender gap
//! `mse_f - mse_m`, robustness sweeps over the attack radius and the
//! modality ablation.

use std::fmt;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::adversary::{self, AdversaryError, AttackConfig, AttackMode};
use crate::dataset::{DatasetError, EarningsCallRecord, Gender};
use crate::model::{Modality, ModelConfig, ModelError, Regressor};
use crate::par::{self, Execution};
use crate::trainer::{self, prepare_samples, Sample, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot compute an error metric over zero records")]
    Empty,
    #[error("{preds} predictions but {targets} targets")]
    Length { preds: usize, targets: usize },
    #[error("no {0} records in the evaluated set")]
    MissingStratum(Gender),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("training {variant} model: {source}")]
    Train {
        variant: &'static str,
        #[source]
        source: Box<TrainError>,
    },
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    if preds.len() != targets.len() {
        return Err(EvalError::Length {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenderGap {
    pub mse_f: f64,
    pub mse_m: f64,
    /// `mse_f - mse_m`; positive means larger errors on female-led calls
    pub delta: f64,
    pub n_f: usize,
    pub n_m: usize,
}

pub fn delta_mse(
    preds: &[f64],
    targets: &[f64],
    genders: &[Gender],
) -> Result<GenderGap, EvalError> {
    if preds.len() != targets.len() || preds.len() != genders.len() {
        return Err(EvalError::Length {
            preds: preds.len(),
            targets: targets.len().min(genders.len()),
        });
    }
    let stratum = |g: Gender| -> Result<(f64, usize), EvalError> {
        let (p, t): (Vec<f64>, Vec<f64>) = preds
            .iter()
            .zip(targets)
            .zip(genders)
            .filter(|(_, &gi)| gi == g)
            .map(|((&p, &t), _)| (p, t))
            .unzip();
        if p.is_empty() {
            return Err(EvalError::MissingStratum(g));
        }
        Ok((mse(&p, &t)?, p.len()))
    };
    let (mse_f, n_f) = stratum(Gender::Female)?;
    let (mse_m, n_m) = stratum(Gender::Male)?;
    Ok(GenderGap {
        mse_f,
        mse_m,
        delta: mse_f - mse_m,
        n_f,
        n_m,
    })
}

/// Radius actually applied by `attack`.
pub fn effective_epsilon(attack: Option<&AttackConfig>) -> f64 {
    match attack {
        Some(a) if a.mode != AttackMode::None => a.epsilon,
        _ => 0.0,
    }
}

/// Predictions on every sample, on inputs perturbed by `attack` when given.
/// In stochastic mode record `i` draws from noise stream `i`.
pub fn predict_all(
    model: &Regressor<'_>,
    samples: &[Sample],
    attack: Option<&AttackConfig>,
    exec: Execution,
) -> Result<Vec<f64>, EvalError> {
    let perturbing = effective_epsilon(attack) > 0.0;
    par::map(exec, samples, |i, s| -> Result<f64, EvalError> {
        match attack.filter(|_| perturbing) {
            Some(a) => {
                let (t, au) = adversary::perturb(model, &s.text, &s.audio, s.target, a, i as u64)?;
                Ok(model.predict(&t, &au)?)
            }
            None => Ok(model.predict(&s.text, &s.audio)?),
        }
    })
    .into_iter()
    .collect()
}

pub fn mse_under(
    model: &Regressor<'_>,
    samples: &[Sample],
    attack: Option<&AttackConfig>,
    exec: Execution,
) -> Result<f64, EvalError> {
    let preds = predict_all(model, samples, attack, exec)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    mse(&preds, &targets)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub variant: String,
    pub horizon: usize,
    pub eps: f64,
    pub mse_all: f64,
    pub mse_f: f64,
    pub mse_m: f64,
    pub delta_mse: f64,
    pub n_f: usize,
    pub n_m: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "variant,horizon,eps,mse_all,mse_f,mse_m,delta_mse,n_f,n_m";

impl EvalReport {
    pub fn find(&self, variant: &str, horizon: usize, eps: f64) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.horizon == horizon && r.eps == eps)
    }

    /// Machine-readable rows; `comments` become leading `# ` lines.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "# delta_mse is signed: mse_f - mse_m")?;
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.variant, r.horizon, r.eps, r.mse_all, r.mse_f, r.mse_m, r.delta_mse, r.n_f, r.n_m
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>7} {:>8} {:>10} {:>10} {:>10} {:>10} {:>5} {:>5}",
            "variant", "horizon", "eps", "mse", "mse_f", "mse_m", "ΔMSE", "n_f", "n_m"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>7} {:>8} {:>10.5} {:>10.5} {:>10.5} {:>+10.5} {:>5} {:>5}",
                r.variant, r.horizon, r.eps, r.mse_all, r.mse_f, r.mse_m, r.delta_mse, r.n_f, r.n_m
            )?;
        }
        Ok(())
    }
}

/// Metrics of one model on `samples`, once per radius in `sweep`.
///
/// Each radius reuses `attack` with `epsilon` replaced; the attack targets
/// `model` itself. Radii that collapse to the same effective perturbation
/// (every radius when the mode is `none`) produce a single row.
pub fn evaluate(
    model: &Regressor<'_>,
    samples: &[Sample],
    horizon: usize,
    variant: &str,
    attack: &AttackConfig,
    sweep: &[f64],
    exec: Execution,
) -> Result<Vec<MetricRow>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let genders: Vec<Gender> = samples.iter().map(|s| s.gender).collect();
    let mut rows: Vec<MetricRow> = Vec::with_capacity(sweep.len());
    for &eps in sweep {
        let cfg = attack.with_epsilon(eps);
        let eff = effective_epsilon(Some(&cfg));
        if rows.iter().any(|r| r.eps == eff) {
            continue;
        }
        let preds = predict_all(model, samples, Some(&cfg), exec)?;
        let gap = delta_mse(&preds, &targets, &genders)?;
        rows.push(MetricRow {
            variant: variant.to_string(),
            horizon,
            eps: eff,
            mse_all: mse(&preds, &targets)?,
            mse_f: gap.mse_f,
            mse_m: gap.mse_m,
            delta_mse: gap.delta,
            n_f: gap.n_f,
            n_m: gap.n_m,
        });
    }
    Ok(rows)
}

/// A trained ablation variant.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub modality: Modality,
    pub horizon: usize,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub report: EvalReport,
    pub runs: Vec<VariantRun>,
}

pub const ABLATION_ORDER: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Fused];

/// Trains audio-only, text-only and fused models with otherwise identical
/// settings for each horizon and evaluates them on `test`.
#[allow(clippy::too_many_arguments)]
pub fn ablation(
    train: &[EarningsCallRecord],
    val: &[EarningsCallRecord],
    test: &[EarningsCallRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    horizons: &[usize],
    sweep: &[f64],
) -> Result<Ablation, EvalError> {
    let mut report = EvalReport::default();
    let mut runs = Vec::new();
    for &horizon in horizons {
        for modality in ABLATION_ORDER {
            let mcfg = ModelConfig {
                modality,
                ..model_cfg.clone()
            };
            let tcfg = TrainConfig {
                horizon,
                ..train_cfg.clone()
            };
            let outcome =
                trainer::train(train, val, &mcfg, &tcfg).map_err(|e| EvalError::Train {
                    variant: modality.as_str(),
                    source: Box::new(e),
                })?;
            let samples = prepare_samples(test, &outcome.standardizer, horizon)?;
            let model = Regressor::new(&outcome.params, &mcfg);
            report.rows.extend(evaluate(
                &model,
                &samples,
                horizon,
                modality.as_str(),
                &tcfg.attack,
                sweep,
                tcfg.execution(),
            )?);
            runs.push(VariantRun {
                modality,
                horizon,
                outcome,
            });
        }
    }
    Ok(Ablation { report, runs })
}
