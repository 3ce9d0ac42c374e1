//! Input-space perturbations: the multi-step projected sign-gradient
//! attack and the uniform-noise baseline.
//!
//! Perturbations live in an L∞ ball of radius `epsilon` around the clean
//! (standardized) embeddings. Each attack step moves every coordinate by
//! `beta · sign(∂loss/∂x)` and clamps back into the ball; coordinates with
//! a zero gradient stay put.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::model::{bind, predict_graph, Regressor};
use crate::seed::{self, Stream};

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attack config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttackMode {
    #[default]
    #[serde(rename = "adv")]
    Adversarial,
    #[serde(rename = "rand")]
    Stochastic,
    #[serde(rename = "none")]
    None,
}

impl std::str::FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adv" | "adversarial" => Ok(AttackMode::Adversarial),
            "rand" | "stochastic" => Ok(AttackMode::Stochastic),
            "none" => Ok(AttackMode::None),
            other => Err(format!("unknown attack mode `{other}` (adv|rand|none)")),
        }
    }
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Adversarial => "adv",
            AttackMode::Stochastic => "rand",
            AttackMode::None => "none",
        }
    }
}

/// Which embedding matrices an attack may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbTarget {
    #[default]
    Both,
    Text,
    Audio,
}

impl PerturbTarget {
    fn mask(self) -> [bool; 2] {
        match self {
            PerturbTarget::Both => [true, true],
            PerturbTarget::Text => [true, false],
            PerturbTarget::Audio => [false, true],
        }
    }
}

impl std::str::FromStr for PerturbTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(PerturbTarget::Both),
            "text" => Ok(PerturbTarget::Text),
            "audio" => Ok(PerturbTarget::Audio),
            other => Err(format!("unknown perturbation target `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L∞ radius in standardized embedding units
    pub epsilon: f64,
    pub beta: f64,
    pub steps: usize,
    pub mode: AttackMode,
    pub target: PerturbTarget,
    /// root seed of the noise stream (stochastic mode)
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            beta: 0.0025,
            steps: 4,
            mode: AttackMode::Adversarial,
            target: PerturbTarget::Both,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AdversaryError::Config(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(AdversaryError::Config(format!(
                "beta {} must be > 0",
                self.beta
            )));
        }
        if self.steps == 0 {
            return Err(AdversaryError::Config("steps must be >= 1".into()));
        }
        if self.beta > self.epsilon && self.epsilon > 0.0 {
            log::debug!("beta {} exceeds epsilon {}", self.beta, self.epsilon);
        }
        Ok(())
    }

    /// Same settings with a different radius; `beta` keeps its ratio to `epsilon`.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let ratio = if self.epsilon > 0.0 {
            self.beta / self.epsilon
        } else {
            0.25
        };
        Self {
            epsilon,
            beta: if epsilon > 0.0 {
                epsilon * ratio
            } else {
                self.beta
            },
            ..self.clone()
        }
    }
}

/// A scalar regressor that is differentiable in its input matrices.
pub trait InputModel: Sync {
    /// Records the `1 × 1` prediction for `inputs` on `g`.
    fn predict_var<'g>(&'g self, g: &mut Graph<'g>, inputs: &[Var]) -> Result<Var, TensorError>;
}

impl InputModel for Regressor<'_> {
    fn predict_var<'g>(&'g self, g: &mut Graph<'g>, inputs: &[Var]) -> Result<Var, TensorError> {
        let p = bind(g, self.params, false);
        predict_graph(g, &p, inputs[0], inputs[1], self.cfg, self.modality).map(|pred| pred.y)
    }
}

/// `f(x) = x · w + b` on a single `1 × n` input; the closed-form reference
/// for attack tests.
#[derive(Debug, Clone)]
pub struct LinearModel {
    /// `n × 1`
    pub w: Tensor,
    pub b: f64,
}

impl LinearModel {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        let n = w.len();
        Self {
            w: Tensor::matrix(n, 1, w).expect("non-empty weights"),
            b,
        }
    }

    pub fn predict(&self, x: &Tensor) -> f64 {
        x.data()
            .iter()
            .zip(self.w.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.b
    }
}

impl InputModel for LinearModel {
    fn predict_var<'g>(&'g self, g: &mut Graph<'g>, inputs: &[Var]) -> Result<Var, TensorError> {
        let w = g.leaf_ref(&self.w, false);
        let b = g.constant(Tensor::matrix(1, 1, vec![self.b])?);
        let xw = g.matmul(inputs[0], w)?;
        g.add(xw, b)
    }
}

/// Elementwise clamp of `candidate` into `[center − ε, center + ε]`.
pub fn project_linf(
    candidate: &Tensor,
    center: &Tensor,
    epsilon: f64,
) -> Result<Tensor, AdversaryError> {
    if candidate.shape() != center.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "project_linf",
            shapes: vec![candidate.shape().to_vec(), center.shape().to_vec()],
        }
        .into());
    }
    let data = candidate
        .data()
        .iter()
        .zip(center.data())
        .map(|(&c, &x)| clamp_exact(c, x, epsilon))
        .collect();
    Ok(Tensor::new(center.shape().to_vec(), data)?)
}

/// Clamps `c` so that the *computed* difference `c - x` lies in `[-ε, ε]`;
/// rounding in `x ± ε` can otherwise overshoot by an ulp.
fn clamp_exact(c: f64, x: f64, epsilon: f64) -> f64 {
    let mut v = c.max(x - epsilon).min(x + epsilon);
    while v - x > epsilon {
        v = v.next_down();
    }
    while x - v > epsilon {
        v = v.next_up();
    }
    v
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-input gradients; `None` for inputs excluded by the mask.
pub type InputGrads = Vec<Option<Vec<f64>>>;

/// Squared error of `model` at `inputs` and its gradient with respect to
/// every input flagged in `mask`.
pub fn loss_and_input_grads<M: InputModel>(
    model: &M,
    inputs: &[Tensor],
    target: f64,
    mask: &[bool],
) -> Result<(f64, InputGrads), TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(mask.iter().chain(std::iter::repeat(&false)))
        .map(|(x, &m)| g.leaf_ref(x, m))
        .collect();
    let y = model.predict_var(&mut g, &vars)?;
    let t = g.constant(Tensor::matrix(1, 1, vec![target])?);
    let r = g.sub(y, t)?;
    let loss = g.square(r)?;
    g.backward(loss)?;
    let value = g.value(loss).item();
    let grads = vars
        .iter()
        .zip(mask.iter().chain(std::iter::repeat(&false)))
        .map(|(&v, &m)| {
            if m {
                g.grad(v).map(<[f64]>::to_vec)
            } else {
                None
            }
        })
        .collect();
    Ok((value, grads))
}

/// Runs `cfg.steps` projected sign-gradient steps from the clean inputs.
///
/// `mask[i]` selects which inputs move; unmasked inputs are returned
/// unchanged. Model parameters are only read.
pub fn pgd_perturb_masked<M: InputModel>(
    model: &M,
    inputs: &[Tensor],
    target: f64,
    cfg: &AttackConfig,
    mask: &[bool],
) -> Result<Vec<Tensor>, AdversaryError> {
    cfg.validate()?;
    let mut adv: Vec<Tensor> = inputs.to_vec();
    if cfg.epsilon == 0.0 {
        return Ok(adv);
    }
    for _ in 0..cfg.steps {
        let (_, grads) = loss_and_input_grads(model, &adv, target, mask)?;
        for (i, grad) in grads.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let mut step = adv[i].clone();
            step.data_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(x, g)| *x += cfg.beta * sign(*g));
            adv[i] = project_linf(&step, &inputs[i], cfg.epsilon)?;
        }
    }
    Ok(adv)
}

/// Attack on the `(text, audio)` pair of one call, honouring `cfg.target`.
pub fn pgd_perturb<M: InputModel>(
    model: &M,
    text: &Tensor,
    audio: &Tensor,
    target: f64,
    cfg: &AttackConfig,
) -> Result<(Tensor, Tensor), AdversaryError> {
    let mut out = pgd_perturb_masked(
        model,
        &[text.clone(), audio.clone()],
        target,
        cfg,
        &cfg.target.mask(),
    )?;
    let audio_adv = out.pop().expect("two inputs");
    let text_adv = out.pop().expect("two inputs");
    Ok((text_adv, audio_adv))
}

/// Adds i.i.d. `U[−ε, ε]` noise to the masked inputs. The noise stream is
/// `(cfg.seed, stream_index)`, so equal indices give identical noise.
pub fn random_perturb_masked(
    inputs: &[Tensor],
    cfg: &AttackConfig,
    stream_index: u64,
    mask: &[bool],
) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = inputs.to_vec();
    if cfg.epsilon == 0.0 {
        return out;
    }
    let mut rng = seed::rng(cfg.seed, Stream::Noise, stream_index);
    for (t, &m) in out.iter_mut().zip(mask) {
        if !m {
            continue;
        }
        for v in t.data_mut() {
            *v += rng.random_range(-cfg.epsilon..=cfg.epsilon);
        }
    }
    out
}

pub fn random_perturb(
    text: &Tensor,
    audio: &Tensor,
    cfg: &AttackConfig,
    stream_index: u64,
) -> (Tensor, Tensor) {
    let mut out = random_perturb_masked(
        &[text.clone(), audio.clone()],
        cfg,
        stream_index,
        &cfg.target.mask(),
    );
    let audio_n = out.pop().expect("two inputs");
    let text_n = out.pop().expect("two inputs");
    (text_n, audio_n)
}

/// Applies the configured perturbation mode to one call.
pub fn perturb<M: InputModel>(
    model: &M,
    text: &Tensor,
    audio: &Tensor,
    target: f64,
    cfg: &AttackConfig,
    stream_index: u64,
) -> Result<(Tensor, Tensor), AdversaryError> {
    match cfg.mode {
        AttackMode::Adversarial => pgd_perturb(model, text, audio, target, cfg),
        AttackMode::Stochastic => Ok(random_perturb(text, audio, cfg, stream_index)),
        AttackMode::None => Ok((text.clone(), audio.clone())),
    }
}

pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_step(eps: f64, beta: f64, steps: usize) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            beta,
            steps,
            ..Default::default()
        }
    }

    #[test]
    fn linear_fgsm_worked_example() {
        let model = LinearModel::new(vec![1.0, -2.0], 0.0);
        let x = Tensor::row_vector(vec![1.0, 1.0]);
        let adv = pgd_perturb_masked(
            &model,
            std::slice::from_ref(&x),
            0.0,
            &one_step(0.1, 0.1, 1),
            &[true],
        )
        .unwrap();
        let delta: Vec<f64> = adv[0]
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a - b)
            .collect();
        assert!((delta[0] + 0.1).abs() < 1e-15 && (delta[1] - 0.1).abs() < 1e-15);
        let y = model.predict(&adv[0]);
        assert!((y + 1.3).abs() < 1e-12);
        assert!((y * y - 1.69).abs() < 1e-12);
        assert_eq!(model.predict(&x).powi(2), 1.0);
    }

    #[test]
    fn zero_radius_is_identity() {
        let model = LinearModel::new(vec![1.0, -2.0, 0.5], 0.3);
        let x = Tensor::row_vector(vec![0.1, 0.7, -0.3]);
        let adv = pgd_perturb_masked(
            &model,
            std::slice::from_ref(&x),
            1.0,
            &one_step(0.0, 0.1, 5),
            &[true],
        )
        .unwrap();
        assert_eq!(adv[0], x);
        let noisy =
            random_perturb_masked(std::slice::from_ref(&x), &one_step(0.0, 0.1, 1), 0, &[true]);
        assert_eq!(noisy[0], x);
    }

    #[test]
    fn many_steps_saturate_the_ball() {
        let model = LinearModel::new(vec![0.5, -1.5, 2.0, -0.1], 0.0);
        let x = Tensor::row_vector(vec![0.2, 0.4, -0.1, 0.0]);
        let adv = pgd_perturb_masked(
            &model,
            std::slice::from_ref(&x),
            3.0,
            &one_step(0.05, 0.04, 20),
            &[true],
        )
        .unwrap();
        for (a, b) in adv[0].data().iter().zip(x.data()) {
            assert!(((a - b).abs() - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_cases() {
        let x = Tensor::row_vector(vec![0.0, 1.0, -1.0]);
        let inside = Tensor::row_vector(vec![0.05, 0.95, -1.0]);
        assert_eq!(project_linf(&inside, &x, 0.1).unwrap(), inside);
        let outside = Tensor::row_vector(vec![0.2, 1.0, -1.0]);
        let p = project_linf(&outside, &x, 0.1).unwrap();
        assert_eq!(p.data()[0], 0.1);
        let pp = project_linf(&p, &x, 0.1).unwrap();
        assert!(p
            .data()
            .iter()
            .zip(pp.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(project_linf(&Tensor::zeros(&[1, 2]), &x, 0.1).is_err());
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let x = Tensor::zeros(&[100, 1000]);
        let cfg = AttackConfig {
            epsilon: 0.2,
            mode: AttackMode::Stochastic,
            seed: 3,
            ..Default::default()
        };
        let a = random_perturb_masked(std::slice::from_ref(&x), &cfg, 7, &[true]);
        let b = random_perturb_masked(std::slice::from_ref(&x), &cfg, 7, &[true]);
        assert_eq!(a, b);
        let c = random_perturb_masked(std::slice::from_ref(&x), &cfg, 8, &[true]);
        assert_ne!(a, c);

        let eta = a[0].data();
        assert_eq!(eta.len(), 100_000);
        let mean = eta.iter().sum::<f64>() / eta.len() as f64;
        // U[−ε, ε] has σ = ε/√3; the mean of n draws has σ/√n
        let se = 0.2 / 3f64.sqrt() / (eta.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "{mean}");
        assert!(eta.iter().all(|v| v.abs() <= 0.2));
    }

    #[test]
    fn attack_leaves_model_untouched_and_stays_in_ball() {
        let cfg = ModelConfig {
            dt: 4,
            da: 3,
            u_text: 3,
            u_audio: 3,
            u_fused: 3,
            attn_dim: 2,
            feature_dim: 3,
            ..Default::default()
        };
        let params = init_params(&cfg);
        let before = params.checksum();
        let model = Regressor::new(&params, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng, r, c| {
            Tensor::matrix(
                r,
                c,
                (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (t, a) = (mk(&mut rng, 4, 4), mk(&mut rng, 4, 3));
        let attack = AttackConfig {
            epsilon: 0.3,
            beta: 0.1,
            steps: 5,
            ..Default::default()
        };
        let (ta, aa) = pgd_perturb(&model, &t, &a, 1.0, &attack).unwrap();
        assert!(linf_distance(&ta, &t) <= 0.3 && linf_distance(&aa, &a) <= 0.3);
        assert_eq!(params.checksum(), before);

        let clean = model.predict(&t, &a).unwrap();
        let adv = model.predict(&ta, &aa).unwrap();
        // reported, not a hard property for the nonconvex model; this seed increases the loss
        assert!((adv - 1.0).powi(2) >= (clean - 1.0).powi(2));

        let text_only = AttackConfig {
            target: PerturbTarget::Text,
            ..attack
        };
        let (_, aa) = pgd_perturb(&model, &t, &a, 1.0, &text_only).unwrap();
        assert_eq!(aa, a);
    }

    #[test]
    fn invalid_config() {
        assert!(one_step(-1.0, 0.1, 1).validate().is_err());
        assert!(one_step(0.1, 0.0, 1).validate().is_err());
        assert!(one_step(0.1, 0.1, 0).validate().is_err());
    }

    proptest! {
        #[test]
        fn linear_one_step_closed_form(
            w in prop::collection::vec(prop_oneof![-3.0f64..-0.01, 0.01f64..3.0], 1..8),
            seed in 0u64..1000,
            y in -2.0f64..2.0,
            beta in 0.001f64..0.5,
            slack in 0.0f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::row_vector((0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let model = LinearModel::new(w.clone(), 0.1);
            let r = model.predict(&x) - y;
            prop_assume!(r.abs() > 1e-9);
            let cfg = one_step(beta + slack, beta, 1);
            let adv = pgd_perturb_masked(&model, std::slice::from_ref(&x), y, &cfg, &[true]).unwrap();
            let loss = (model.predict(&adv[0]) - y).powi(2);
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            let expected = (r.abs() + beta * l1).powi(2);
            prop_assert!((loss - expected).abs() <= 1e-10 * expected.max(1.0));
            prop_assert!(loss >= r * r);
            prop_assert!(linf_distance(&adv[0], &x) <= cfg.epsilon);
        }
    }
}
