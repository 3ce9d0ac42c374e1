//! Multimodal attentive BiLSTM regressor.
//!
//! Text and audio sentence embeddings each pass through their own BiLSTM.
//! The two contextual sequences are mapped by one affine feature layer into
//! a shared width, run through a fused BiLSTM, pooled by additive attention,
//! concatenated with the last fused hidden row and read out by a linear head.

mod checkpoint;
mod network;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check_many, GradCheck, Graph, Tensor, TensorError};

pub use checkpoint::{
    load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use network::{
    attention_audit, attention_graph, bilstm_graph, bind, predict_graph, BoundParams, Prediction,
};
pub use params::{init_params, BiLstm, Lstm, ModelParams, Params, PARAM_NAMES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which input branches feed the fused block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Fused,
    Text,
    Audio,
}

impl Modality {
    pub fn uses_text(self) -> bool {
        matches!(self, Modality::Fused | Modality::Text)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Modality::Fused | Modality::Audio)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Fused => "fused",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fused" => Ok(Modality::Fused),
            "text" => Ok(Modality::Text),
            "audio" => Ok(Modality::Audio),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dt: usize,
    pub da: usize,
    /// per-direction hidden size of the text BiLSTM
    pub u_text: usize,
    pub u_audio: usize,
    /// per-direction hidden size of the fused BiLSTM
    pub u_fused: usize,
    pub attn_dim: usize,
    /// output width of the feature mapping layer
    pub feature_dim: usize,
    pub modality: Modality,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dt: 16,
            da: 8,
            u_text: 32,
            u_audio: 32,
            u_fused: 64,
            attn_dim: 32,
            feature_dim: 32,
            modality: Modality::Fused,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.dt,
            self.da,
            self.u_text,
            self.u_audio,
            self.u_fused,
            self.attn_dim,
            self.feature_dim,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Input(
                "model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluates one BiLSTM on a `Q × Din` matrix.
pub fn bilstm_forward(
    x: &Tensor,
    weights: &BiLstm<Tensor>,
    u: usize,
) -> Result<Tensor, ModelError> {
    if x.shape().len() != 2 || x.rows() == 0 {
        return Err(ModelError::Input(
            "BiLSTM input must be a non-empty matrix".into(),
        ));
    }
    let mut g = Graph::new();
    let xv = g.leaf_ref(x, false);
    let w = BiLstm {
        fwd: Lstm {
            w_x: g.leaf_ref(&weights.fwd.w_x, false),
            w_h: g.leaf_ref(&weights.fwd.w_h, false),
            b: g.leaf_ref(&weights.fwd.b, false),
        },
        bwd: Lstm {
            w_x: g.leaf_ref(&weights.bwd.w_x, false),
            w_h: g.leaf_ref(&weights.bwd.w_h, false),
            b: g.leaf_ref(&weights.bwd.b, false),
        },
    };
    let h = bilstm_graph(&mut g, xv, &w, u)?;
    Ok(g.value(h).clone())
}

/// Pools the rows of `h`; returns `(a, alpha)` with `a: 1 × 2U`, `alpha: Q × 1`.
pub fn attention_pool(
    h: &Tensor,
    w_a: &Tensor,
    b_a: &Tensor,
    u: &Tensor,
) -> Result<(Tensor, Tensor), ModelError> {
    let mut g = Graph::new();
    let hv = g.leaf_ref(h, false);
    let (wv, bv, uv) = (
        g.leaf_ref(w_a, false),
        g.leaf_ref(b_a, false),
        g.leaf_ref(u, false),
    );
    let (a, alpha) = attention_graph(&mut g, hv, wv, bv, uv)?;
    Ok((g.value(a).clone(), g.value(alpha).clone()))
}

/// A parameter snapshot together with the branch selection it is
/// evaluated with; borrowed by attacks and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Regressor<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
    pub modality: Modality,
}

impl<'a> Regressor<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig) -> Self {
        Self {
            params,
            cfg,
            modality: cfg.modality,
        }
    }

    pub fn predict(&self, text: &Tensor, audio: &Tensor) -> Result<f64, ModelError> {
        forward_unimodal(text, audio, self.params, self.cfg, self.modality)
    }
}

/// Prediction and attention weights for one call.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub y: f64,
    pub alpha: Vec<f64>,
}

pub fn forward_detailed(
    text: &Tensor,
    audio: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    modality: Modality,
) -> Result<Output, ModelError> {
    network::check_inputs(text, audio, cfg, modality)?;
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let (t, a) = (g.leaf_ref(text, false), g.leaf_ref(audio, false));
    let pred = predict_graph(&mut g, &p, t, a, cfg, modality)?;
    Ok(Output {
        y: g.value(pred.y).item(),
        alpha: g.value(pred.alpha).data().to_vec(),
    })
}

/// Prediction using the modality configured in `cfg`.
pub fn forward(
    text: &Tensor,
    audio: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64, ModelError> {
    forward_detailed(text, audio, params, cfg, cfg.modality).map(|o| o.y)
}

pub fn forward_unimodal(
    text: &Tensor,
    audio: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    modality: Modality,
) -> Result<f64, ModelError> {
    forward_detailed(text, audio, params, cfg, modality).map(|o| o.y)
}

/// Finite-difference check of the squared-error loss of one call, with
/// respect to the parameters (first) and to both input matrices (second).
///
/// `stride` > 1 samples every `stride`-th parameter coordinate.
pub fn check_gradients(
    text: &Tensor,
    audio: &Tensor,
    target: f64,
    params: &ModelParams,
    cfg: &ModelConfig,
    h: f64,
    stride: usize,
) -> Result<(GradCheck, GradCheck), ModelError> {
    network::check_inputs(text, audio, cfg, cfg.modality)?;
    let modality = cfg.modality;
    let sq_err = |g: &mut Graph<'_>, y| -> Result<_, TensorError> {
        let t = g.constant(Tensor::matrix(1, 1, vec![target])?);
        let r = g.sub(y, t)?;
        g.square(r)
    };

    let leaves: Vec<Tensor> = params.refs().into_iter().cloned().collect();
    let theta = grad_check_many(
        |g, vars| {
            let p = BoundParams::from_vec(vars.to_vec());
            let t = g.constant(text.clone());
            let a = g.constant(audio.clone());
            let pred = predict_graph(g, &p, t, a, cfg, modality)?;
            sq_err(g, pred.y)
        },
        &leaves,
        h,
        stride,
    )?;

    let inputs = [text.clone(), audio.clone()];
    let x = grad_check_many(
        |g, vars| {
            let p = params.map(|t| g.constant(t.clone()));
            let pred = predict_graph(g, &p, vars[0], vars[1], cfg, modality)?;
            sq_err(g, pred.y)
        },
        &inputs,
        h,
        1,
    )?;
    Ok((theta, x))
}
