use std::sync::atomic::{AtomicU64, Ordering};

use super::{BiLstm, Lstm, Modality, ModelConfig, ModelError, ModelParams, Params};
use crate::autodiff::{Graph, Tensor, TensorError, Var};

pub type BoundParams = Params<Var>;

/// Adds every parameter to `g` as a borrowed leaf.
pub fn bind<'a>(g: &mut Graph<'a>, params: &'a ModelParams, requires_grad: bool) -> BoundParams {
    params.map(|t| g.leaf_ref(t, requires_grad))
}

static ATTENTION_POOLS: AtomicU64 = AtomicU64::new(0);
static ATTENTION_MAX_DEV: AtomicU64 = AtomicU64::new(0);

/// Number of attention poolings evaluated in this process and the largest
/// observed `|Σ α − 1|`.
pub fn attention_audit() -> (u64, f64) {
    (
        ATTENTION_POOLS.load(Ordering::Relaxed),
        f64::from_bits(ATTENTION_MAX_DEV.load(Ordering::Relaxed)),
    )
}

fn record_attention(alpha: &Tensor) {
    let dev = (alpha.data().iter().sum::<f64>() - 1.0).abs();
    ATTENTION_POOLS.fetch_add(1, Ordering::Relaxed);
    // non-negative f64 bit patterns order like the values
    ATTENTION_MAX_DEV.fetch_max(dev.to_bits(), Ordering::Relaxed);
    debug_assert!(dev <= 1e-10, "attention weights sum to 1 + {dev}");
}

/// Runs one LSTM direction over the rows of `x` with zero initial state.
/// Returns the hidden state at every position, in position order.
fn lstm_direction(
    g: &mut Graph<'_>,
    x: Var,
    w: &Lstm<Var>,
    u: usize,
    reverse: bool,
) -> Result<Vec<Var>, TensorError> {
    let q = g.shape(x)[0];
    let xw = g.matmul(x, w.w_x)?;
    let pre = g.add_row(xw, w.b)?;
    let mut states: Vec<Option<Var>> = vec![None; q];
    let mut h_prev: Option<Var> = None;
    let mut c_prev: Option<Var> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..q).rev())
    } else {
        Box::new(0..q)
    };
    for step in order {
        let mut gates = g.slice(pre, 0, step, step + 1)?;
        if let Some(h) = h_prev {
            let rec = g.matmul(h, w.w_h)?;
            gates = g.add(gates, rec)?;
        }
        let i_pre = g.slice(gates, 1, 0, u)?;
        let f_pre = g.slice(gates, 1, u, 2 * u)?;
        let c_pre = g.slice(gates, 1, 2 * u, 3 * u)?;
        let o_pre = g.slice(gates, 1, 3 * u, 4 * u)?;
        let i = g.sigmoid(i_pre)?;
        let o = g.sigmoid(o_pre)?;
        let cand = g.tanh(c_pre)?;
        let ic = g.mul(i, cand)?;
        let c = match c_prev {
            Some(c_old) => {
                let f = g.sigmoid(f_pre)?;
                let keep = g.mul(f, c_old)?;
                g.add(keep, ic)?
            }
            None => ic,
        };
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        states[step] = Some(h);
        h_prev = Some(h);
        c_prev = Some(c);
    }
    Ok(states
        .into_iter()
        .map(|s| s.expect("every step visited"))
        .collect())
}

/// `Q × Din → Q × 2U`; row `q` is `[h_fwd(q), h_bwd(q)]`.
pub fn bilstm_graph(
    g: &mut Graph<'_>,
    x: Var,
    w: &BiLstm<Var>,
    u: usize,
) -> Result<Var, TensorError> {
    let fwd = lstm_direction(g, x, &w.fwd, u, false)?;
    let bwd = lstm_direction(g, x, &w.bwd, u, true)?;
    let hf = g.concat(&fwd, 0)?;
    let hb = g.concat(&bwd, 0)?;
    g.concat(&[hf, hb], 1)
}

/// Attention pooling over the rows of `h`: scores `c = tanh(H W + b) u`,
/// weights `α = softmax(c)`, pooled `a = αᵀ H`. Returns `(a, α)`.
pub fn attention_graph(
    g: &mut Graph<'_>,
    h: Var,
    w: Var,
    b: Var,
    u: Var,
) -> Result<(Var, Var), TensorError> {
    let proj = g.matmul(h, w)?;
    let shifted = g.add_row(proj, b)?;
    let act = g.tanh(shifted)?;
    let scores = g.matmul(act, u)?;
    let alpha = g.softmax(scores)?;
    let alpha_t = g.transpose(alpha)?;
    let pooled = g.matmul(alpha_t, h)?;
    record_attention(g.value(alpha));
    Ok((pooled, alpha))
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    /// `1 × 1`
    pub y: Var,
    /// `Q × 1`
    pub alpha: Var,
}

/// Builds the full pipeline: per-modality BiLSTMs, affine fusion, fused
/// BiLSTM, attention pooling, `[a, h_Q]` and the linear head. Branches
/// excluded by `modality` are not evaluated.
pub fn predict_graph(
    g: &mut Graph<'_>,
    p: &BoundParams,
    text: Var,
    audio: Var,
    cfg: &ModelConfig,
    modality: Modality,
) -> Result<Prediction, TensorError> {
    let mut fused_in: Option<Var> = None;
    if modality.uses_text() {
        let ht = bilstm_graph(g, text, &p.text, cfg.u_text)?;
        fused_in = Some(g.matmul(ht, p.proj_text)?);
    }
    if modality.uses_audio() {
        let ha = bilstm_graph(g, audio, &p.audio, cfg.u_audio)?;
        let za = g.matmul(ha, p.proj_audio)?;
        fused_in = Some(match fused_in {
            Some(zt) => g.add(zt, za)?,
            None => za,
        });
    }
    let z = g.add_row(fused_in.expect("at least one modality"), p.proj_b)?;
    let h = bilstm_graph(g, z, &p.fused, cfg.u_fused)?;
    let q = g.shape(h)[0];
    let (pooled, alpha) = attention_graph(g, h, p.attn_w, p.attn_b, p.attn_u)?;
    let last = g.slice(h, 0, q - 1, q)?;
    let latent = g.concat(&[pooled, last], 1)?;
    let out = g.matmul(latent, p.head_w)?;
    let y = g.add(out, p.head_b)?;
    Ok(Prediction { y, alpha })
}

pub(super) fn check_inputs(
    text: &Tensor,
    audio: &Tensor,
    cfg: &ModelConfig,
    modality: Modality,
) -> Result<(), ModelError> {
    let shape_err = |reason: String| ModelError::Input(reason);
    if text.shape().len() != 2 || audio.shape().len() != 2 {
        return Err(shape_err("embeddings must be matrices".into()));
    }
    if modality.uses_text() && text.cols() != cfg.dt {
        return Err(shape_err(format!(
            "text dim {} != Dt {}",
            text.cols(),
            cfg.dt
        )));
    }
    if modality.uses_audio() && audio.cols() != cfg.da {
        return Err(shape_err(format!(
            "audio dim {} != Da {}",
            audio.cols(),
            cfg.da
        )));
    }
    if modality == Modality::Fused && text.rows() != audio.rows() {
        return Err(shape_err(format!(
            "text has {} rows, audio has {}",
            text.rows(),
            audio.rows()
        )));
    }
    Ok(())
}
