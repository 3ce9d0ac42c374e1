use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::seed::{self, Stream};

/// One LSTM direction. Gates are packed column-wise in the order
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    /// `Din × 4U`
    pub w_x: T,
    /// `U × 4U`
    pub w_h: T,
    /// `1 × 4U`
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm<T> {
    pub fwd: Lstm<T>,
    pub bwd: Lstm<T>,
}

/// All learnable weights, generic over the leaf representation so the same
/// layout serves tensors, graph handles and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub text: BiLstm<T>,
    pub audio: BiLstm<T>,
    /// `2U_t × F`
    pub proj_text: T,
    /// `2U_a × F`
    pub proj_audio: T,
    /// `1 × F`
    pub proj_b: T,
    pub fused: BiLstm<T>,
    /// `2U × K` (applied as `H · W`)
    pub attn_w: T,
    /// `1 × K`
    pub attn_b: T,
    /// `K × 1`
    pub attn_u: T,
    /// `4U × 1`
    pub head_w: T,
    /// `1 × 1`
    pub head_b: T,
}

pub type ModelParams = Params<Tensor>;

pub const PARAM_NAMES: [&str; 26] = [
    "text.fwd.w_x",
    "text.fwd.w_h",
    "text.fwd.b",
    "text.bwd.w_x",
    "text.bwd.w_h",
    "text.bwd.b",
    "audio.fwd.w_x",
    "audio.fwd.w_h",
    "audio.fwd.b",
    "audio.bwd.w_x",
    "audio.bwd.w_h",
    "audio.bwd.b",
    "proj.text",
    "proj.audio",
    "proj.b",
    "fused.fwd.w_x",
    "fused.fwd.w_h",
    "fused.fwd.b",
    "fused.bwd.w_x",
    "fused.bwd.w_h",
    "fused.bwd.b",
    "attn.w",
    "attn.b",
    "attn.u",
    "head.w",
    "head.b",
];

impl<T> Params<T> {
    /// Leaves in canonical order (matching [`PARAM_NAMES`]).
    pub fn refs(&self) -> Vec<&T> {
        let mut out = Vec::with_capacity(PARAM_NAMES.len());
        for bi in [&self.text, &self.audio] {
            for l in [&bi.fwd, &bi.bwd] {
                out.extend([&l.w_x, &l.w_h, &l.b]);
            }
        }
        out.extend([&self.proj_text, &self.proj_audio, &self.proj_b]);
        for l in [&self.fused.fwd, &self.fused.bwd] {
            out.extend([&l.w_x, &l.w_h, &l.b]);
        }
        out.extend([
            &self.attn_w,
            &self.attn_b,
            &self.attn_u,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    pub fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::with_capacity(PARAM_NAMES.len());
        let Params {
            text,
            audio,
            proj_text,
            proj_audio,
            proj_b,
            fused,
            attn_w,
            attn_b,
            attn_u,
            head_w,
            head_b,
        } = self;
        for bi in [text, audio] {
            let BiLstm { fwd, bwd } = bi;
            for l in [fwd, bwd] {
                out.extend([&mut l.w_x, &mut l.w_h, &mut l.b]);
            }
        }
        out.extend([proj_text, proj_audio, proj_b]);
        let BiLstm { fwd, bwd } = fused;
        for l in [fwd, bwd] {
            out.extend([&mut l.w_x, &mut l.w_h, &mut l.b]);
        }
        out.extend([attn_w, attn_b, attn_u, head_w, head_b]);
        out
    }

    /// Rebuilds a parameter set from leaves in canonical order.
    pub fn from_vec(leaves: Vec<T>) -> Self {
        assert_eq!(
            leaves.len(),
            PARAM_NAMES.len(),
            "wrong number of parameter leaves"
        );
        let mut it = leaves.into_iter();
        let mut next = || it.next().expect("length checked");
        let lstm = |next: &mut dyn FnMut() -> T| Lstm {
            w_x: next(),
            w_h: next(),
            b: next(),
        };
        let text = BiLstm {
            fwd: lstm(&mut next),
            bwd: lstm(&mut next),
        };
        let audio = BiLstm {
            fwd: lstm(&mut next),
            bwd: lstm(&mut next),
        };
        let (proj_text, proj_audio, proj_b) = (next(), next(), next());
        let fused = BiLstm {
            fwd: lstm(&mut next),
            bwd: lstm(&mut next),
        };
        Params {
            text,
            audio,
            proj_text,
            proj_audio,
            proj_b,
            fused,
            attn_w: next(),
            attn_b: next(),
            attn_u: next(),
            head_w: next(),
            head_b: next(),
        }
    }

    pub fn map<'s, U>(&'s self, f: impl FnMut(&'s T) -> U) -> Params<U> {
        Params::from_vec(self.refs().into_iter().map(f).collect())
    }
}

impl ModelParams {
    pub fn squared_norm(&self) -> f64 {
        self.refs().iter().map(|t| t.squared_norm()).sum()
    }

    pub fn numel(&self) -> usize {
        self.refs().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.refs().iter().all(|t| t.is_finite())
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in self.refs() {
            for v in t.data() {
                h = seed::splitmix64(h ^ v.to_bits());
            }
        }
        h
    }

    pub fn l2_distance(&self, other: &ModelParams) -> f64 {
        self.refs()
            .iter()
            .zip(other.refs())
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn lstm(rng: &mut ChaCha8Rng, din: usize, u: usize) -> Lstm<Tensor> {
    let mut b = Tensor::zeros(&[1, 4 * u]);
    b.data_mut()[u..2 * u].fill(1.0);
    Lstm {
        w_x: uniform(rng, din, 4 * u, din),
        w_h: uniform(rng, u, 4 * u, u),
        b,
    }
}

fn bilstm(rng: &mut ChaCha8Rng, din: usize, u: usize) -> BiLstm<Tensor> {
    BiLstm {
        fwd: lstm(rng, din, u),
        bwd: lstm(rng, din, u),
    }
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases except the LSTM forget
/// gates (+1). Deterministic in `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> ModelParams {
    let mut rng = seed::rng(cfg.seed, Stream::Init, 0);
    let fuse_in = 2 * cfg.u_text + 2 * cfg.u_audio;
    Params {
        text: bilstm(&mut rng, cfg.dt, cfg.u_text),
        audio: bilstm(&mut rng, cfg.da, cfg.u_audio),
        proj_text: uniform(&mut rng, 2 * cfg.u_text, cfg.feature_dim, fuse_in),
        proj_audio: uniform(&mut rng, 2 * cfg.u_audio, cfg.feature_dim, fuse_in),
        proj_b: Tensor::zeros(&[1, cfg.feature_dim]),
        fused: bilstm(&mut rng, cfg.feature_dim, cfg.u_fused),
        attn_w: uniform(&mut rng, 2 * cfg.u_fused, cfg.attn_dim, 2 * cfg.u_fused),
        attn_b: Tensor::zeros(&[1, cfg.attn_dim]),
        attn_u: uniform(&mut rng, cfg.attn_dim, 1, cfg.attn_dim),
        head_w: uniform(&mut rng, 4 * cfg.u_fused, 1, 4 * cfg.u_fused),
        head_b: Tensor::zeros(&[1, 1]),
    }
}
