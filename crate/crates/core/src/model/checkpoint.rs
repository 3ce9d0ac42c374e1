//! NDJSON checkpoints: a header line followed by one named tensor per line.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelConfig, ModelError, ModelParams, PARAM_NAMES};
use crate::autodiff::Tensor;
use crate::dataset::Standardizer;

const FORMAT: &str = "earnvol-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub horizon: usize,
    pub standardizer: Standardizer,
    pub params: ModelParams,
    /// Resolved run configuration, kept for replay.
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    model: ModelConfig,
    horizon: usize,
    standardizer: Standardizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorLine {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> std::io::Result<()> {
    let to_io = |e: serde_json::Error| std::io::Error::new(std::io::ErrorKind::InvalidData, e);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        model: ckpt.model.clone(),
        horizon: ckpt.horizon,
        standardizer: ckpt.standardizer.clone(),
        config: ckpt.config.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(to_io)?)?;
    for (name, t) in PARAM_NAMES.iter().zip(ckpt.params.refs()) {
        let line = TensorLine {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).map_err(to_io)?)?;
    }
    out.flush()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    write_checkpoint(ckpt, std::io::BufWriter::new(file)).map_err(io_err)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Header =
        serde_json::from_str(lines.next().ok_or_else(|| bad("empty file".into()))?)
            .map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    header.model.validate()?;
    let expected = init_params(&header.model);
    let mut leaves = Vec::with_capacity(PARAM_NAMES.len());
    for (i, (name, reference)) in PARAM_NAMES.iter().zip(expected.refs()).enumerate() {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let t: TensorLine =
            serde_json::from_str(line).map_err(|e| bad(format!("tensor {i}: {e}")))?;
        if t.name != *name {
            return Err(bad(format!("expected tensor {name}, found {}", t.name)));
        }
        if t.shape != reference.shape() {
            return Err(bad(format!(
                "{name}: shape {:?} does not match model config {:?}",
                t.shape,
                reference.shape()
            )));
        }
        leaves.push(Tensor::new(t.shape, t.data).map_err(|e| bad(format!("{name}: {e}")))?);
    }
    if lines.next().is_some() {
        return Err(bad("trailing data after last tensor".into()));
    }
    Ok(Checkpoint {
        model: header.model,
        horizon: header.horizon,
        standardizer: header.standardizer,
        params: ModelParams::from_vec(leaves),
        config: header.config,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = ModelConfig {
            dt: 3,
            da: 2,
            u_text: 2,
            u_audio: 2,
            u_fused: 3,
            attn_dim: 2,
            feature_dim: 2,
            seed: 4,
            ..Default::default()
        };
        let mut params = init_params(&model);
        // awkward values that need all 17 significant digits
        params.head_b.data_mut()[0] = 0.1 + 0.2;
        params.attn_u.data_mut()[0] = -1.0 / 3.0;
        let ckpt = Checkpoint {
            model: model.clone(),
            horizon: 7,
            standardizer: Standardizer::identity(3, 2),
            params,
            config: Some(serde_json::json!({"seed": 4})),
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let back = parse_checkpoint(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.params.refs().iter().zip(ckpt.params.refs()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = ModelConfig {
            dt: 3,
            da: 2,
            u_text: 2,
            u_audio: 2,
            u_fused: 3,
            attn_dim: 2,
            feature_dim: 2,
            ..Default::default()
        };
        let ckpt = Checkpoint {
            model: model.clone(),
            horizon: 3,
            standardizer: Standardizer::identity(3, 2),
            params: init_params(&model),
            config: None,
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let text = String::from_utf8(buf)
            .unwrap()
            .replacen("\"dt\":3", "\"dt\":4", 1);
        assert!(matches!(
            parse_checkpoint(&text),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
