//! Earnings-call corpora: record types, NDJSON storage, the synthetic
//! generator, splitting and input standardization.

mod io;
mod split;
mod standardize;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use io::{load_corpus, parse_corpus, save_corpus, write_corpus};
pub use split::{split_corpus, Split, SplitMode};
pub use standardize::Standardizer;
pub use synth::{generate_synthetic, generate_synthetic_with_truth, GroundTruth, SynthConfig};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record {call_id}: {reason}")]
    Dimension { call_id: String, reason: String },
    #[error("record {call_id}: unknown gender `{token}`")]
    UnknownGender { call_id: String, token: String },
    #[error("record {call_id}: missing target for horizon {horizon}")]
    MissingTarget { call_id: String, horizon: usize },
    #[error("record {call_id}: non-finite value in {field}")]
    NonFinite {
        call_id: String,
        field: &'static str,
    },
    #[error("corpus header declares P={declared} but file holds {found} records")]
    CountMismatch { declared: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty corpus")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            Gender::Female => Gender::Male,
            Gender::Male => Gender::Female,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "female" | "f" | "F" => Ok(Gender::Female),
            "male" | "m" | "M" => Ok(Gender::Male),
            other => Err(other.to_string()),
        }
    }
}

/// One earnings call: sentence-aligned text and audio embeddings plus
/// log-volatility targets keyed by horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EarningsCallRecord {
    pub call_id: String,
    pub ticker: String,
    pub call_date: NaiveDate,
    pub gender: Gender,
    /// `Q_e × Dt`
    pub text_emb: Tensor,
    /// `Q_e × Da`
    pub audio_emb: Tensor,
    pub targets: BTreeMap<usize, f64>,
}

impl EarningsCallRecord {
    pub fn sentences(&self) -> usize {
        self.text_emb.rows()
    }

    pub fn target(&self, horizon: usize) -> Option<f64> {
        self.targets.get(&horizon).copied()
    }

    /// Checks the record against corpus dimensions.
    pub fn validate(&self, meta: &CorpusMeta) -> Result<(), DatasetError> {
        let dim_err = |reason: String| DatasetError::Dimension {
            call_id: self.call_id.clone(),
            reason,
        };
        if self.text_emb.shape().len() != 2 || self.audio_emb.shape().len() != 2 {
            return Err(dim_err("embeddings must be matrices".into()));
        }
        if self.text_emb.rows() != self.audio_emb.rows() {
            return Err(dim_err(format!(
                "text has {} rows but audio has {} (must be sentence-aligned)",
                self.text_emb.rows(),
                self.audio_emb.rows()
            )));
        }
        let q = self.text_emb.rows();
        if q == 0 || q > meta.q_max {
            return Err(dim_err(format!("{q} sentences outside 1..={}", meta.q_max)));
        }
        if self.text_emb.cols() != meta.dt {
            return Err(dim_err(format!(
                "text dim {} != Dt {}",
                self.text_emb.cols(),
                meta.dt
            )));
        }
        if self.audio_emb.cols() != meta.da {
            return Err(dim_err(format!(
                "audio dim {} != Da {}",
                self.audio_emb.cols(),
                meta.da
            )));
        }
        if !self.text_emb.is_finite() {
            return Err(DatasetError::NonFinite {
                call_id: self.call_id.clone(),
                field: "text_emb",
            });
        }
        if !self.audio_emb.is_finite() {
            return Err(DatasetError::NonFinite {
                call_id: self.call_id.clone(),
                field: "audio_emb",
            });
        }
        for &h in &meta.horizons {
            match self.targets.get(&h) {
                None => {
                    return Err(DatasetError::MissingTarget {
                        call_id: self.call_id.clone(),
                        horizon: h,
                    })
                }
                Some(v) if !v.is_finite() => {
                    return Err(DatasetError::NonFinite {
                        call_id: self.call_id.clone(),
                        field: "targets",
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "Q_max")]
    pub q_max: usize,
    #[serde(rename = "Dt")]
    pub dt: usize,
    #[serde(rename = "Da")]
    pub da: usize,
    pub horizons: Vec<usize>,
    /// Generator settings for synthetic corpora, so a file can be regenerated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub records: Vec<EarningsCallRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<EarningsCallRecord> {
        indices.iter().map(|&i| self.records[i].clone()).collect()
    }
}
