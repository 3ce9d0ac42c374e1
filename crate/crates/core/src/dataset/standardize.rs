use serde::{Deserialize, Serialize};

use super::{DatasetError, EarningsCallRecord};
use crate::autodiff::Tensor;

/// Per-dimension affine standardization of text and audio embeddings,
/// fitted over every sentence row of the training records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub text_mean: Vec<f64>,
    pub text_std: Vec<f64>,
    pub audio_mean: Vec<f64>,
    pub audio_std: Vec<f64>,
}

fn column_stats<'a>(mats: impl Iterator<Item = &'a Tensor>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut n = 0usize;
    for m in mats {
        for r in 0..m.rows() {
            for (j, v) in m.row(r).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / n as f64 - m * m).max(0.0);
            if var.sqrt() < 1e-12 {
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    (mean, std)
}

fn apply_one(m: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let cols = m.cols();
    let data = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % cols]) / std[i % cols])
        .collect();
    Tensor::new(m.shape().to_vec(), data).expect("shape preserved")
}

impl Standardizer {
    pub fn identity(dt: usize, da: usize) -> Self {
        Self {
            text_mean: vec![0.0; dt],
            text_std: vec![1.0; dt],
            audio_mean: vec![0.0; da],
            audio_std: vec![1.0; da],
        }
    }

    pub fn fit(records: &[EarningsCallRecord]) -> Result<Self, DatasetError> {
        let first = records.first().ok_or(DatasetError::Empty)?;
        let (text_mean, text_std) =
            column_stats(records.iter().map(|r| &r.text_emb), first.text_emb.cols());
        let (audio_mean, audio_std) =
            column_stats(records.iter().map(|r| &r.audio_emb), first.audio_emb.cols());
        Ok(Self {
            text_mean,
            text_std,
            audio_mean,
            audio_std,
        })
    }

    /// Standardized `(text, audio)` embeddings of one record.
    pub fn apply(&self, record: &EarningsCallRecord) -> (Tensor, Tensor) {
        (
            apply_one(&record.text_emb, &self.text_mean, &self.text_std),
            apply_one(&record.audio_emb, &self.audio_mean, &self.audio_std),
        )
    }

    pub fn apply_all(&self, records: &[EarningsCallRecord]) -> Vec<EarningsCallRecord> {
        records
            .iter()
            .map(|r| {
                let (text_emb, audio_emb) = self.apply(r);
                EarningsCallRecord {
                    text_emb,
                    audio_emb,
                    ..r.clone()
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    #[test]
    fn standardized_training_rows_have_zero_mean_unit_variance() {
        let c = generate_synthetic(&SynthConfig {
            p: 40,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let s = Standardizer::fit(&c.records).unwrap();
        let std_recs = s.apply_all(&c.records);
        let refit = Standardizer::fit(&std_recs).unwrap();
        for (m, sd) in refit
            .text_mean
            .iter()
            .zip(&refit.text_std)
            .chain(refit.audio_mean.iter().zip(&refit.audio_std))
        {
            assert!(m.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_leaves_values_unchanged() {
        let c = generate_synthetic(&SynthConfig {
            p: 3,
            ..Default::default()
        })
        .unwrap();
        let s = Standardizer::identity(c.meta.dt, c.meta.da);
        let (t, a) = s.apply(&c.records[0]);
        assert_eq!(t, c.records[0].text_emb);
        assert_eq!(a, c.records[0].audio_emb);
    }
}
