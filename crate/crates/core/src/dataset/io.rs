use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusMeta, DatasetError, EarningsCallRecord, Gender};
use crate::autodiff::Tensor;

#[derive(Serialize, Deserialize)]
struct RecordLine {
    call_id: String,
    ticker: String,
    call_date: String,
    gender: String,
    text_emb: Vec<Vec<f64>>,
    audio_emb: Vec<Vec<f64>>,
    targets: BTreeMap<String, f64>,
}

fn matrix(call_id: &str, field: &str, rows: &[Vec<f64>]) -> Result<Tensor, DatasetError> {
    if rows.is_empty() {
        return Err(DatasetError::Dimension {
            call_id: call_id.to_string(),
            reason: format!("{field} has no rows"),
        });
    }
    Tensor::from_rows(rows).map_err(|e| DatasetError::Dimension {
        call_id: call_id.to_string(),
        reason: format!("{field}: {e}"),
    })
}

fn decode(line_no: usize, line: RecordLine) -> Result<EarningsCallRecord, DatasetError> {
    let gender: Gender = line
        .gender
        .parse()
        .map_err(|token| DatasetError::UnknownGender {
            call_id: line.call_id.clone(),
            token,
        })?;
    let call_date = NaiveDate::parse_from_str(&line.call_date, "%Y-%m-%d").map_err(|e| {
        DatasetError::Parse {
            line: line_no,
            reason: format!("call_date `{}`: {e}", line.call_date),
        }
    })?;
    let mut targets = BTreeMap::new();
    for (k, v) in line.targets {
        let h: usize = k.parse().map_err(|_| DatasetError::Parse {
            line: line_no,
            reason: format!("target key `{k}` is not a horizon"),
        })?;
        targets.insert(h, v);
    }
    Ok(EarningsCallRecord {
        text_emb: matrix(&line.call_id, "text_emb", &line.text_emb)?,
        audio_emb: matrix(&line.call_id, "audio_emb", &line.audio_emb)?,
        call_id: line.call_id,
        ticker: line.ticker,
        call_date,
        gender,
        targets,
    })
}

fn encode(rec: &EarningsCallRecord) -> RecordLine {
    RecordLine {
        call_id: rec.call_id.clone(),
        ticker: rec.ticker.clone(),
        call_date: rec.call_date.format("%Y-%m-%d").to_string(),
        gender: rec.gender.as_str().to_string(),
        text_emb: rec.text_emb.to_rows(),
        audio_emb: rec.audio_emb.to_rows(),
        targets: rec
            .targets
            .iter()
            .map(|(h, v)| (h.to_string(), *v))
            .collect(),
    }
}

/// Parses NDJSON corpus text: a meta line followed by one record per line.
pub fn parse_corpus(text: &str) -> Result<Corpus, DatasetError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(DatasetError::Empty)?;
    let meta: CorpusMeta = serde_json::from_str(header).map_err(|e| DatasetError::Parse {
        line: 1,
        reason: format!("meta: {e}"),
    })?;
    let mut records = Vec::with_capacity(meta.p);
    for (i, line) in lines {
        let raw: RecordLine = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let rec = decode(i + 1, raw)?;
        rec.validate(&meta)?;
        records.push(rec);
    }
    if records.len() != meta.p {
        return Err(DatasetError::CountMismatch {
            declared: meta.p,
            found: records.len(),
        });
    }
    Ok(Corpus { meta, records })
}

pub fn load_corpus(path: &Path) -> Result<Corpus, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> std::io::Result<()> {
    let to_io = |e: serde_json::Error| std::io::Error::new(std::io::ErrorKind::InvalidData, e);
    writeln!(
        out,
        "{}",
        serde_json::to_string(&corpus.meta).map_err(to_io)?
    )?;
    for rec in &corpus.records {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&encode(rec)).map_err(to_io)?
        )?;
    }
    out.flush()
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    write_corpus(corpus, std::io::BufWriter::new(file)).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"P":2,"Q_max":3,"Dt":4,"Da":3,"horizons":[3,7,15]}
{"call_id":"a","ticker":"AAA","call_date":"2019-01-02","gender":"male","text_emb":[[0.1,0.2,0.3,0.4],[1,2,3,4]],"audio_emb":[[1,1,1],[2,2,2]],"targets":{"3":-4.1,"7":-4.3,"15":-4.5}}
{"call_id":"b","ticker":"BBB","call_date":"2019-02-02","gender":"female","text_emb":[[0,0,0,0]],"audio_emb":[[0.5,0.5,0.5]],"targets":{"3":-3.9,"7":-4.0,"15":-4.2}}
"#;

    #[test]
    fn loads_fixture() {
        let c = parse_corpus(FIXTURE).unwrap();
        assert_eq!((c.meta.p, c.meta.dt, c.meta.da), (2, 4, 3));
        assert_eq!(c.records[1].gender, Gender::Female);
        assert_eq!(c.records[0].target(7), Some(-4.3));
    }

    #[test]
    fn misaligned_rows_rejected() {
        let bad = FIXTURE.replace(
            r#""audio_emb":[[1,1,1],[2,2,2]]"#,
            r#""audio_emb":[[1,1,1]]"#,
        );
        let err = parse_corpus(&bad).unwrap_err();
        assert!(
            matches!(err, DatasetError::Dimension { ref call_id, .. } if call_id == "a"),
            "{err}"
        );
    }

    #[test]
    fn wrong_dim_names_record() {
        let bad = FIXTURE.replace(r#"[[0.5,0.5,0.5]]"#, r#"[[0.5,0.5]]"#);
        let err = parse_corpus(&bad).unwrap_err();
        assert!(err.to_string().contains("record b"), "{err}");
    }

    #[test]
    fn unknown_gender_rejected() {
        let bad = FIXTURE.replace(r#""gender":"female""#, r#""gender":"unknown""#);
        assert!(matches!(
            parse_corpus(&bad),
            Err(DatasetError::UnknownGender { .. })
        ));
    }

    #[test]
    fn missing_horizon_rejected() {
        let bad = FIXTURE.replace(r#","15":-4.2"#, "");
        assert!(matches!(
            parse_corpus(&bad),
            Err(DatasetError::MissingTarget { horizon: 15, .. })
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        let bad = FIXTURE.replacen(r#""P":2"#, r#""P":3"#, 1);
        assert!(matches!(
            parse_corpus(&bad),
            Err(DatasetError::CountMismatch { .. })
        ));
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let corpus = super::super::generate_synthetic(&super::super::SynthConfig {
            p: 6,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let back = parse_corpus(std::str::from_utf8(&buf).unwrap()).unwrap();
        for (a, b) in corpus.records.iter().zip(&back.records) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.text_emb), bits(&b.text_emb));
            assert_eq!(bits(&a.audio_emb), bits(&b.audio_emb));
            assert_eq!(a.targets, b.targets);
        }
        assert_eq!(corpus, back);
    }
}
