//! Price ingestion and post-call volatility labels.
//!
//! A label for horizon `n` is the natural log of the population standard
//! deviation of the first `n` daily returns after the call. The first return
//! is taken between the first and second trading rows dated strictly after
//! the call date, so a label needs `n + 1` post-call closes.

use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

pub const DEFAULT_HORIZONS: [usize; 3] = [3, 7, 15];
pub const DEFAULT_VOL_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("expected header `date,adj_close`, found `{0}`")]
    Header(String),
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: non-positive price {price}")]
    NonPositivePrice { line: usize, price: f64 },
    #[error("duplicate trading date {0}")]
    DuplicateDate(NaiveDate),
    #[error("series has {len} rows, need at least 2 for a return")]
    TooShort { len: usize },
    #[error("horizon {n} needs exactly {n} returns, got {found}")]
    WindowLength { n: usize, found: usize },
    #[error("horizon must be at least 2, got {0}")]
    InvalidHorizon(usize),
    #[error("zero return variance over the window; log volatility undefined")]
    DegenerateVolatility,
    #[error("{ticker}: {available} trading rows after {call_date}, need {needed}")]
    InsufficientData {
        ticker: String,
        call_date: NaiveDate,
        available: usize,
        needed: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub ticker: String,
    rows: Vec<(NaiveDate, f64)>,
}

impl PriceSeries {
    /// Validates and sorts rows. Unsorted input is accepted with a warning.
    pub fn new(
        ticker: impl Into<String>,
        mut rows: Vec<(NaiveDate, f64)>,
    ) -> Result<Self, MarketDataError> {
        let ticker = ticker.into();
        for (i, &(_, p)) in rows.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                return Err(MarketDataError::NonPositivePrice {
                    line: i + 2,
                    price: p,
                });
            }
        }
        if rows.windows(2).any(|w| w[0].0 > w[1].0) {
            log::warn!("{ticker}: price rows not in date order; sorting");
            rows.sort_by_key(|r| r.0);
        }
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(MarketDataError::DuplicateDate(w[0].0));
        }
        Ok(Self { ticker, rows })
    }

    pub fn rows(&self) -> &[(NaiveDate, f64)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Returns a copy with every price multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            ticker: self.ticker.clone(),
            rows: self.rows.iter().map(|&(d, p)| (d, p * k)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolatilityLabel {
    pub horizon: usize,
    pub value: f64,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

/// Parses `date,adj_close` CSV text.
pub fn parse_price_str(ticker: &str, text: &str) -> Result<PriceSeries, MarketDataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| MarketDataError::Header(e.to_string()))?
        .clone();
    if header.len() != 2 || &header[0] != "date" || &header[1] != "adj_close" {
        return Err(MarketDataError::Header(
            header.iter().collect::<Vec<_>>().join(","),
        ));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| MarketDataError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(MarketDataError::MalformedRow {
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let date = parse_date(&record[0]).ok_or_else(|| MarketDataError::MalformedRow {
            line,
            reason: format!("bad date `{}`", &record[0]),
        })?;
        let price: f64 = record[1]
            .parse()
            .map_err(|_| MarketDataError::MalformedRow {
                line,
                reason: format!("bad price `{}`", &record[1]),
            })?;
        if !(price > 0.0) || !price.is_finite() {
            return Err(MarketDataError::NonPositivePrice { line, price });
        }
        rows.push((date, price));
    }
    PriceSeries::new(ticker, rows)
}

/// Reads one ticker's price file; the ticker is the file stem.
pub fn parse_price_csv(path: &Path) -> Result<PriceSeries, MarketDataError> {
    let text = std::fs::read_to_string(path).map_err(|source| MarketDataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ticker = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_price_str(&ticker, &text)
}

/// `r_i = p_i / p_{i−1} − 1`, dated by the later row.
pub fn daily_returns(series: &PriceSeries) -> Result<Vec<(NaiveDate, f64)>, MarketDataError> {
    returns_of(&series.rows)
}

fn returns_of(rows: &[(NaiveDate, f64)]) -> Result<Vec<(NaiveDate, f64)>, MarketDataError> {
    if rows.len() < 2 {
        return Err(MarketDataError::TooShort { len: rows.len() });
    }
    Ok(rows
        .windows(2)
        .map(|w| (w[1].0, w[1].1 / w[0].1 - 1.0))
        .collect())
}

/// Natural log of the population standard deviation of `returns`.
///
/// With `floor = Some(f)`, a zero-variance window yields `ln(f)` instead of
/// [`MarketDataError::DegenerateVolatility`].
pub fn log_volatility(
    returns: &[f64],
    n: usize,
    floor: Option<f64>,
) -> Result<VolatilityLabel, MarketDataError> {
    if n < 2 {
        return Err(MarketDataError::InvalidHorizon(n));
    }
    if returns.len() != n {
        return Err(MarketDataError::WindowLength {
            n,
            found: returns.len(),
        });
    }
    // Welford accumulation
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &r) in returns.iter().enumerate() {
        let delta = r - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (r - mean);
    }
    let var = m2 / n as f64;
    if var <= 0.0 {
        return match floor {
            Some(f) => Ok(VolatilityLabel {
                horizon: n,
                value: f.ln(),
            }),
            None => Err(MarketDataError::DegenerateVolatility),
        };
    }
    Ok(VolatilityLabel {
        horizon: n,
        value: var.sqrt().ln(),
    })
}

/// The `n + 1` closes a horizon-`n` label is computed from.
pub fn label_window(
    series: &PriceSeries,
    call_date: NaiveDate,
    n: usize,
) -> Result<&[(NaiveDate, f64)], MarketDataError> {
    let start = series.rows.partition_point(|&(d, _)| d <= call_date);
    let available = series.rows.len() - start;
    if available < n + 1 {
        return Err(MarketDataError::InsufficientData {
            ticker: series.ticker.clone(),
            call_date,
            available,
            needed: n + 1,
        });
    }
    Ok(&series.rows[start..start + n + 1])
}

pub fn label_call(
    series: &PriceSeries,
    call_date: NaiveDate,
    n: usize,
    floor: Option<f64>,
) -> Result<VolatilityLabel, MarketDataError> {
    let window = label_window(series, call_date, n)?;
    let returns: Vec<f64> = returns_of(window)?.into_iter().map(|(_, r)| r).collect();
    log_volatility(&returns, n, floor)
}

/// One `ticker,call_date` row of a call list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRef {
    pub ticker: String,
    pub call_date: NaiveDate,
}

pub fn parse_call_list(text: &str) -> Result<Vec<CallRef>, MarketDataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| MarketDataError::Header(e.to_string()))?
        .clone();
    if header.len() != 2 || &header[0] != "ticker" || &header[1] != "call_date" {
        return Err(MarketDataError::Header(
            header.iter().collect::<Vec<_>>().join(","),
        ));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let line = i + 2;
            let rec = rec.map_err(|e| MarketDataError::MalformedRow {
                line,
                reason: e.to_string(),
            })?;
            let call_date = parse_date(rec.get(1).unwrap_or("")).ok_or_else(|| {
                MarketDataError::MalformedRow {
                    line,
                    reason: "bad call_date".into(),
                }
            })?;
            Ok(CallRef {
                ticker: rec[0].to_string(),
                call_date,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn series(prices: &[f64]) -> PriceSeries {
        let start = d("2024-01-01");
        let rows = prices
            .iter()
            .enumerate()
            .map(|(i, &p)| (start + chrono::Days::new(i as u64), p))
            .collect();
        PriceSeries::new("TST", rows).unwrap()
    }

    /// Two-pass population standard deviation.
    fn two_pass_log_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        (ss / n).sqrt().ln()
    }

    #[test]
    fn parses_valid_file() {
        let text =
            "date,adj_close\n2024-03-01,10.0\n2024-03-04,10.5\n2024-03-05,10.2\n2024-03-06,10.9\n";
        let s = parse_price_str("ABC", text).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.rows()[1], (d("2024-03-04"), 10.5));
    }

    #[test]
    fn zero_price_rejected() {
        let text = "date,adj_close\n2024-03-01,10.0\n2024-03-04,0\n";
        let err = parse_price_str("ABC", text).unwrap_err();
        assert!(matches!(
            err,
            MarketDataError::NonPositivePrice { line: 3, .. }
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "date,adj_close\n2024-03-01,10.0\n2024-13-04,1.0\n";
        let err = parse_price_str("ABC", text).unwrap_err();
        assert!(matches!(err, MarketDataError::MalformedRow { line: 3, .. }));
        let err = parse_price_str("ABC", "day,close\n").unwrap_err();
        assert!(matches!(err, MarketDataError::Header(_)));
    }

    #[test]
    fn duplicate_date_rejected() {
        let text = "date,adj_close\n2024-03-01,10.0\n2024-03-01,11.0\n";
        assert!(matches!(
            parse_price_str("ABC", text),
            Err(MarketDataError::DuplicateDate(_))
        ));
    }

    #[test]
    fn unsorted_rows_are_sorted() {
        let text = "date,adj_close\n2024-03-05,3.0\n2024-03-01,1.0\n2024-03-04,2.0\n";
        let s = parse_price_str("ABC", text).unwrap();
        let mut expected = vec![
            (d("2024-03-05"), 3.0),
            (d("2024-03-01"), 1.0),
            (d("2024-03-04"), 2.0),
        ];
        expected.sort_by_key(|a| a.0);
        assert_eq!(s.rows(), expected.as_slice());
    }

    #[test]
    fn returns_by_hand() {
        let r: Vec<f64> = daily_returns(&series(&[100.0, 110.0, 99.0]))
            .unwrap()
            .into_iter()
            .map(|x| x.1)
            .collect();
        assert!((r[0] - 0.10).abs() < 1e-15 && (r[1] + 0.10).abs() < 1e-15);
        let r = daily_returns(&series(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(r.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0.0, 0.0]);
        let r = daily_returns(&series(&[100.0, 100.5])).unwrap();
        assert!((r[0].1 - 0.005).abs() < 1e-15);
        assert!(matches!(
            daily_returns(&series(&[1.0])),
            Err(MarketDataError::TooShort { len: 1 })
        ));
    }

    #[test]
    fn log_vol_hand_case() {
        let v = log_volatility(&[0.10, -0.10], 2, None).unwrap();
        assert!((v.value + std::f64::consts::LN_10).abs() < 1e-6, "{}", v.value);
        assert_eq!(v.horizon, 2);
    }

    #[test]
    fn degenerate_window() {
        assert!(matches!(
            log_volatility(&[0.01; 3], 3, None),
            Err(MarketDataError::DegenerateVolatility)
        ));
        let v = log_volatility(&[0.01; 3], 3, Some(DEFAULT_VOL_FLOOR)).unwrap();
        assert_eq!(v.value, DEFAULT_VOL_FLOOR.ln());
        assert!(log_volatility(&[0.1, 0.2], 3, None).is_err());
        assert!(log_volatility(&[0.1], 1, None).is_err());
    }

    #[test]
    fn friday_call_uses_following_week() {
        // 2024-03-01 is a Friday
        let text = "date,adj_close\n2024-02-29,9.0\n2024-03-01,9.5\n2024-03-04,10.0\n2024-03-05,10.4\n2024-03-06,10.1\n2024-03-07,10.6\n2024-03-08,10.0\n";
        let s = parse_price_str("ABC", text).unwrap();
        let window = label_window(&s, d("2024-03-01"), 3).unwrap();
        assert_eq!(window.first().unwrap().0, d("2024-03-04"));
        assert_eq!(window.last().unwrap().0, d("2024-03-07"));
        let label = label_call(&s, d("2024-03-01"), 3, None).unwrap();
        let expected = two_pass_log_std(&[10.4 / 10.0 - 1.0, 10.1 / 10.4 - 1.0, 10.6 / 10.1 - 1.0]);
        assert!((label.value - expected).abs() < 1e-12);
    }

    #[test]
    fn call_after_last_row() {
        let s = series(&[1.0, 2.0, 3.0]);
        let err = label_call(&s, d("2030-01-01"), 3, None).unwrap_err();
        assert!(matches!(
            err,
            MarketDataError::InsufficientData {
                available: 0,
                needed: 4,
                ..
            }
        ));
    }

    #[test]
    fn call_list_parses() {
        let calls = parse_call_list("ticker,call_date\nABC,2024-03-01\nXYZ,2024-04-02\n").unwrap();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[1].ticker, "XYZ");
    }

    proptest! {
        #[test]
        fn matches_two_pass_oracle(xs in prop::collection::vec(-0.2f64..0.2, 2..40)) {
            let v = log_volatility(&xs, xs.len(), None).unwrap();
            prop_assert!((v.value - two_pass_log_std(&xs)).abs() < 1e-12);
        }

        #[test]
        fn labels_scale_invariant(
            prices in prop::collection::vec(1.0f64..200.0, 20..30),
            k in 0.01f64..100.0,
        ) {
            let s = series(&prices);
            let call = s.rows()[2].0;
            for n in DEFAULT_HORIZONS {
                let a = label_call(&s, call, n, None).unwrap();
                let b = label_call(&s.scaled(k), call, n, None).unwrap();
                prop_assert!((a.value - b.value).abs() < 1e-12);
            }
        }

        #[test]
        fn short_window_is_prefix_of_long(prices in prop::collection::vec(1.0f64..200.0, 12..20)) {
            let s = series(&prices);
            let call = s.rows()[1].0;
            let w3 = label_window(&s, call, 3).unwrap();
            let w7 = label_window(&s, call, 7).unwrap();
            prop_assert_eq!(w3, &w7[..4]);
        }
    }
}
