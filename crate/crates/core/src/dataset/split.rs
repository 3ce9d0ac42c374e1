use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetError, EarningsCallRecord, Gender};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Seeded shuffle within each gender stratum, dealt proportionally.
    #[default]
    Stratified,
    /// Contiguous blocks in call-date order; ignores the seed.
    Chronological,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stratified" => Ok(SplitMode::Stratified),
            "chronological" => Ok(SplitMode::Chronological),
            other => Err(format!(
                "unknown split mode `{other}` (stratified|chronological)"
            )),
        }
    }
}

/// Record indices for train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `n` items over `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-split counts for the minority stratum: proportional to `ratios`,
/// at least one per split when the stratum has three or more records, and
/// never more than a split's total.
fn stratum_counts(n: usize, ratios: &[f64; 3], totals: &[usize; 3]) -> [usize; 3] {
    let mut counts = apportion(n, ratios);
    if n >= 3 {
        for j in 0..3 {
            if counts[j] == 0 && totals[j] > 0 {
                let donor = (0..3)
                    .max_by_key(|&k| (counts[k], std::cmp::Reverse(k)))
                    .expect("three splits");
                counts[donor] -= 1;
                counts[j] += 1;
            }
        }
    }
    for j in 0..3 {
        while counts[j] > totals[j] {
            counts[j] -= 1;
            let k = (0..3)
                .find(|&k| counts[k] < totals[k] && k != j)
                .expect("stratum fits in the corpus");
            counts[k] += 1;
        }
    }
    counts
}

pub fn split_corpus(
    records: &[EarningsCallRecord],
    ratios: [f64; 3],
    seed: u64,
    mode: SplitMode,
) -> Result<Split, DatasetError> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let totals = apportion(records.len(), &ratios);

    let parts: [Vec<usize>; 3] = match mode {
        SplitMode::Chronological => {
            let mut idx: Vec<usize> = (0..records.len()).collect();
            idx.sort_by_key(|&i| (records[i].call_date, i));
            let (train, rest) = idx.split_at(totals[0]);
            let (val, test) = rest.split_at(totals[1]);
            [train.to_vec(), val.to_vec(), test.to_vec()]
        }
        SplitMode::Stratified => {
            let mut rng = seed::rng(seed, Stream::Split, 0);
            let strata: Vec<Vec<usize>> = [Gender::Female, Gender::Male]
                .iter()
                .map(|&g| {
                    let mut stratum: Vec<usize> = (0..records.len())
                        .filter(|&i| records[i].gender == g)
                        .collect();
                    if !stratum.is_empty() && stratum.len() < 3 {
                        log::warn!(
                            "{g} stratum has {} record(s); it cannot appear in every split",
                            stratum.len()
                        );
                    }
                    stratum.shuffle(&mut rng);
                    stratum
                })
                .collect();
            let female = stratum_counts(strata[0].len(), &ratios, &totals);
            let male = [0, 1, 2].map(|j| totals[j] - female[j]);
            let mut parts: [Vec<usize>; 3] = Default::default();
            for (stratum, counts) in strata.iter().zip([female, male]) {
                let mut rest = stratum.as_slice();
                for (part, &c) in parts.iter_mut().zip(&counts) {
                    let (head, tail) = rest.split_at(c);
                    part.extend_from_slice(head);
                    rest = tail;
                }
            }
            parts
        }
    };

    let [mut train, mut val, mut test] = parts;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn corpus(p: usize, female_fraction: f64, seed: u64) -> Vec<EarningsCallRecord> {
        generate_synthetic(&SynthConfig {
            p,
            q_max: 2,
            dt: 4,
            da: 4,
            female_fraction,
            seed,
            ..Default::default()
        })
        .unwrap()
        .records
    }

    #[test]
    fn sizes_follow_ratios() {
        let recs = corpus(10, 0.3, 1);
        let s = split_corpus(&recs, [0.8, 0.1, 0.1], 0, SplitMode::Stratified).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        let recs = corpus(40, 0.3, 2);
        let a = split_corpus(&recs, [0.6, 0.2, 0.2], 5, SplitMode::Stratified).unwrap();
        let b = split_corpus(&recs, [0.6, 0.2, 0.2], 5, SplitMode::Stratified).unwrap();
        assert_eq!(a, b);
        let c = split_corpus(&recs, [0.6, 0.2, 0.2], 6, SplitMode::Stratified).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn small_minority_reaches_every_split() {
        let mut recs = corpus(64, 0.5, 5);
        for (i, r) in recs.iter_mut().enumerate() {
            r.gender = if i < 3 || i == 40 {
                Gender::Female
            } else {
                Gender::Male
            };
        }
        for seed in 0..10 {
            let s = split_corpus(&recs, [0.8, 0.1, 0.1], seed, SplitMode::Stratified).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (51, 7, 6));
            for part in [&s.train, &s.val, &s.test] {
                assert!(part.iter().any(|&i| recs[i].gender == Gender::Female));
            }
        }
    }

    #[test]
    fn stratification_keeps_female_share() {
        // force exactly 5 of 20 records female
        let mut recs = corpus(20, 0.5, 3);
        for (i, r) in recs.iter_mut().enumerate() {
            r.gender = if i % 4 == 0 {
                Gender::Female
            } else {
                Gender::Male
            };
        }
        for seed in 0..20 {
            let s = split_corpus(&recs, [0.5, 0.25, 0.25], seed, SplitMode::Stratified).unwrap();
            for part in [&s.train, &s.val, &s.test] {
                let f = part
                    .iter()
                    .filter(|&&i| recs[i].gender == Gender::Female)
                    .count() as f64;
                let expected = 0.25 * part.len() as f64;
                assert!(
                    (f - expected).abs() <= 1.0,
                    "seed {seed}: {f} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn chronological_blocks() {
        let recs = corpus(10, 0.3, 4);
        let s = split_corpus(&recs, [0.6, 0.2, 0.2], 0, SplitMode::Chronological).unwrap();
        assert!(s
            .train
            .iter()
            .all(|&i| s.val.iter().all(|&j| recs[i].call_date < recs[j].call_date)));
        assert!(s.val.iter().all(|&i| s
            .test
            .iter()
            .all(|&j| recs[i].call_date < recs[j].call_date)));
    }

    #[test]
    fn bad_ratios_rejected() {
        let recs = corpus(5, 0.3, 1);
        assert!(split_corpus(&recs, [0.5, 0.5, 0.5], 0, SplitMode::Stratified).is_err());
        assert!(split_corpus(&recs, [1.0, 0.0, 0.0], 0, SplitMode::Stratified).is_err());
    }
}
