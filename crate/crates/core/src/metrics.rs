//! Ranking, calibration and rubric metrics.

use serde::{Deserialize, Serialize};

use crate::context::ContextBundle;
use crate::error::{GqsError, Result};
use crate::similarity::cosine;
use crate::suggestion::SuggestionList;
use crate::tokens::TokenSequence;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(GqsError::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(GqsError::NonFinite(format!("score {s}")));
    }
    Ok(())
}

/// Average 1-based ranks with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative; ties count 0.5.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GqsError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean negative log-likelihood. Scores must lie strictly inside (0, 1).
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(GqsError::InvalidArgument("logloss of no records".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        if p <= 0.0 || p >= 1.0 {
            return Err(GqsError::InvalidArgument(format!("score {p} outside (0, 1)")));
        }
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(GqsError::Shape(format!(
            "spearman over {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Expected calibration error of predictions against known probabilities,
/// over `bins` equal-width bins of the prediction.
pub fn expected_calibration_error(predicted: &[f64], truth: &[f64], bins: usize) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() || bins == 0 {
        return Err(GqsError::Shape(format!(
            "ece over {} predictions, {} truths, {bins} bins",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sum_p = vec![0.0; bins];
    let mut sum_t = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &t) in predicted.iter().zip(truth) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        sum_p[b] += p;
        sum_t[b] += t;
        count[b] += 1;
    }
    let n = predicted.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (sum_p[b] - sum_t[b]).abs() / n)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubricThresholds {
    pub high: f64,
    pub low: f64,
}

impl Default for RubricThresholds {
    fn default() -> Self {
        Self { high: 0.85, low: 0.5 }
    }
}

/// Relevance of one suggestion to the current query: 1.0, 0.5 or 0.0.
pub fn rubric_relevance(suggestion: &TokenSequence, context: &ContextBundle, thresholds: RubricThresholds) -> f64 {
    let sim = cosine(suggestion, &context.current_query);
    if sim >= thresholds.high {
        1.0
    } else if sim >= thresholds.low {
        0.5
    } else {
        0.0
    }
}

/// Mean relevance over a list's queries.
pub fn list_relevance(list: &SuggestionList, context: &ContextBundle, thresholds: RubricThresholds) -> f64 {
    if list.is_empty() {
        return 0.0;
    }
    list.queries()
        .iter()
        .map(|q| rubric_relevance(q, context, thresholds))
        .sum::<f64>()
        / list.len() as f64
}

/// Same rubric as [`crate::prefs::diversity_score`].
pub fn rubric_diversity(list: &SuggestionList, context: &ContextBundle, theta_sim: f64) -> f64 {
    crate::prefs::diversity_score(list, context, theta_sim).value()
}

/// Relative improvement in percent of `policy_mean` over `baseline_mean`.
pub fn ctr_uplift(policy_mean: f64, baseline_mean: f64) -> Result<f64> {
    if baseline_mean == 0.0 {
        return Err(GqsError::InvalidArgument("baseline CTR is 0".into()));
    }
    Ok(100.0 * (policy_mean - baseline_mean) / baseline_mean)
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub round: usize,
    pub oracle_ctr: f64,
    pub ctr_uplift_pct: f64,
    pub relevance: f64,
    pub diversity: f64,
    pub auc: f64,
    pub logloss: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "round,oracle_ctr,ctr_uplift_pct,relevance,diversity,auc,logloss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.4},{:.4},{:.6},{:.6}",
            self.round, self.oracle_ctr, self.ctr_uplift_pct, self.relevance, self.diversity, self.auc, self.logloss
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(GqsError::InvalidArgument(format!("metrics row has {} fields", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| GqsError::InvalidArgument(format!("bad metrics field {s:?}")))
        };
        Ok(Self {
            round: f[0]
                .parse()
                .map_err(|_| GqsError::InvalidArgument(format!("bad round {:?}", f[0])))?,
            oracle_ctr: num(f[1])?,
            ctr_uplift_pct: num(f[2])?,
            relevance: num(f[3])?,
            diversity: num(f[4])?,
            auc: num(f[5])?,
            logloss: num(f[6])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(GqsError::SingleClass)));
    }

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn logloss_fixtures() {
        assert!((logloss(&[0.5], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logloss(&[1.0 - 1e-12, 1e-12], &[1, 0]).unwrap() < 1e-11);
        let expect = -(0.8f64.ln() + 0.7f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((logloss(&[0.8, 0.3, 0.4], &[1, 0, 1]).unwrap() - expect).abs() < 1e-15);
        assert!(logloss(&[1.0], &[1]).is_err());
        assert!(logloss(&[0.0], &[0]).is_err());
    }

    #[test]
    fn spearman_fixtures() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ece_fixtures() {
        assert_eq!(expected_calibration_error(&[0.2, 0.8], &[0.2, 0.8], 10).unwrap(), 0.0);
        let e = expected_calibration_error(&[0.25, 0.25], &[0.5, 0.0], 10).unwrap();
        assert!(e.abs() < 1e-15);
        let e = expected_calibration_error(&[0.9], &[0.5], 10).unwrap();
        assert!((e - 0.4).abs() < 1e-12);
    }

    #[test]
    fn uplift_fixtures() {
        assert_eq!(ctr_uplift(0.2, 0.2).unwrap(), 0.0);
        assert!((ctr_uplift(0.3, 0.2).unwrap() - 50.0).abs() < 1e-12);
        assert!(ctr_uplift(0.3, 0.0).is_err());
        assert!(ctr_uplift(0.3, 0.2).unwrap() > 0.0 && ctr_uplift(0.2, 0.3).unwrap() < 0.0);
    }

    #[test]
    fn relevance_fixtures() {
        let ctx = ContextBundle {
            current_query: TokenSequence::new(vec![10, 11, 12, 13]),
            ..ContextBundle::default()
        };
        let t = RubricThresholds::default();
        assert_eq!(rubric_relevance(&ctx.current_query.clone(), &ctx, t), 1.0);
        assert_eq!(
            rubric_relevance(&TokenSequence::new(vec![40, 41, 42, 43]), &ctx, t),
            0.0
        );
        // three of four tokens shared: cosine 0.75
        assert_eq!(
            rubric_relevance(&TokenSequence::new(vec![10, 11, 12, 50]), &ctx, t),
            0.5
        );
    }

    #[test]
    fn metrics_row_roundtrip() {
        let r = MetricsReport {
            round: 2,
            oracle_ctr: 0.3125,
            ctr_uplift_pct: 12.5,
            relevance: 40.0,
            diversity: 75.5,
            auc: 0.875,
            logloss: 0.5,
        };
        assert_eq!(MetricsReport::parse_csv_row(&r.csv_row()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(data in proptest::collection::vec((0u8..5, 0u8..2), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 4.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_maps(data in proptest::collection::vec((-3.0f64..3.0, 0u8..2), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn logloss_is_nonnegative(data in proptest::collection::vec((0.001f64..0.999, 0u8..2), 1..30)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assert!(logloss(&scores, &labels).unwrap() >= 0.0);
        }
    }
}
