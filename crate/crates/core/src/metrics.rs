//! Scoring for label-set identification and binary containment queries,
//! plus CSV tables in the layout of the experiment reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::inference::decide;
use crate::labelset::LabelSet;

/// Standard error of a rate estimated from `n` Bernoulli trials.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// A rate with its trial count and binomial standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub n: usize,
    pub sigma: f64,
}

impl Rate {
    pub fn from_counts(hits: usize, n: usize) -> Self {
        let value = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        Self {
            value,
            n,
            sigma: binomial_sigma(value, n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub exact: Rate,
    pub top3: Rate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSetReport {
    pub exact: Rate,
    pub top3: Rate,
    /// Rank-1 prediction has the right number of classes.
    pub set_size: Rate,
    /// Keyed by the size of the true label set.
    pub by_size: BTreeMap<usize, Stratum>,
}

/// Scores ranked label-set predictions against the truth.
pub fn labelset_report(predictions: &[Vec<LabelSet>], truths: &[LabelSet]) -> Result<LabelSetReport> {
    if predictions.is_empty() {
        return invalid_arg("no predictions to score");
    }
    if predictions.len() != truths.len() {
        return invalid_arg(format!("{} predictions for {} truths", predictions.len(), truths.len()));
    }
    if predictions.iter().any(Vec::is_empty) {
        return invalid_arg("every prediction needs at least one ranked set");
    }
    let (mut exact, mut top3, mut size) = (0, 0, 0);
    let mut strata: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (ranked, truth) in predictions.iter().zip(truths) {
        let hit = ranked[0] == *truth;
        let near = ranked.iter().take(3).any(|s| s == truth);
        exact += usize::from(hit);
        top3 += usize::from(near);
        size += usize::from(ranked[0].len() == truth.len());
        let s = strata.entry(truth.len()).or_default();
        s.0 += 1;
        s.1 += usize::from(hit);
        s.2 += usize::from(near);
    }
    let n = predictions.len();
    Ok(LabelSetReport {
        exact: Rate::from_counts(exact, n),
        top3: Rate::from_counts(top3, n),
        set_size: Rate::from_counts(size, n),
        by_size: strata
            .into_iter()
            .map(|(l, (n, e, t))| {
                (
                    l,
                    Stratum {
                        exact: Rate::from_counts(e, n),
                        top3: Rate::from_counts(t, n),
                    },
                )
            })
            .collect(),
    })
}

/// Fraction of queries where `score >= threshold` matches the label.
pub fn binary_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return invalid_arg(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == y)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half, via midranks.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid_arg(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid_arg("scores contain NaN");
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return invalid_arg("both classes must be present");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&o| labels[o]).count() as u128;
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos as u128) * (n_pos as u128 + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Accuracy and AUC of a batch of containment queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub accuracy: Rate,
    pub auc: f64,
    pub threshold: f64,
}

/// `higher_is_positive = false` for distance scores, where the decision is
/// `score < threshold` and the AUC is computed on the negated score.
pub fn query_report(scores: &[f64], labels: &[bool], threshold: f64, higher_is_positive: bool) -> Result<QueryReport> {
    let oriented: Vec<f64> = if higher_is_positive {
        scores.to_vec()
    } else {
        scores.iter().map(|s| -s).collect()
    };
    let hits = if higher_is_positive {
        let acc = binary_accuracy(scores, labels, threshold)?;
        (acc * scores.len() as f64).round() as usize
    } else {
        if scores.len() != labels.len() || scores.is_empty() {
            return invalid_arg("score and label counts differ");
        }
        scores
            .iter()
            .zip(labels)
            .filter(|(&s, &y)| !decide(s as f32, threshold as f32) == y)
            .count()
    };
    Ok(QueryReport {
        accuracy: Rate::from_counts(hits, scores.len()),
        auc: auc_rank(&oriented, labels)?,
        threshold,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Label-set identification table: one column per method; rows for all
/// examples and each set size (exact and top-3), then set-size accuracy.
pub fn labelset_table_csv(columns: &[(String, LabelSetReport)]) -> String {
    let mut out = String::from("stratum,metric");
    for (name, _) in columns {
        write!(out, ",{name}").unwrap();
    }
    out.push('\n');
    let mut row = |stratum: &str, metric: &str, f: &dyn Fn(&LabelSetReport) -> Option<f64>| {
        write!(out, "{stratum},{metric}").unwrap();
        for (_, r) in columns {
            match f(r) {
                Some(v) => write!(out, ",{}", pct(v)).unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    };
    row("All", "Exact", &|r| Some(r.exact.value));
    row("All", "Top-3", &|r| Some(r.top3.value));
    let sizes: std::collections::BTreeSet<usize> = columns.iter().flat_map(|(_, r)| r.by_size.keys().copied()).collect();
    for l in sizes {
        let label = format!("{l}-sets");
        row(&label, "Exact", &|r| r.by_size.get(&l).map(|s| s.exact.value));
        row(&label, "Top-3", &|r| r.by_size.get(&l).map(|s| s.top3.value));
    }
    row("All", "Set size", &|r| Some(r.set_size.value));
    out
}

/// Query table: accuracy and AUC rows, one column per method.
pub fn query_table_csv(columns: &[(String, QueryReport)]) -> String {
    let mut out = String::from("metric");
    for (name, _) in columns {
        write!(out, ",{name}").unwrap();
    }
    out.push_str("\nAcc %");
    for (_, r) in columns {
        write!(out, ",{}", pct(r.accuracy.value)).unwrap();
    }
    out.push_str("\nAUC");
    for (_, r) in columns {
        write!(out, ",{}", pct(r.auc)).unwrap();
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(e: &[usize]) -> LabelSet {
        LabelSet::from_elements(e, 5).unwrap()
    }

    #[test]
    fn report_examples() {
        let truths = vec![set(&[0]), set(&[1, 2]), set(&[1, 3]), set(&[0, 2, 4])];
        let perfect: Vec<Vec<LabelSet>> = truths.iter().map(|t| vec![*t, set(&[4]), set(&[3])]).collect();
        let r = labelset_report(&perfect, &truths).unwrap();
        assert_eq!((r.exact.value, r.top3.value, r.set_size.value), (1.0, 1.0, 1.0));
        assert!(r.by_size.values().all(|s| s.exact.value == 1.0));

        let preds = vec![
            vec![set(&[0]), set(&[1]), set(&[2])],          // exact
            vec![set(&[1]), set(&[2]), set(&[1, 2])],       // top-3, wrong size
            vec![set(&[1, 2]), set(&[0]), set(&[4])],       // miss, right size
            vec![set(&[0, 2]), set(&[1]), set(&[0, 2, 4])], // top-3, wrong size
        ];
        let r = labelset_report(&preds, &truths).unwrap();
        assert_eq!(r.exact.value, 0.25);
        assert_eq!(r.top3.value, 0.75);
        assert_eq!(r.set_size.value, 0.5);
        assert_eq!(r.by_size[&2].exact.value, 0.0);
        assert_eq!(r.by_size[&2].top3.value, 0.5);
        assert_eq!(r.by_size[&1].exact.n, 1);

        let one = labelset_report(&[vec![set(&[1, 2])]], &[set(&[1, 3])]).unwrap();
        assert_eq!((one.exact.value, one.set_size.value), (0.0, 1.0));
        assert!(labelset_report(&[], &[]).is_err());
        assert!(labelset_report(&[vec![]], &[set(&[1])]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let labels = [true, false, true, false];
        assert_eq!(binary_accuracy(&[0.9, 0.1, 0.8, 0.2], &labels, 0.5).unwrap(), 1.0);
        assert_eq!(binary_accuracy(&[0.1, 0.9, 0.2, 0.8], &labels, 0.5).unwrap(), 0.0);
        assert_eq!(binary_accuracy(&[0.5; 4], &labels, 0.5).unwrap(), 0.5);
        assert!(binary_accuracy(&[0.5], &labels, 0.5).is_err());
    }

    fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let labels: Vec<bool> = (0..200).map(|i| i % 3 == 0 || r.gen_bool(0.3)).collect();
            // coarse scores force plenty of ties
            let scores: Vec<f64> = labels
                .iter()
                .map(|&y| ((r.gen::<f64>() + if y { 0.3 } else { 0.0 }) * 10.0).round() / 10.0)
                .collect();
            let a = auc_rank(&scores, &labels).unwrap();
            assert!((a - pair_count_auc(&scores, &labels)).abs() <= 1e-12);
        }
        let labels = [true, true, false, false];
        assert_eq!(auc_rank(&[0.9, 0.8, 0.1, 0.2], &labels).unwrap(), 1.0);
        assert_eq!(auc_rank(&[0.1, 0.2, 0.9, 0.8], &labels).unwrap(), 0.0);
        assert_eq!(auc_rank(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(auc_rank(&[0.1, 0.2], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn auc_is_invariant_to_monotone_maps(raw in prop::collection::vec((0u8..20, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, y)| *y).collect();
            prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
            let a = auc_rank(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s / 3.0).exp() - 7.0).collect();
            prop_assert_eq!(a, auc_rank(&mapped, &labels).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn report_invariants(cases in prop::collection::vec((1u32..32, 1u32..32, 1u32..32, 1u32..32), 1..40)) {
            let truths: Vec<LabelSet> = cases.iter().map(|c| LabelSet::new(c.0, 5).unwrap()).collect();
            let preds: Vec<Vec<LabelSet>> = cases
                .iter()
                .map(|c| [c.1, c.2, c.3].iter().map(|&m| LabelSet::new(m, 5).unwrap()).collect())
                .collect();
            let r = labelset_report(&preds, &truths).unwrap();
            prop_assert!(r.exact.value <= r.top3.value);
            let weighted: f64 = r.by_size.values().map(|s| s.exact.value * s.exact.n as f64).sum::<f64>() / truths.len() as f64;
            prop_assert!((weighted - r.exact.value).abs() < 1e-12);
            for v in [r.exact.value, r.top3.value, r.set_size.value] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn distance_reports_use_strict_threshold() {
        let r = query_report(&[0.2, 0.5, 0.9, 0.7], &[true, true, false, false], 0.5, false).unwrap();
        assert_eq!(r.accuracy.value, 0.75);
        assert_eq!(r.auc, 1.0);
    }

    #[test]
    fn tables() {
        let r = labelset_report(&[vec![set(&[0])], vec![set(&[1])]], &[set(&[0]), set(&[1, 2])]).unwrap();
        let csv = labelset_table_csv(&[("g_Lin".into(), r.clone()), ("MF".into(), r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stratum,metric,g_Lin,MF");
        assert_eq!(lines[1], "All,Exact,50.0,50.0");
        assert_eq!(lines.last().unwrap(), &"All,Set size,50.0,50.0");
        assert_eq!(lines.len(), 1 + 2 + 4 + 1);

        let q = query_report(&[0.9, 0.1], &[true, false], 0.5, true).unwrap();
        let csv = query_table_csv(&[("h_DNN".into(), q)]);
        assert_eq!(csv, "metric,h_DNN\nAcc %,100.0\nAUC,100.0\n");
    }
}
