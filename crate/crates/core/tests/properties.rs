//! Property checks over the public API, each against a naive oracle.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::factorial::binomial;

use setcomp::baselines::{calibrate_distance_threshold, slidewin_windows, window_count};
use setcomp::inference::{decode_nearest_subset, SubsetPlan, SubsetTable};
use setcomp::labelset::{enumerate_label_sets, Episode, LabelSet};
use setcomp::losses::triplet_margin_loss;
use setcomp::metrics::{auc_rank, labelset_report};
use setcomp::render::{render_composite, synth_glyph_store, Image, RenderSpec};

#[test]
fn lattice_sizes_match_binomial_sums() {
    for k in 1..=10usize {
        for max in 1..=k {
            let sets = enumerate_label_sets(k, max).unwrap();
            let expected: f64 = (1..=max).map(|l| binomial(k as u64, l as u64)).sum();
            assert_eq!(sets.len() as f64, expected, "k={k} max={max}");
            for w in sets.windows(2) {
                let key = |s: &LabelSet| (s.len(), s.mask());
                assert!(key(&w[0]) < key(&w[1]));
            }
        }
    }
}

#[test]
fn window_counts_match_enumeration() {
    for rows in 1..=4 {
        for cols in 1..=4 {
            let mut n = 0;
            for r0 in 0..rows {
                for _r1 in r0..rows {
                    for c0 in 0..cols {
                        n += (c0..cols).count();
                    }
                }
            }
            assert_eq!(window_count(rows, cols), n);
            let img = Image::blank(48, 64);
            assert_eq!(slidewin_windows(&img, rows, cols, 16).unwrap().len(), n);
        }
    }
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
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

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #[test]
    fn union_laws(a in 0u32..1024, b in 0u32..1024, c in 0u32..1024) {
        let (a, b, c) = (LabelSet::new(a, 10).unwrap(), LabelSet::new(b, 10).unwrap(), LabelSet::new(c, 10).unwrap());
        prop_assert_eq!(a.union(&b).unwrap(), b.union(&a).unwrap());
        prop_assert_eq!(a.union(&b).unwrap().union(&c).unwrap(), a.union(&b.union(&c).unwrap()).unwrap());
        prop_assert_eq!(a.union(&a).unwrap(), a);
        let mutual = a.is_subset(&b).unwrap() && b.is_subset(&a).unwrap();
        prop_assert_eq!(mutual, a == b);
    }

    #[test]
    fn auc_matches_pairwise_count(
        data in prop::collection::vec((0u8..20, any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let auc = auc_rank(&scores, &labels).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() - 7.0).collect();
        prop_assert!((auc_rank(&warped, &labels).unwrap() - auc).abs() < 1e-12);
    }

    #[test]
    fn decoding_matches_linear_scan(seed in any::<u64>(), k in 2usize..7, cap in 1usize..4) {
        let cap = cap.min(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = SubsetPlan::new(k, cap).unwrap();
        let dim = 6;
        let vectors: Vec<Vec<f32>> = (0..plan.len())
            .map(|_| unit((0..dim).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect()))
            .collect();
        let table = SubsetTable::from_plan(&plan, vectors.clone()).unwrap();
        let query = unit((0..dim).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect());
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (i, v) in vectors.iter().enumerate() {
            let d: f32 = v.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let got = decode_nearest_subset(&query, &table, 1).unwrap();
        prop_assert_eq!(got[0].0, plan.sets()[best]);
    }

    #[test]
    fn triplet_loss_hinge(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        p in prop::collection::vec(-1.0f64..1.0, 4),
        n in prop::collection::vec(-1.0f64..1.0, 4),
        margin in 0.01f64..0.5,
    ) {
        let loss = triplet_margin_loss(&a, &p, &n, margin).unwrap();
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        let expected = (dist(&a, &p) - dist(&a, &n) + margin).max(0.0);
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn rendered_composites_stay_in_range(seed in any::<u64>(), mask in 1u32..32) {
        let store = synth_glyph_store(5, 2, 3).unwrap();
        let episode = Episode::new(vec![0, 1, 2, 3, 4], vec![0; 5]).unwrap();
        let t = LabelSet::new(mask, 5).unwrap();
        let spec = RenderSpec { noise_sigma: 0.5, ..RenderSpec::default() };
        let scene = render_composite(&store, &episode, &t, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(scene.image.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(scene.truth, t);
    }

    #[test]
    fn exact_never_exceeds_top3(picks in prop::collection::vec((0usize..25, 0usize..25, 0usize..25, 0usize..25), 1..40)) {
        let sets = enumerate_label_sets(5, 3).unwrap();
        let predictions: Vec<Vec<LabelSet>> = picks.iter().map(|p| vec![sets[p.0], sets[p.1], sets[p.2]]).collect();
        let truths: Vec<LabelSet> = picks.iter().map(|p| sets[p.3]).collect();
        let r = labelset_report(&predictions, &truths).unwrap();
        prop_assert!(r.exact.value <= r.top3.value);
        let weighted: f64 = r.by_size.values().map(|s| s.exact.value * s.exact.n as f64).sum::<f64>() / truths.len() as f64;
        prop_assert!((weighted - r.exact.value).abs() < 1e-12);
    }

    #[test]
    fn calibrated_threshold_is_accuracy_optimal(data in prop::collection::vec((0u8..30, any::<bool>()), 2..40)) {
        let scores: Vec<f32> = data.iter().map(|d| d.0 as f32 / 10.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        let acc = |th: f32| scores.iter().zip(&labels).filter(|(s, l)| (**s < th) == **l).count();
        let th = calibrate_distance_threshold(&scores, &labels).unwrap();
        let best = (0..=31).map(|i| acc(i as f32 / 10.0 - 0.05)).max().unwrap().max(acc(f32::INFINITY));
        prop_assert_eq!(acc(th), best);
    }
}
