//! Set algebra at inference time: subset embedding tables built by folding
//! the composition head, nearest-subset decoding, and containment queries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{CompositionHead, Encoder, QueryHead};
use crate::error::{invalid_arg, Error, Result};
use crate::labelset::{enumerate_label_sets, LabelSet};
use crate::nn::tensor::sq_dist;
use crate::nn::{Graph, NodeId, ParamStore, Real, Tensor};
use crate::render::Image;

/// Layout of a subset table: every nonempty set of at most `cap` of `k`
/// classes, in canonical order, grouped by size. A size-`l` set is built
/// from the size-`l-1` set holding all but its largest element, composed
/// with the singleton of that largest element.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetPlan {
    k: usize,
    cap: usize,
    sets: Vec<LabelSet>,
    /// Start offset of each size level within `sets`.
    level_start: Vec<usize>,
    /// For each set of size ≥ 2: row of its prefix within the previous level.
    prefix_row: Vec<usize>,
    /// For each set of size ≥ 2: its largest element.
    last: Vec<usize>,
    index: HashMap<u32, usize>,
}

impl SubsetPlan {
    pub fn new(k: usize, cap: usize) -> Result<Self> {
        let sets = enumerate_label_sets(k, cap)?;
        let index: HashMap<u32, usize> = sets.iter().enumerate().map(|(i, s)| (s.mask(), i)).collect();
        let mut level_start = vec![0];
        for (i, pair) in sets.windows(2).enumerate() {
            if pair[1].len() != pair[0].len() {
                level_start.push(i + 1);
            }
        }
        let mut prefix_row = vec![0; sets.len()];
        let mut last = vec![0; sets.len()];
        for (i, s) in sets.iter().enumerate().skip(k) {
            let top = *s.canonical_elements().last().expect("nonempty");
            let prefix = s.mask() & !(1 << top);
            let level = s.len() - 2;
            prefix_row[i] = index[&prefix] - level_start[level];
            last[i] = top;
        }
        Ok(Self {
            k,
            cap,
            sets,
            level_start,
            prefix_row,
            last,
            index,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn sets(&self) -> &[LabelSet] {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Position of `t` in canonical order, if it is in the table.
    pub fn position(&self, t: &LabelSet) -> Option<usize> {
        if t.universe_size() != self.k {
            return None;
        }
        self.index.get(&t.mask()).copied()
    }

    fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.level_start[level];
        let end = self.level_start.get(level + 1).copied().unwrap_or(self.sets.len());
        start..end
    }

    /// Fills the table level by level. `compose` receives aligned batches of
    /// prefix and singleton embeddings and returns one embedding per pair.
    pub fn fold<T: Clone, C>(&self, singletons: &[T], mut compose: C) -> Result<Vec<T>>
    where
        C: FnMut(&[T], &[T]) -> Result<Vec<T>>,
    {
        if singletons.len() != self.k {
            return invalid_arg(format!(
                "expected {} singleton embeddings, got {}",
                self.k,
                singletons.len()
            ));
        }
        let mut out: Vec<T> = singletons.to_vec();
        for level in 1..self.level_start.len() {
            let prev = self.level_range(level - 1);
            let range = self.level_range(level);
            let prefixes: Vec<T> = range.clone().map(|i| out[prev.start + self.prefix_row[i]].clone()).collect();
            let lasts: Vec<T> = range.clone().map(|i| singletons[self.last[i]].clone()).collect();
            let composed = compose(&prefixes, &lasts)?;
            if composed.len() != range.len() {
                return Err(Error::InvalidState(format!(
                    "composition returned {} rows for {} pairs",
                    composed.len(),
                    range.len()
                )));
            }
            out.extend(composed);
        }
        Ok(out)
    }

    /// Builds every table entry as rows of one `[len, m]` node, with one
    /// batched head call per size level. `singletons` is a `[k, m]` node.
    pub fn build_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        head: &CompositionHead,
        singletons: NodeId,
    ) -> NodeId {
        let mut levels = vec![singletons];
        for level in 1..self.level_start.len() {
            let range = self.level_range(level);
            let prefix_idx: Vec<usize> = range.clone().map(|i| self.prefix_row[i]).collect();
            let last_idx: Vec<usize> = range.map(|i| self.last[i]).collect();
            let a = g.gather_rows(levels[level - 1], &prefix_idx);
            let b = g.gather_rows(singletons, &last_idx);
            levels.push(head.forward(g, store, a, b));
        }
        if levels.len() == 1 {
            singletons
        } else {
            g.concat_rows(&levels)
        }
    }
}

/// Embeddings of every nonempty label set up to the size cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetTable {
    pub k: usize,
    pub cap: usize,
    /// Canonical order.
    pub entries: Vec<(LabelSet, Vec<f32>)>,
}

impl SubsetTable {
    pub fn from_plan(plan: &SubsetPlan, vectors: Vec<Vec<f32>>) -> Result<Self> {
        if vectors.len() != plan.len() {
            return invalid_arg(format!("{} vectors for {} sets", vectors.len(), plan.len()));
        }
        Ok(Self {
            k: plan.k,
            cap: plan.cap,
            entries: plan.sets.iter().copied().zip(vectors).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, t: &LabelSet) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|(s, _)| s == t)
            .map(|(_, v)| v.as_slice())
    }

    /// Flattens the table for storage: the label sets and a `[len, m]` matrix.
    pub fn to_tensor(&self) -> (Vec<LabelSet>, Tensor<f32>) {
        let sets = self.entries.iter().map(|(s, _)| *s).collect();
        let rows: Vec<Vec<f32>> = self.entries.iter().map(|(_, v)| v.clone()).collect();
        (sets, Tensor::from_rows(&rows))
    }
}

fn check_singletons(singletons: &[Vec<f32>]) -> Result<usize> {
    let m = singletons.first().map_or(0, Vec::len);
    if m == 0 || singletons.iter().any(|v| v.len() != m) {
        return invalid_arg("singleton embeddings must share a positive dimension");
    }
    Ok(m)
}

/// Folds `compose` over the canonical elements of every set. `compose`
/// takes aligned batches and is called once per size level.
pub fn build_subset_table_with<C>(singletons: &[Vec<f32>], cap: usize, compose: C) -> Result<SubsetTable>
where
    C: FnMut(&[Vec<f32>], &[Vec<f32>]) -> Result<Vec<Vec<f32>>>,
{
    check_singletons(singletons)?;
    let k = singletons.len();
    if cap == 0 || cap > k {
        return invalid_arg(format!("cap {cap} outside 1..={k}"));
    }
    let plan = SubsetPlan::new(k, cap)?;
    let vectors = plan.fold(singletons, compose)?;
    SubsetTable::from_plan(&plan, vectors)
}

/// Subset table for a trained composition head (eval mode).
pub fn build_subset_table(
    singletons: &[Vec<f32>],
    head: &CompositionHead,
    store: &ParamStore<f32>,
    cap: usize,
) -> Result<SubsetTable> {
    let m = check_singletons(singletons)?;
    if m != head.m {
        return invalid_arg(format!("embeddings of dimension {m}, head expects {}", head.m));
    }
    build_subset_table_with(singletons, cap, |a, b| {
        let mut g = Graph::new(false);
        let (ai, bi) = (g.input(Tensor::from_rows(a)), g.input(Tensor::from_rows(b)));
        let y = head.forward(&mut g, store, ai, bi);
        Ok(g.value(y).to_rows())
    })
}

/// Ranks table entries by squared distance to `query`, nearest first;
/// equal distances keep canonical order.
pub fn decode_nearest_subset(query: &[f32], table: &SubsetTable, topk: usize) -> Result<Vec<(LabelSet, f32)>> {
    if table.is_empty() {
        return Err(Error::InvalidState("empty subset table".into()));
    }
    if topk == 0 {
        return invalid_arg("topk must be at least 1");
    }
    if let Some((_, v)) = table.entries.iter().find(|(_, v)| v.len() != query.len()) {
        return invalid_arg(format!("query of dimension {} vs table dimension {}", query.len(), v.len()));
    }
    let mut scored: Vec<(LabelSet, f32)> = table
        .entries
        .iter()
        .map(|(s, v)| (*s, sq_dist(query, v)))
        .collect();
    scored.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.canonical_cmp(&y.0)));
    scored.truncate(topk);
    Ok(scored)
}

/// One-shot label-set inference: embed the references, build the table,
/// embed the query and decode.
#[allow(clippy::too_many_arguments)]
pub fn infer_label_set(
    encoder: &Encoder,
    head: &CompositionHead,
    store: &ParamStore<f32>,
    references: &[&Image],
    query: &Image,
    cap: usize,
    topk: usize,
) -> Result<Vec<(LabelSet, f32)>> {
    let singletons = encoder.encode(store, references)?;
    let table = build_subset_table(&singletons, head, store, cap)?;
    let q = encoder.encode_one(store, query)?;
    decode_nearest_subset(&q, &table, topk)
}

/// Does the label set of `image_b` lie inside that of `image_a`? Returns the
/// decision (`score >= threshold`) and the head's score.
pub fn query_contains(
    encoder: &Encoder,
    head: &QueryHead,
    store: &ParamStore<f32>,
    image_a: &Image,
    image_b: &Image,
    threshold: f32,
) -> Result<(bool, f32)> {
    let e = encoder.encode(store, &[image_a, image_b])?;
    let score = head.apply(store, &e[0], &e[1])?;
    Ok((decide(score, threshold), score))
}

/// Threshold rule shared by every score-based decision.
pub fn decide(score: f32, threshold: f32) -> bool {
    score >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Backbone, EncoderConfig, GVariant, HVariant};
    use crate::labelset::lattice_size;
    use crate::nn::tensor::{l2_norm, normalized};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(r: &mut ChaCha8Rng, m: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        normalized(&v)
    }

    fn mean_head(m: usize, store: &mut ParamStore<f32>) -> CompositionHead {
        CompositionHead::new(GVariant::Mean, m, m, "g", store, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn table_sizes_and_singletons() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = mean_head(6, &mut store);
        let singles: Vec<Vec<f32>> = (0..5).map(|_| unit(&mut r, 6)).collect();
        let t = build_subset_table(&singles, &head, &store, 3).unwrap();
        assert_eq!(t.len(), 25);
        for (i, s) in singles.iter().enumerate() {
            assert_eq!(t.get(&LabelSet::singleton(i, 5).unwrap()).unwrap(), s.as_slice());
        }
        let t1 = build_subset_table(&singles, &head, &store, 1).unwrap();
        assert_eq!(t1.entries.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(), singles);
        assert!(build_subset_table(&singles, &head, &store, 0).is_err());
        assert!(build_subset_table(&singles, &head, &store, 6).is_err());

        let pair = LabelSet::from_elements(&[1, 3], 5).unwrap();
        let sum: Vec<f32> = singles[1].iter().zip(&singles[3]).map(|(a, b)| a + b).collect();
        let want = normalized(&sum);
        for (x, y) in t.get(&pair).unwrap().iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(t.entries.iter().all(|(_, v)| (l2_norm(v) - 1.0).abs() < 1e-5));
    }

    #[test]
    fn entries_follow_left_fold_over_canonical_elements() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = CompositionHead::new(GVariant::Dnn, 4, 8, "g", &mut store, &mut r);
        let singles: Vec<Vec<f32>> = (0..6).map(|_| unit(&mut r, 4)).collect();
        let t = build_subset_table(&singles, &head, &store, 4).unwrap();
        for (s, v) in &t.entries {
            let els = s.canonical_elements();
            let mut acc = singles[els[0]].clone();
            for &e in &els[1..] {
                acc = head.apply(&store, &acc, &singles[e]).unwrap();
            }
            for (x, y) in acc.iter().zip(v) {
                assert!((x - y).abs() < 1e-6, "{s}");
            }
        }
    }

    #[test]
    fn one_composition_per_composite_entry() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for (k, cap) in [(5, 3), (6, 6), (8, 4), (3, 1)] {
            let singles: Vec<Vec<f32>> = (0..k).map(|_| unit(&mut r, 3)).collect();
            let mut calls = 0;
            build_subset_table_with(&singles, cap, |a, b| {
                calls += a.len();
                Ok(a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect())
            })
            .unwrap();
            assert_eq!(calls, lattice_size(k, cap) - k);
        }
    }

    #[test]
    fn graph_table_matches_eval_fold() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = CompositionHead::new(GVariant::Lin, 5, 5, "g", &mut store, &mut r);
        let singles: Vec<Vec<f32>> = (0..5).map(|_| unit(&mut r, 5)).collect();
        let t = build_subset_table(&singles, &head, &store, 3).unwrap();
        let plan = SubsetPlan::new(5, 3).unwrap();
        let mut g = Graph::new(false);
        let s = g.input(Tensor::from_rows(&singles));
        let all = plan.build_graph(&mut g, &store, &head, s);
        for (i, row) in g.value(all).to_rows().iter().enumerate() {
            assert_eq!(row.as_slice(), t.entries[i].1.as_slice());
            assert_eq!(plan.position(&t.entries[i].0), Some(i));
        }
    }

    fn naive_rank(query: &[f32], table: &SubsetTable) -> Vec<LabelSet> {
        let mut remaining: Vec<usize> = (0..table.len()).collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                let (a, b) = (&table.entries[remaining[j]], &table.entries[remaining[best]]);
                let (da, db) = (sq_dist(query, &a.1), sq_dist(query, &b.1));
                if da < db || (da == db && a.0 < b.0) {
                    best = j;
                }
            }
            out.push(table.entries[remaining.remove(best)].0);
        }
        out
    }

    #[test]
    fn decoding_agrees_with_naive_scan() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let plan = SubsetPlan::new(5, 3).unwrap();
        for trial in 0..200 {
            let vectors: Vec<Vec<f32>> = (0..plan.len()).map(|_| unit(&mut r, 4)).collect();
            let table = SubsetTable::from_plan(&plan, vectors).unwrap();
            let q = if trial % 10 == 0 {
                table.entries[trial % 25].1.clone()
            } else {
                unit(&mut r, 4)
            };
            let got: Vec<LabelSet> = decode_nearest_subset(&q, &table, 25).unwrap().into_iter().map(|x| x.0).collect();
            assert_eq!(got, naive_rank(&q, &table));
        }
    }

    #[test]
    fn decoding_examples() {
        let plan = SubsetPlan::new(3, 2).unwrap();
        let mut vectors = vec![vec![0.0, 1.0]; plan.len()];
        vectors[4] = vec![1.0, 0.0];
        let table = SubsetTable::from_plan(&plan, vectors).unwrap();
        let top = decode_nearest_subset(&[1.0, 0.0], &table, 3).unwrap();
        assert_eq!(top[0], (plan.sets()[4], 0.0));
        // remaining entries tie: canonical order decides
        assert_eq!(top[1].0, plan.sets()[0]);
        assert_eq!(top[2].0, plan.sets()[1]);
        assert_eq!(decode_nearest_subset(&[1.0, 0.0], &table, 100).unwrap().len(), 6);
        assert!(decode_nearest_subset(&[1.0, 0.0], &table, 0).is_err());
        assert!(decode_nearest_subset(&[1.0], &table, 1).is_err());
        let empty = SubsetTable {
            k: 3,
            cap: 2,
            entries: vec![],
        };
        assert!(matches!(
            decode_nearest_subset(&[1.0, 0.0], &empty, 1),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn threshold_rule() {
        assert!(decide(0.7, 0.5));
        assert!(decide(0.5, 0.5));
        assert!(!decide(0.999_999, 1.0));
    }

    #[test]
    fn end_to_end_inference_is_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            m: 8,
            backbone: Backbone::SmallCnn { widths: [4, 4, 4, 4] },
            input_size: 32,
        };
        let enc = Encoder::new(cfg, "f", &mut store, &mut r).unwrap();
        let g = CompositionHead::new(GVariant::Lin, 8, 8, "g", &mut store, &mut r);
        let h = QueryHead::new(HVariant::Dnn, 8, 8, "h", &mut store, &mut r);
        let imgs: Vec<Image> = (0..6)
            .map(|_| Image::new(32, 32, (0..1024).map(|_| r.gen()).collect()))
            .collect();
        let refs: Vec<&Image> = imgs[..5].iter().collect();
        let a = infer_label_set(&enc, &g, &store, &refs, &imgs[5], 3, 3).unwrap();
        let b = infer_label_set(&enc, &g, &store, &refs, &imgs[5], 3, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let (yes, score) = query_contains(&enc, &h, &store, &imgs[0], &imgs[1], 0.5).unwrap();
        assert!(score > 0.0 && score < 1.0);
        assert_eq!(yes, score >= 0.5);
        assert!(!query_contains(&enc, &h, &store, &imgs[0], &imgs[1], 1.0).unwrap().0);
    }
}
