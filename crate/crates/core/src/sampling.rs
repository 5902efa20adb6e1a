//! Seeded samplers for episodes, negatives and containment query pairs.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::labelset::{enumerate_label_sets, Episode, LabelSet};
use crate::render::{render, render_reference, render_singleton, GlyphStore, Image, RenderSpec, Scene};

/// Weights over label-set sizes `1..=weights.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    weights: Vec<f64>,
}

impl SizeDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return invalid_arg(format!("invalid size weights {weights:?}"));
        }
        Ok(Self { weights })
    }

    pub fn uniform(max_size: usize) -> Result<Self> {
        Self::new(vec![1.0; max_size])
    }

    pub fn max_size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let dist = WeightedIndex::new(&self.weights).expect("validated weights");
        dist.sample(rng) + 1
    }
}

/// A uniformly random subset of `size` of the `k` episode classes.
pub fn random_subset<R: Rng + ?Sized>(k: usize, size: usize, rng: &mut R) -> Result<LabelSet> {
    if size == 0 || size > k {
        return invalid_arg(format!("subset size {size} outside 1..={k}"));
    }
    let els = index::sample(rng, k, size).into_vec();
    LabelSet::from_elements(&els, k)
}

/// Uniform draws over nonempty sets of at most `cap` classes, excluding
/// the set being contrasted.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    sets: Vec<LabelSet>,
}

impl NegativeSampler {
    pub fn new(k: usize, cap: usize) -> Result<Self> {
        Ok(Self {
            sets: enumerate_label_sets(k, cap)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: &LabelSet, rng: &mut R) -> Result<LabelSet> {
        let excluded = self.sets.iter().position(|s| s == t);
        let pool = self.sets.len() - usize::from(excluded.is_some());
        if pool == 0 {
            return Err(Error::InvalidState(format!("no negative candidates besides {t}")));
        }
        let mut i = rng.gen_range(0..pool);
        if excluded.is_some_and(|e| i >= e) {
            i += 1;
        }
        Ok(self.sets[i])
    }
}

pub fn sample_negative<R: Rng + ?Sized>(k: usize, cap: usize, t: &LabelSet, rng: &mut R) -> Result<LabelSet> {
    NegativeSampler::new(k, cap)?.sample(t, rng)
}

/// How episodes and their composite examples are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub k: usize,
    pub sizes: SizeDistribution,
    /// Composite examples per episode.
    pub batch: usize,
    pub spec: RenderSpec,
}

/// One episode: its classes, a rendered reference per class, and
/// composite examples with their label sets.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub episode: Episode,
    pub references: Vec<Image>,
    pub examples: Vec<Scene>,
}

/// Picks `k` distinct classes from `catalog`, a reference exemplar for
/// each, renders the references and `batch` composites.
pub fn sample_episode<R: Rng + ?Sized>(
    store: &GlyphStore,
    catalog: &[usize],
    config: &EpisodeConfig,
    rng: &mut R,
) -> Result<EpisodeBatch> {
    let k = config.k;
    if k == 0 || catalog.len() < k {
        return invalid_arg(format!("catalog of {} classes cannot supply {k}", catalog.len()));
    }
    if config.sizes.max_size() > k {
        return invalid_arg(format!("set sizes up to {} exceed k = {k}", config.sizes.max_size()));
    }
    let class_ids: Vec<usize> = index::sample(rng, catalog.len(), k)
        .into_iter()
        .map(|i| catalog[i])
        .collect();
    let refs = class_ids
        .iter()
        .map(|&c| rng.gen_range(0..store.exemplars(c).len()))
        .collect();
    let episode = Episode::new(class_ids, refs)?;
    let references = (0..k)
        .map(|i| render_reference(store, &episode, i, &config.spec, rng))
        .collect();
    let mut examples = Vec::with_capacity(config.batch);
    for _ in 0..config.batch {
        let size = config.sizes.sample(rng);
        let t = random_subset(k, size, rng)?;
        examples.push(render(store, &episode, &t, &config.spec, rng)?);
    }
    Ok(EpisodeBatch {
        episode,
        references,
        examples,
    })
}

/// A containment query: does the singleton `query` belong to the label set
/// of `container`?
#[derive(Clone, Debug)]
pub struct QueryPair {
    pub container: Scene,
    pub container_classes: Vec<usize>,
    pub query: Image,
    pub query_class: usize,
    pub label: bool,
}

/// `n_pairs` containment pairs, exactly half positive (even positions).
/// Container sizes follow `sizes`; a negative's query class is drawn from
/// the catalog outside the container's classes.
pub fn sample_query_pairs<R: Rng + ?Sized>(
    store: &GlyphStore,
    catalog: &[usize],
    n_pairs: usize,
    sizes: &SizeDistribution,
    container_spec: &RenderSpec,
    query_spec: &RenderSpec,
    rng: &mut R,
) -> Result<Vec<QueryPair>> {
    if n_pairs % 2 != 0 {
        return invalid_arg(format!("{n_pairs} pairs cannot be split evenly"));
    }
    if catalog.len() <= sizes.max_size() {
        return invalid_arg(format!(
            "catalog of {} classes too small for containers of {}",
            catalog.len(),
            sizes.max_size()
        ));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let positive = i % 2 == 0;
        let size = sizes.sample(rng);
        let drawn: Vec<usize> = index::sample(rng, catalog.len(), size + 1)
            .into_iter()
            .map(|j| catalog[j])
            .collect();
        let episode = Episode::new(drawn.clone(), vec![0; size + 1])?;
        let t = LabelSet::from_elements(&(0..size).collect::<Vec<_>>(), size + 1)?;
        let container = render(store, &episode, &t, container_spec, rng)?;
        let query_class = if positive {
            drawn[rng.gen_range(0..size)]
        } else {
            drawn[size]
        };
        let query = render_singleton(store, query_class, query_spec, rng);
        out.push(QueryPair {
            container,
            container_classes: drawn[..size].to_vec(),
            query,
            query_class,
            label: positive,
        });
    }
    Ok(out)
}
