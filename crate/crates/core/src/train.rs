//! Training loops for the union, query and supervised models and for the
//! embedding baselines, with resumable state.

use std::collections::VecDeque;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    multilabel_head, CompositionHead, Encoder, EncoderConfig, GVariant, HVariant, LabelEmbedder, Model3Config,
    Model3Head, QueryHead, SigmoidMlp,
};
use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{invalid_arg, Error, Result};
use crate::inference::SubsetPlan;
use crate::labelset::{Episode, LabelSet};
use crate::losses::{bce_graph, multilabel_bce_graph, triplet_graph};
use crate::nn::optim::update_running_stats;
use crate::nn::{Adam, Graph, Grads, NodeId, ParamStore, Tensor};
use crate::render::{render, render_singleton, GlyphStore, Image, RenderSpec};
use crate::sampling::{sample_episode, sample_query_pairs, EpisodeConfig, NegativeSampler, SizeDistribution};

/// What is being trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Encoder and composition head, triplet loss against subset tables.
    Union { g: GVariant },
    /// Encoder and containment query head, cross-entropy on query pairs.
    Query { h: HVariant },
    /// Image encoder, label embedder and joint query head over a fixed
    /// class inventory.
    Supervised,
    /// Image encoder with independent per-class sigmoid outputs.
    Multilabel,
    /// Encoder alone, triplets of singleton renders.
    SingletonEmbedding,
    /// Encoder alone: a composite anchor, a singleton of its first class
    /// as positive, a singleton of an absent class as negative.
    ContainmentEmbedding,
}

impl ModelKind {
    pub fn name(&self) -> String {
        match self {
            ModelKind::Union { g } => format!("g_{}", g.name()),
            ModelKind::Query { h } => format!("h_{}", h.name()),
            ModelKind::Supervised => "model3".into(),
            ModelKind::Multilabel => "multilabel".into(),
            ModelKind::SingletonEmbedding => "tradem".into(),
            ModelKind::ContainmentEmbedding => "tradem_containment".into(),
        }
    }
}

/// Which classes each image is asked about in supervised training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryPolicy {
    AllClasses,
    /// Every present class and as many absent ones.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub encoder: EncoderConfig,
    /// Hidden width of composition and query heads.
    pub head_hidden: usize,
    pub margin: f64,
    /// Episode classes (union models).
    pub k: usize,
    /// Label-set sizes of composites, containers and supervised scenes.
    pub sizes: SizeDistribution,
    /// Examples per step.
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Rendering of composites and containers.
    pub scene_spec: RenderSpec,
    /// Rendering of singletons.
    pub singleton_spec: RenderSpec,
    /// Size of the class inventory for supervised models.
    pub n_classes: usize,
    pub label_dim: usize,
    pub query_policy: QueryPolicy,
    /// Steps per metric record.
    pub log_every: u64,
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        let (sizes, m) = match model {
            ModelKind::Union { .. } => (vec![1.0; 3], 32),
            ModelKind::SingletonEmbedding => (vec![1.0], 32),
            ModelKind::Query { .. } | ModelKind::ContainmentEmbedding => (vec![1.0; 5], 32),
            ModelKind::Supervised | ModelKind::Multilabel => (vec![1.0; 4], 128),
        };
        Self {
            model,
            encoder: EncoderConfig {
                m,
                ..EncoderConfig::default()
            },
            head_hidden: 32,
            margin: 0.1,
            k: 5,
            sizes: SizeDistribution::new(sizes).expect("static weights"),
            batch: 32,
            steps: 20_000,
            lr: 1e-3,
            bn_momentum: 0.1,
            seed: 0,
            scene_spec: RenderSpec::default(),
            singleton_spec: RenderSpec::default(),
            n_classes: 20,
            label_dim: 32,
            query_policy: QueryPolicy::AllClasses,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.scene_spec.validate()?;
        self.singleton_spec.validate()?;
        if !(self.margin > 0.0) {
            return invalid_arg("margin must be positive");
        }
        if self.batch == 0 || self.log_every == 0 {
            return invalid_arg("batch and log interval must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return invalid_arg("learning rate must be positive and momentum in [0, 1]");
        }
        match self.model {
            ModelKind::Union { .. } | ModelKind::SingletonEmbedding => {
                if self.sizes.max_size() > self.k {
                    return invalid_arg(format!("cap {} exceeds k = {}", self.sizes.max_size(), self.k));
                }
            }
            ModelKind::Query { .. } | ModelKind::ContainmentEmbedding => {
                if self.batch % 2 != 0 {
                    return invalid_arg("query batches must be even");
                }
            }
            ModelKind::Supervised | ModelKind::Multilabel => {
                if self.sizes.max_size() > self.n_classes.min(16) {
                    return invalid_arg("scene sizes exceed the class inventory");
                }
            }
        }
        Ok(())
    }
}

/// The trainable heads attached to the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Heads {
    None,
    Union(CompositionHead),
    Query(QueryHead),
    Supervised { label: LabelEmbedder, head: Model3Head },
    Multilabel(SigmoidMlp),
}

/// Encoder, heads and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub heads: Heads,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Builds the architecture described by `config`, initialized from its seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), "f", &mut params, &mut rng)?;
        let m = config.encoder.m;
        let hidden = config.head_hidden;
        let heads = match config.model {
            ModelKind::Union { g } => Heads::Union(CompositionHead::new(g, m, hidden, "g", &mut params, &mut rng)),
            ModelKind::Query { h } => Heads::Query(QueryHead::new(h, m, hidden, "h", &mut params, &mut rng)),
            ModelKind::Supervised => {
                let cfg = Model3Config {
                    image_dim: m,
                    label_dim: config.label_dim,
                    n_classes: config.n_classes,
                    hidden: Model3Config::default().hidden,
                };
                let label = LabelEmbedder::new(config.n_classes, config.label_dim, "label", &mut params, &mut rng);
                let head = Model3Head::new(cfg, "m3", &mut params, &mut rng);
                Heads::Supervised { label, head }
            }
            ModelKind::Multilabel => Heads::Multilabel(multilabel_head(m, config.n_classes, "ml", &mut params, &mut rng)),
            ModelKind::SingletonEmbedding | ModelKind::ContainmentEmbedding => Heads::None,
        };
        Ok(Self {
            config,
            encoder,
            heads,
            params,
        })
    }

    /// Rebuilds a model from stored configuration and parameters.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.config.clone()).map_err(|e| Error::Checkpoint {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        let mut model = Model::new(config)?;
        for (name, entry) in model.params.iter() {
            let stored = ck.params.get(name).ok_or_else(|| Error::Checkpoint {
                field: format!("array `{name}`"),
                reason: "missing".into(),
            })?;
            if stored.shape != entry.tensor.shape || ck.params.is_trainable(name) != entry.trainable {
                return Err(Error::Checkpoint {
                    field: format!("array `{name}`"),
                    reason: format!("expected shape {:?}, found {:?}", entry.tensor.shape, stored.shape),
                });
            }
        }
        if let Some(extra) = ck.params.names().find(|n| !model.params.contains(n)) {
            return Err(Error::Checkpoint {
                field: format!("array `{extra}`"),
                reason: "not part of the model".into(),
            });
        }
        model.params = ck.params.clone();
        Ok(model)
    }

    pub fn composition_head(&self) -> Result<&CompositionHead> {
        match &self.heads {
            Heads::Union(g) => Ok(g),
            _ => Err(Error::InvalidState(format!("{} has no composition head", self.config.model.name()))),
        }
    }

    pub fn query_head(&self) -> Result<&QueryHead> {
        match &self.heads {
            Heads::Query(h) => Ok(h),
            _ => Err(Error::InvalidState(format!("{} has no query head", self.config.model.name()))),
        }
    }

    /// Resizes to the encoder's input and embeds (eval mode).
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let fitted = self.fit(images);
        let refs: Vec<&Image> = fitted.iter().collect();
        self.encoder.encode(&self.params, &refs)
    }

    fn fit(&self, images: &[&Image]) -> Vec<Image> {
        let side = self.encoder.config.input_size;
        images.iter().map(|i| i.fit_square(side)).collect()
    }

    fn input_batch(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        let fitted = self.fit(images);
        let refs: Vec<&Image> = fitted.iter().collect();
        self.encoder.batch(&refs)
    }

    /// Per-class probabilities of a supervised or multilabel model.
    pub fn class_probabilities(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let n = self.config.n_classes;
        let emb = self.embed(images)?;
        let mut g = Graph::new(false);
        let e = g.input(Tensor::from_rows(&emb));
        let probs = match &self.heads {
            Heads::Multilabel(mlp) => mlp.forward(&mut g, &self.params, e),
            Heads::Supervised { label, head } => {
                let rows: Vec<usize> = (0..images.len()).flat_map(|i| std::iter::repeat(i).take(n)).collect();
                let classes: Vec<usize> = (0..images.len()).flat_map(|_| 0..n).collect();
                let img = g.gather_rows(e, &rows);
                let lab = label.forward(&mut g, &self.params, &classes);
                head.forward(&mut g, &self.params, img, lab)
            }
            _ => return Err(Error::InvalidState("model has no per-class outputs".into())),
        };
        Ok(g.value(probs).data.chunks(n).map(<[f32]>::to_vec).collect())
    }
}

/// Training data: a glyph store and the classes a trainer may draw from.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub store: &'a GlyphStore,
    pub classes: &'a [usize],
}

/// One line of the metric trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean loss over the steps since the previous record.
    pub smoothed_loss: f64,
}

/// A model together with its optimizer and data-stream state.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    rng: ChaCha8Rng,
    pub step: u64,
    window: VecDeque<f64>,
    negatives: Option<(SubsetPlan, NegativeSampler)>,
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(model: Model) -> Result<Self> {
        let adam = Adam::new(model.config.lr);
        let rng = data_rng(model.config.seed);
        Self::assemble(model, adam, rng, 0)
    }

    fn assemble(model: Model, adam: Adam, rng: ChaCha8Rng, step: u64) -> Result<Self> {
        let negatives = match model.config.model {
            ModelKind::Union { .. } | ModelKind::SingletonEmbedding => {
                let cap = model.config.sizes.max_size();
                Some((SubsetPlan::new(model.config.k, cap)?, NegativeSampler::new(model.config.k, cap)?))
            }
            _ => None,
        };
        Ok(Self {
            model,
            adam,
            rng,
            step,
            window: VecDeque::new(),
            negatives,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let adam = ck.optimizer.clone().ok_or_else(|| Error::Checkpoint {
            field: "adam".into(),
            reason: "missing optimizer state".into(),
        })?;
        let rng = ck.rng.as_ref().map(RngState::restore).ok_or_else(|| Error::Checkpoint {
            field: "rng".into(),
            reason: "missing data stream state".into(),
        })?;
        Self::assemble(model, adam, rng, ck.step)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step: self.step,
            config: serde_json::to_value(&self.model.config)?,
            params: self.model.params.clone(),
            optimizer: Some(self.adam.clone()),
            rng: Some(RngState::capture(&self.rng)),
        })
    }

    /// Samples a batch and returns its loss, gradients and batch statistics
    /// without updating anything but the data stream.
    pub fn compute(&mut self, data: TrainData<'_>) -> Result<(f64, Grads<f32>, Graph<f32>)> {
        let mut g = Graph::new(true);
        let loss = match self.model.config.model.clone() {
            ModelKind::Union { .. } | ModelKind::SingletonEmbedding => self.union_loss(&mut g, data)?,
            ModelKind::Query { .. } => self.query_loss(&mut g, data)?,
            ModelKind::ContainmentEmbedding => self.containment_triplet_loss(&mut g, data)?,
            ModelKind::Supervised | ModelKind::Multilabel => self.supervised_loss(&mut g, data)?,
        };
        let value = f64::from(g.value(loss).data[0]);
        let grads = g.backward(loss);
        Ok((value, grads, g))
    }

    /// One optimization step; returns the batch loss.
    pub fn step(&mut self, data: TrainData<'_>) -> Result<f64> {
        let (loss, grads, g) = self.compute(data)?;
        let step = self.step + 1;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        self.adam.step(&mut self.model.params, &grads);
        update_running_stats(&mut self.model.params, g.batch_stats(), self.model.config.bn_momentum as f32);
        if !self.model.params.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        self.step = step;
        Ok(loss)
    }

    /// Trains until `until` steps have been taken, reporting a record every
    /// `log_every` steps.
    pub fn train_until(
        &mut self,
        data: TrainData<'_>,
        until: u64,
        sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
    ) -> Result<()> {
        let every = self.model.config.log_every;
        while self.step < until {
            let loss = self.step(data)?;
            self.window.push_back(loss);
            if self.step % every == 0 || self.step == until {
                let smoothed = self.window.iter().sum::<f64>() / self.window.len() as f64;
                self.window.clear();
                sink(&TraceRecord {
                    step: self.step,
                    loss,
                    smoothed_loss: smoothed,
                })?;
            }
        }
        Ok(())
    }

    fn union_loss(&mut self, g: &mut Graph<f32>, data: TrainData<'_>) -> Result<NodeId> {
        let cfg = &self.model.config;
        let episode_cfg = EpisodeConfig {
            k: cfg.k,
            sizes: cfg.sizes.clone(),
            batch: cfg.batch,
            spec: cfg.scene_spec.clone(),
        };
        let eb = sample_episode(data.store, data.classes, &episode_cfg, &mut self.rng)?;
        let (plan, sampler) = self.negatives.as_ref().expect("union trainer");
        let mut pos = Vec::with_capacity(cfg.batch);
        let mut neg = Vec::with_capacity(cfg.batch);
        for s in &eb.examples {
            pos.push(plan.position(&s.truth).expect("truth within cap"));
            let t = sampler.sample(&s.truth, &mut self.rng)?;
            neg.push(plan.position(&t).expect("negative within cap"));
        }
        let images: Vec<&Image> = eb.references.iter().chain(eb.examples.iter().map(|s| &s.image)).collect();
        let x = self.model.input_batch(&images)?;
        let xi = g.input(x);
        let e = self.model.encoder.forward(g, &self.model.params, xi);
        let k = cfg.k;
        let singles = g.gather_rows(e, &(0..k).collect::<Vec<_>>());
        let anchors = g.gather_rows(e, &(k..k + cfg.batch).collect::<Vec<_>>());
        let table = match &self.model.heads {
            Heads::Union(head) => plan.build_graph(g, &self.model.params, head, singles),
            _ => singles,
        };
        let p = g.gather_rows(table, &pos);
        let n = g.gather_rows(table, &neg);
        Ok(triplet_graph(g, anchors, p, n, cfg.margin as f32))
    }

    fn query_loss(&mut self, g: &mut Graph<f32>, data: TrainData<'_>) -> Result<NodeId> {
        let cfg = &self.model.config;
        let pairs = sample_query_pairs(
            data.store,
            data.classes,
            cfg.batch,
            &cfg.sizes,
            &cfg.scene_spec,
            &cfg.singleton_spec,
            &mut self.rng,
        )?;
        let images: Vec<&Image> = pairs
            .iter()
            .map(|p| &p.container.image)
            .chain(pairs.iter().map(|p| &p.query))
            .collect();
        let x = self.model.input_batch(&images)?;
        let xi = g.input(x);
        let e = self.model.encoder.forward(g, &self.model.params, xi);
        let n = pairs.len();
        let a = g.gather_rows(e, &(0..n).collect::<Vec<_>>());
        let b = g.gather_rows(e, &(n..2 * n).collect::<Vec<_>>());
        let head = self.model.query_head()?;
        let p = head.forward(g, &self.model.params, a, b);
        let labels: Vec<f32> = pairs.iter().map(|p| if p.label { 1.0 } else { 0.0 }).collect();
        Ok(bce_graph(g, p, &labels))
    }

    fn containment_triplet_loss(&mut self, g: &mut Graph<f32>, data: TrainData<'_>) -> Result<NodeId> {
        let cfg = self.model.config.clone();
        let mut images = Vec::with_capacity(3 * cfg.batch);
        for _ in 0..cfg.batch {
            let size = cfg.sizes.sample(&mut self.rng);
            let drawn: Vec<usize> = index::sample(&mut self.rng, data.classes.len(), size + 1)
                .into_iter()
                .map(|j| data.classes[j])
                .collect();
            let episode = Episode::new(drawn.clone(), vec![0; size + 1])?;
            let t = LabelSet::from_elements(&(0..size).collect::<Vec<_>>(), size + 1)?;
            let anchor = render(data.store, &episode, &t, &cfg.scene_spec, &mut self.rng)?;
            // positive: the container's first class under the catalog order
            let first = *drawn[..size].iter().min().expect("nonempty");
            let pos = render_singleton(data.store, first, &cfg.singleton_spec, &mut self.rng);
            let neg = render_singleton(data.store, drawn[size], &cfg.singleton_spec, &mut self.rng);
            images.push(anchor.image);
            images.push(pos);
            images.push(neg);
        }
        let refs: Vec<&Image> = images.iter().collect();
        let x = self.model.input_batch(&refs)?;
        let xi = g.input(x);
        let e = self.model.encoder.forward(g, &self.model.params, xi);
        let pick = |o: usize| (0..cfg.batch).map(|i| 3 * i + o).collect::<Vec<_>>();
        let a = g.gather_rows(e, &pick(0));
        let p = g.gather_rows(e, &pick(1));
        let n = g.gather_rows(e, &pick(2));
        Ok(triplet_graph(g, a, p, n, cfg.margin as f32))
    }

    fn supervised_loss(&mut self, g: &mut Graph<f32>, data: TrainData<'_>) -> Result<NodeId> {
        let cfg = self.model.config.clone();
        let n_classes = cfg.n_classes;
        let scenes = sample_supervised_scenes(data, &cfg, cfg.batch, &mut self.rng)?;
        let images: Vec<&Image> = scenes.iter().map(|s| &s.0).collect();
        let x = self.model.input_batch(&images)?;
        let xi = g.input(x);
        let e = self.model.encoder.forward(g, &self.model.params, xi);
        match &self.model.heads {
            Heads::Multilabel(mlp) => {
                let p = mlp.forward(g, &self.model.params, e);
                let labels: Vec<f32> = scenes.iter().flat_map(|s| s.1.iter().copied()).collect();
                Ok(multilabel_bce_graph(g, p, &labels, n_classes, false))
            }
            Heads::Supervised { label, head } => {
                let mut rows = Vec::new();
                let mut classes = Vec::new();
                let mut labels = Vec::new();
                let mut per_image = None;
                for (i, (_, y)) in scenes.iter().enumerate() {
                    let queried = match cfg.query_policy {
                        QueryPolicy::AllClasses => (0..n_classes).collect(),
                        QueryPolicy::Balanced => balanced_queries(y, &mut self.rng),
                    };
                    per_image.get_or_insert(queried.len());
                    for c in queried {
                        rows.push(i);
                        classes.push(c);
                        labels.push(y[c]);
                    }
                }
                let img = g.gather_rows(e, &rows);
                let lab = label.forward(g, &self.model.params, &classes);
                let p = head.forward(g, &self.model.params, img, lab);
                match cfg.query_policy {
                    QueryPolicy::AllClasses => Ok(multilabel_bce_graph(g, p, &labels, n_classes, true)),
                    // balanced queries already weigh both kinds equally
                    QueryPolicy::Balanced => {
                        let ones = vec![1.0f32; labels.len()];
                        let per = g.bce(p, &labels, &ones, crate::losses::DELTA as f32);
                        let total = g.sum(per);
                        Ok(g.scale(total, 1.0 / scenes.len() as f32))
                    }
                }
            }
            _ => unreachable!("supervised trainer without supervised head"),
        }
    }
}

/// Every present class of `labels`, plus as many absent ones drawn
/// uniformly; sorted.
pub fn balanced_queries<R: Rng + ?Sized>(labels: &[f32], rng: &mut R) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&c| labels[c] == 1.0).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&c| labels[c] != 1.0).collect();
    let take = pos.len().min(neg.len());
    let mut out = pos;
    out.extend(neg.choose_multiple(rng, take));
    out.sort_unstable();
    out
}

/// Scenes over the fixed inventory `data.classes` (index = class id in
/// the label vector) with sizes from the config.
pub fn sample_supervised_scenes<R: Rng + ?Sized>(
    data: TrainData<'_>,
    cfg: &TrainConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(Image, Vec<f32>)>> {
    if data.classes.len() != cfg.n_classes {
        return invalid_arg(format!(
            "inventory of {} classes for a {}-class model",
            data.classes.len(),
            cfg.n_classes
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let size = cfg.sizes.sample(rng);
        let picked = index::sample(rng, cfg.n_classes, size).into_vec();
        let episode = Episode::new(picked.iter().map(|&i| data.classes[i]).collect(), vec![0; size])?;
        let t = LabelSet::from_elements(&(0..size).collect::<Vec<_>>(), size)?;
        let scene = render(data.store, &episode, &t, &cfg.scene_spec, rng)?;
        let mut y = vec![0.0; cfg.n_classes];
        for &i in &picked {
            y[i] = 1.0;
        }
        out.push((scene.image, y));
    }
    Ok(out)
}

/// Trains a fresh model for `config.steps` steps, reporting the trace.
pub fn train(
    config: TrainConfig,
    data: TrainData<'_>,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<Trainer> {
    let steps = config.steps;
    let mut trainer = Trainer::new(Model::new(config)?)?;
    trainer.train_until(data, steps, sink)?;
    Ok(trainer)
}
