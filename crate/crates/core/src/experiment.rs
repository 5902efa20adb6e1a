//! Experiment runner: configuration, training of every compared model over
//! several seeds, evaluation on held-out data, and report artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    calibrate_distance_threshold, mf_predict, slidewin_score, tradem_decision, tradem_table,
};
use crate::blocks::{Backbone, EncoderConfig, GVariant, HVariant};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::inference::{build_subset_table, decode_nearest_subset};
use crate::labelset::{enumerate_label_sets, Episode, LabelSet};
use crate::metrics::{labelset_report, labelset_table_csv, query_report, query_table_csv, LabelSetReport, QueryReport, Rate, Stratum};
use crate::render::{load_glyph_store, render, synth_glyph_store, GlyphStore, Image, RenderMode, RenderSpec};
use crate::sampling::{sample_query_pairs, SizeDistribution};
use crate::train::{balanced_queries, sample_supervised_scenes, Model, ModelKind, TraceRecord, TrainConfig, TrainData, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentTag {
    Exp1Union,
    Exp2Containment,
    Exp3Scene,
    Exp4Supervised,
}

impl ExperimentTag {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Exp1Union => "exp1_union",
            Self::Exp2Containment => "exp2_containment",
            Self::Exp3Scene => "exp3_scene",
            Self::Exp4Supervised => "exp4_supervised",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Exp1Union, Self::Exp2Containment, Self::Exp3Scene, Self::Exp4Supervised]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

/// How multi-class scenes are composed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Glyphs overlaid by pointwise minimum.
    Overlay,
    /// One glyph per grid cell.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic { classes: usize, exemplars: usize, seed: u64 },
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentTag,
    pub data: DataSource,
    /// Classes `0..train_classes` train, the rest test (experiments 1-3).
    pub train_classes: usize,
    /// Inventory size of the supervised experiment.
    pub fixed_classes: usize,
    /// Exemplars `0..train_exemplars` train, the rest test (experiment 4).
    pub train_exemplars: usize,
    pub g_variants: Vec<GVariant>,
    pub h_variants: Vec<HVariant>,
    pub baselines: bool,
    pub backbone: Backbone,
    pub input_size: usize,
    pub embed_dim: usize,
    /// Image feature width of the supervised models.
    pub feature_dim: usize,
    pub label_dim: usize,
    pub head_hidden: usize,
    pub k: usize,
    /// Largest label set of the union experiment.
    pub cap: usize,
    /// Largest container of the containment experiments.
    pub container_max: usize,
    /// Largest scene of the supervised experiment.
    pub scene_max: usize,
    pub layout: Layout,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub margin: f64,
    pub bn_momentum: f64,
    pub render: RenderSpec,
    pub eval_episodes: usize,
    pub eval_queries_per_episode: usize,
    /// Query pairs or test scenes of experiments 2-4.
    pub eval_pairs: usize,
    /// SlideWin threshold calibration pairs.
    pub validation_pairs: usize,
    pub slidewin_max_grid: usize,
    /// Number of seeds, `seed, seed + 1, ...`.
    pub seeds: usize,
    pub seed: u64,
    pub log_every: u64,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentTag) -> Self {
        Self {
            experiment,
            data: DataSource::Synthetic {
                classes: 250,
                exemplars: 20,
                seed: 0,
            },
            train_classes: 200,
            fixed_classes: 20,
            train_exemplars: 15,
            g_variants: GVariant::ALL.to_vec(),
            h_variants: HVariant::ALL.to_vec(),
            baselines: true,
            backbone: Backbone::SmallCnn { widths: [8, 16, 32, 32] },
            input_size: 32,
            embed_dim: 32,
            feature_dim: 128,
            label_dim: 32,
            head_hidden: 32,
            k: 5,
            cap: 3,
            container_max: if experiment == ExperimentTag::Exp3Scene { 4 } else { 5 },
            scene_max: 4,
            layout: if experiment == ExperimentTag::Exp3Scene { Layout::Grid } else { Layout::Overlay },
            grid_rows: 2,
            grid_cols: 2,
            steps: 20_000,
            batch: 32,
            lr: 1e-3,
            margin: 0.1,
            bn_momentum: 0.1,
            render: RenderSpec::default(),
            eval_episodes: 200,
            eval_queries_per_episode: 25,
            eval_pairs: 2000,
            validation_pairs: 500,
            slidewin_max_grid: 4,
            seeds: 3,
            seed: 0,
            log_every: 100,
            out_dir: PathBuf::from("out"),
        }
    }

    /// Parses flat `key = value` text; `#` starts a comment. Unknown keys,
    /// repeated keys and malformed values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim().to_string();
            if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(config_err(format!("line {}: `{key}` given twice", n + 1)));
            }
        }
        let tag = pairs
            .remove("experiment")
            .ok_or_else(|| config_err("missing `experiment`"))?;
        let tag = ExperimentTag::parse(&tag).ok_or_else(|| config_err(format!("unknown experiment `{tag}`")))?;
        let mut cfg = Self::new(tag);
        let mut synth = (250usize, 20usize, 0u64);
        let mut data_dir = None;
        let mut widths = None;
        let mut backbone = "small_cnn".to_string();
        for (key, value) in &pairs {
            let v = value.as_str();
            match key.as_str() {
                "data" => data_dir = (v != "synthetic").then(|| PathBuf::from(v)),
                "synthetic_classes" => synth.0 = num(key, v)?,
                "synthetic_exemplars" => synth.1 = num(key, v)?,
                "data_seed" => synth.2 = num(key, v)?,
                "train_classes" => cfg.train_classes = num(key, v)?,
                "fixed_classes" => cfg.fixed_classes = num(key, v)?,
                "train_exemplars" => cfg.train_exemplars = num(key, v)?,
                "g_variants" => cfg.g_variants = list(key, v, |s| GVariant::parse(s).ok())?,
                "h_variants" => cfg.h_variants = list(key, v, |s| HVariant::parse(s).ok())?,
                "baselines" => cfg.baselines = num(key, v)?,
                "backbone" => backbone = v.to_string(),
                "widths" => {
                    let w: Vec<usize> = list(key, v, |s| s.parse().ok())?;
                    let w: [usize; 4] = w
                        .try_into()
                        .map_err(|_| config_err("`widths` needs four comma-separated values"))?;
                    widths = Some(w);
                }
                "input_size" => cfg.input_size = num(key, v)?,
                "embed_dim" => cfg.embed_dim = num(key, v)?,
                "feature_dim" => cfg.feature_dim = num(key, v)?,
                "label_dim" => cfg.label_dim = num(key, v)?,
                "head_hidden" => cfg.head_hidden = num(key, v)?,
                "k" => cfg.k = num(key, v)?,
                "cap" => cfg.cap = num(key, v)?,
                "container_max" => cfg.container_max = num(key, v)?,
                "scene_max" => cfg.scene_max = num(key, v)?,
                "layout" => {
                    cfg.layout = match v {
                        "overlay" => Layout::Overlay,
                        "grid" => Layout::Grid,
                        other => return Err(config_err(format!("unknown layout `{other}`"))),
                    }
                }
                "grid_rows" => cfg.grid_rows = num(key, v)?,
                "grid_cols" => cfg.grid_cols = num(key, v)?,
                "steps" => cfg.steps = num(key, v)?,
                "batch" => cfg.batch = num(key, v)?,
                "lr" => cfg.lr = num(key, v)?,
                "margin" => cfg.margin = num(key, v)?,
                "bn_momentum" => cfg.bn_momentum = num(key, v)?,
                "shift_frac" => cfg.render.shift_frac = num(key, v)?,
                "scale_min" => cfg.render.scale_range.0 = num(key, v)?,
                "scale_max" => cfg.render.scale_range.1 = num(key, v)?,
                "rot_deg" => cfg.render.rot_deg = num(key, v)?,
                "noise_sigma" => cfg.render.noise_sigma = num(key, v)?,
                "eval_episodes" => cfg.eval_episodes = num(key, v)?,
                "eval_queries_per_episode" => cfg.eval_queries_per_episode = num(key, v)?,
                "eval_pairs" => cfg.eval_pairs = num(key, v)?,
                "validation_pairs" => cfg.validation_pairs = num(key, v)?,
                "slidewin_max_grid" => cfg.slidewin_max_grid = num(key, v)?,
                "seeds" => cfg.seeds = num(key, v)?,
                "seed" => cfg.seed = num(key, v)?,
                "log_every" => cfg.log_every = num(key, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                other => return Err(config_err(format!("unknown key `{other}`"))),
            }
        }
        cfg.data = match data_dir {
            Some(dir) => DataSource::Directory(dir),
            None => DataSource::Synthetic {
                classes: synth.0,
                exemplars: synth.1,
                seed: synth.2,
            },
        };
        cfg.backbone = match backbone.as_str() {
            "small_cnn" => Backbone::SmallCnn {
                widths: widths.unwrap_or([8, 16, 32, 32]),
            },
            "resnet18" if widths.is_none() => Backbone::Resnet18,
            "resnet18" => return Err(config_err("`widths` applies to small_cnn only")),
            other => return Err(config_err(format!("unknown backbone `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Directory(dir) = &self.data {
            if !dir.is_dir() {
                return Err(config_err(format!("data directory {} does not exist", dir.display())));
            }
        }
        match self.experiment {
            ExperimentTag::Exp1Union if self.g_variants.is_empty() => {
                return Err(config_err("`g_variants` is empty"));
            }
            ExperimentTag::Exp2Containment | ExperimentTag::Exp3Scene if self.h_variants.is_empty() => {
                return Err(config_err("`h_variants` is empty"));
            }
            _ => {}
        }
        if self.seeds == 0 {
            return Err(config_err("`seeds` must be positive"));
        }
        if self.eval_pairs % 2 != 0 || self.validation_pairs % 2 != 0 {
            return Err(config_err("query pair counts must be even"));
        }
        if self.experiment == ExperimentTag::Exp3Scene && self.layout != Layout::Grid {
            return Err(config_err("exp3_scene requires the grid layout"));
        }
        let largest = match self.experiment {
            ExperimentTag::Exp1Union => self.cap,
            ExperimentTag::Exp2Containment | ExperimentTag::Exp3Scene => self.container_max,
            ExperimentTag::Exp4Supervised => self.scene_max,
        };
        if self.layout == Layout::Grid && largest > self.grid_rows * self.grid_cols {
            return Err(config_err(format!(
                "{largest}-class scenes do not fit a {}x{} grid",
                self.grid_rows, self.grid_cols
            )));
        }
        if self.eval_episodes == 0 || self.eval_queries_per_episode == 0 || self.eval_pairs == 0 {
            return Err(config_err("evaluation sizes must be positive"));
        }
        for kind in self.models() {
            self.train_config(&kind, self.seed)
                .validate()
                .map_err(|e| config_err(format!("{}: {e}", kind.name())))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    /// Models that need training, in report order.
    pub fn models(&self) -> Vec<ModelKind> {
        let mut out = Vec::new();
        match self.experiment {
            ExperimentTag::Exp1Union => {
                out.extend(self.g_variants.iter().map(|&g| ModelKind::Union { g }));
                if self.baselines {
                    out.push(ModelKind::SingletonEmbedding);
                }
            }
            ExperimentTag::Exp2Containment => {
                out.extend(self.h_variants.iter().map(|&h| ModelKind::Query { h }));
                if self.baselines {
                    out.push(ModelKind::ContainmentEmbedding);
                }
            }
            ExperimentTag::Exp3Scene => {
                out.extend(self.h_variants.iter().map(|&h| ModelKind::Query { h }));
                if self.baselines {
                    out.push(ModelKind::SingletonEmbedding);
                    out.push(ModelKind::ContainmentEmbedding);
                }
            }
            ExperimentTag::Exp4Supervised => {
                out.push(ModelKind::Supervised);
                if self.baselines {
                    out.push(ModelKind::Multilabel);
                }
            }
        }
        out
    }

    fn grid_spec(&self) -> RenderSpec {
        self.render.with_mode(RenderMode::GridScene {
            rows: self.grid_rows,
            cols: self.grid_cols,
        })
    }

    /// Rendering of composite examples and containers.
    pub fn scene_spec(&self) -> RenderSpec {
        match self.layout {
            Layout::Overlay => self.render,
            Layout::Grid => self.grid_spec(),
        }
    }

    fn container_sizes(&self) -> SizeDistribution {
        SizeDistribution::uniform(self.container_max).expect("validated size")
    }

    pub fn train_config(&self, kind: &ModelKind, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(kind.clone());
        let supervised = matches!(kind, ModelKind::Supervised | ModelKind::Multilabel);
        c.encoder = EncoderConfig {
            m: if supervised { self.feature_dim } else { self.embed_dim },
            backbone: self.backbone.clone(),
            input_size: self.input_size,
        };
        c.head_hidden = self.head_hidden;
        c.margin = self.margin;
        c.k = self.k;
        c.batch = self.batch;
        c.steps = self.steps;
        c.lr = self.lr;
        c.bn_momentum = self.bn_momentum;
        c.seed = seed;
        // the window-scan encoder is trained on bare singletons
        c.scene_spec = match kind {
            ModelKind::SingletonEmbedding => self.render,
            _ => self.scene_spec(),
        };
        c.singleton_spec = self.render;
        c.n_classes = self.fixed_classes;
        c.label_dim = self.label_dim;
        c.log_every = self.log_every;
        let uniform = |n: usize| SizeDistribution::uniform(n.max(1)).expect("positive size");
        c.sizes = match kind {
            ModelKind::Union { .. } => uniform(self.cap),
            ModelKind::SingletonEmbedding => uniform(1),
            ModelKind::Query { .. } | ModelKind::ContainmentEmbedding => uniform(self.container_max),
            ModelKind::Supervised | ModelKind::Multilabel => uniform(self.scene_max),
        };
        c
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(format!("`{key}`: cannot parse `{v}`")))
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| config_err(format!("`{key}`: unknown entry `{s}`"))))
        .collect()
}

/// Train and test views of the data for one experiment.
pub struct Split {
    pub train: GlyphStore,
    pub train_classes: Vec<usize>,
    pub test: GlyphStore,
    pub test_classes: Vec<usize>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<GlyphStore> {
    match &cfg.data {
        DataSource::Synthetic { classes, exemplars, seed } => synth_glyph_store(*classes, *exemplars, *seed),
        DataSource::Directory(dir) => load_glyph_store(dir),
    }
}

pub fn split(cfg: &ExperimentConfig, store: &GlyphStore) -> Result<Split> {
    let n = store.n_classes();
    if cfg.experiment == ExperimentTag::Exp4Supervised {
        if n < cfg.fixed_classes {
            return Err(config_err(format!("{n} classes, inventory needs {}", cfg.fixed_classes)));
        }
        let inventory = store.select_classes(&(0..cfg.fixed_classes).collect::<Vec<_>>());
        let total = inventory.exemplars(0).len();
        let classes: Vec<usize> = (0..cfg.fixed_classes).collect();
        return Ok(Split {
            train: inventory.select_exemplars(0..cfg.train_exemplars)?,
            train_classes: classes.clone(),
            test: inventory.select_exemplars(cfg.train_exemplars..total)?,
            test_classes: classes,
        });
    }
    if cfg.train_classes >= n {
        return Err(config_err(format!("{n} classes leave none for testing")));
    }
    Ok(Split {
        train: store.clone(),
        train_classes: (0..cfg.train_classes).collect(),
        test: store.clone(),
        test_classes: (cfg.train_classes..n).collect(),
    })
}

/// Checkpoint path of a trained model.
pub fn checkpoint_path(out: &Path, kind: &ModelKind, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("{}_seed{seed}.ckpt", kind.name()))
}

pub fn trace_path(out: &Path, kind: &ModelKind, seed: u64) -> PathBuf {
    out.join("traces").join(format!("{}_seed{seed}.jsonl", kind.name()))
}

pub struct TrainedModel {
    pub kind: ModelKind,
    pub seed: u64,
    pub model: Model,
    pub trace: Vec<TraceRecord>,
}

/// Trains every model of the experiment for every seed. With `out`, writes
/// checkpoints and JSON-lines traces.
pub fn train_all(
    cfg: &ExperimentConfig,
    split: &Split,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<TrainedModel>> {
    let mut trained = Vec::new();
    for seed in cfg.seed_list() {
        for kind in cfg.models() {
            progress(&format!("training {} seed {seed}", kind.name()));
            trained.push(train_one(cfg, split, &kind, seed, out)?);
        }
    }
    Ok(trained)
}

pub fn train_one(
    cfg: &ExperimentConfig,
    split: &Split,
    kind: &ModelKind,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainedModel> {
    let tc = cfg.train_config(kind, seed);
    let steps = tc.steps;
    let mut trainer = Trainer::new(Model::new(tc)?)?;
    let data = TrainData {
        store: &split.train,
        classes: &split.train_classes,
    };
    let mut trace = Vec::new();
    trainer.train_until(data, steps, &mut |r| {
        trace.push(r.clone());
        Ok(())
    })?;
    if let Some(out) = out {
        let ck_path = checkpoint_path(out, kind, seed);
        fs::create_dir_all(ck_path.parent().expect("has parent"))?;
        save_checkpoint(&ck_path, &trainer.checkpoint()?)?;
        let tr_path = trace_path(out, kind, seed);
        fs::create_dir_all(tr_path.parent().expect("has parent"))?;
        let mut f = fs::File::create(&tr_path)?;
        for r in &trace {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    Ok(TrainedModel {
        kind: kind.clone(),
        seed,
        model: trainer.model,
        trace,
    })
}

/// Loads the checkpoints written by [`train_all`].
pub fn load_trained(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TrainedModel>> {
    let mut models = Vec::new();
    for seed in cfg.seed_list() {
        for kind in cfg.models() {
            let ck = load_checkpoint(&checkpoint_path(out, &kind, seed))?;
            models.push(TrainedModel {
                kind,
                seed,
                model: Model::from_checkpoint(&ck)?,
                trace: Vec::new(),
            });
        }
    }
    Ok(models)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Report {
    LabelSet(LabelSetReport),
    Query(QueryReport),
}

/// Evaluation of one method under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub report: Report,
}

/// Evaluation randomness depends only on the seed, so every method of a
/// seed sees the same test data.
fn eval_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + stream);
    rng
}

/// Display names of the methods compared in an experiment, in table order.
pub fn methods(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    match cfg.experiment {
        ExperimentTag::Exp1Union => {
            out.extend(cfg.g_variants.iter().map(|g| g.name().to_string()));
            if cfg.baselines {
                out.extend(["TradEm".to_string(), "MF".to_string()]);
            }
        }
        ExperimentTag::Exp2Containment => {
            out.extend(cfg.h_variants.iter().map(|h| h.name().to_string()));
            if cfg.baselines {
                out.push("TradEm".into());
            }
        }
        ExperimentTag::Exp3Scene => {
            out.extend(cfg.h_variants.iter().map(|h| format!("Model II ({})", h.name())));
            if cfg.baselines {
                out.extend(["SlideWin".to_string(), "TradEm".to_string()]);
            }
        }
        ExperimentTag::Exp4Supervised => {
            out.push("Model III".into());
            if cfg.baselines {
                out.push("Independent sigmoids".into());
            }
        }
    }
    out
}

fn method_of(cfg: &ExperimentConfig, kind: &ModelKind) -> String {
    match (cfg.experiment, kind) {
        (_, ModelKind::Union { g }) => g.name().into(),
        (ExperimentTag::Exp3Scene, ModelKind::Query { h }) => format!("Model II ({})", h.name()),
        (_, ModelKind::Query { h }) => h.name().into(),
        (ExperimentTag::Exp3Scene, ModelKind::SingletonEmbedding) => "SlideWin".into(),
        (_, ModelKind::SingletonEmbedding | ModelKind::ContainmentEmbedding) => "TradEm".into(),
        (_, ModelKind::Supervised) => "Model III".into(),
        (_, ModelKind::Multilabel) => "Independent sigmoids".into(),
    }
}

/// Evaluates every trained model (and MF where it applies).
pub fn evaluate(
    cfg: &ExperimentConfig,
    split: &Split,
    models: &[TrainedModel],
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<MetricRecord>> {
    let hash = cfg.hash();
    let mut records = Vec::new();
    for seed in cfg.seed_list() {
        for tm in models.iter().filter(|m| m.seed == seed) {
            let method = method_of(cfg, &tm.kind);
            progress(&format!("evaluating {method} seed {seed}"));
            let report = match cfg.experiment {
                ExperimentTag::Exp1Union => Report::LabelSet(eval_union(cfg, split, &tm.model, seed)?),
                ExperimentTag::Exp2Containment | ExperimentTag::Exp3Scene => {
                    Report::Query(eval_containment(cfg, split, &tm.model, seed)?)
                }
                ExperimentTag::Exp4Supervised => Report::Query(eval_supervised(cfg, split, &tm.model, seed)?),
            };
            records.push(MetricRecord {
                experiment: cfg.experiment.name().into(),
                method,
                seed,
                config_hash: hash.clone(),
                report,
            });
        }
        if cfg.experiment == ExperimentTag::Exp1Union && cfg.baselines {
            records.push(MetricRecord {
                experiment: cfg.experiment.name().into(),
                method: "MF".into(),
                seed,
                config_hash: hash.clone(),
                report: Report::LabelSet(eval_mf(cfg, split, seed)?),
            });
        }
    }
    Ok(records)
}

/// Test episodes of the union experiment: references and uniformly drawn
/// label sets over all nonempty sets up to the cap.
fn union_episodes(
    cfg: &ExperimentConfig,
    split: &Split,
    seed: u64,
    mut visit: impl FnMut(&[Image], &[(Image, LabelSet)]) -> Result<()>,
) -> Result<()> {
    use rand::seq::SliceRandom;
    let sets = enumerate_label_sets(cfg.k, cfg.cap)?;
    let mut rng = eval_rng(seed, 0);
    let episode_cfg = crate::sampling::EpisodeConfig {
        k: cfg.k,
        sizes: SizeDistribution::uniform(1)?,
        batch: 0,
        spec: cfg.render,
    };
    for _ in 0..cfg.eval_episodes {
        let eb = crate::sampling::sample_episode(&split.test, &split.test_classes, &episode_cfg, &mut rng)?;
        let mut queries = Vec::with_capacity(cfg.eval_queries_per_episode);
        for _ in 0..cfg.eval_queries_per_episode {
            let t = *sets.choose(&mut rng).expect("nonempty lattice");
            let scene = render(&split.test, &eb.episode, &t, &cfg.render, &mut rng)?;
            queries.push((scene.image, t));
        }
        visit(&eb.references, &queries)?;
    }
    Ok(())
}

fn eval_union(cfg: &ExperimentConfig, split: &Split, model: &Model, seed: u64) -> Result<LabelSetReport> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    union_episodes(cfg, split, seed, |refs, queries| {
        let refs: Vec<&Image> = refs.iter().collect();
        let singles = model.embed(&refs)?;
        let table = match model.config.model {
            ModelKind::Union { .. } => build_subset_table(&singles, model.composition_head()?, &model.params, cfg.cap)?,
            _ => tradem_table(&singles, cfg.cap)?,
        };
        let imgs: Vec<&Image> = queries.iter().map(|q| &q.0).collect();
        for (e, (_, t)) in model.embed(&imgs)?.iter().zip(queries) {
            preds.push(decode_nearest_subset(e, &table, 3)?.into_iter().map(|p| p.0).collect());
            truths.push(*t);
        }
        Ok(())
    })?;
    labelset_report(&preds, &truths)
}

fn eval_mf(cfg: &ExperimentConfig, split: &Split, seed: u64) -> Result<LabelSetReport> {
    let ranking = mf_predict(&enumerate_label_sets(cfg.k, cfg.cap)?, None)?;
    let top: Vec<LabelSet> = ranking.into_iter().take(3).collect();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    union_episodes(cfg, split, seed, |_, queries| {
        for (_, t) in queries {
            preds.push(top.clone());
            truths.push(*t);
        }
        Ok(())
    })?;
    labelset_report(&preds, &truths)
}

/// Containment pairs over the test classes, or over training classes for
/// threshold calibration.
fn containment_pairs(
    cfg: &ExperimentConfig,
    split: &Split,
    seed: u64,
    validation: bool,
) -> Result<Vec<crate::sampling::QueryPair>> {
    let (store, classes, n, stream) = if validation {
        (&split.train, &split.train_classes, cfg.validation_pairs, 1)
    } else {
        (&split.test, &split.test_classes, cfg.eval_pairs, 0)
    };
    let mut rng = eval_rng(seed, stream);
    sample_query_pairs(store, classes, n, &cfg.container_sizes(), &cfg.scene_spec(), &cfg.render, &mut rng)
}

fn containment_scores(cfg: &ExperimentConfig, model: &Model, pairs: &[crate::sampling::QueryPair]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let containers: Vec<&Image> = chunk.iter().map(|p| &p.container.image).collect();
        let queries: Vec<&Image> = chunk.iter().map(|p| &p.query).collect();
        match model.config.model {
            ModelKind::Query { .. } => {
                let a = model.embed(&containers)?;
                let b = model.embed(&queries)?;
                scores.extend(model.query_head()?.apply_batch(&model.params, &a, &b)?.into_iter().map(f64::from));
            }
            ModelKind::SingletonEmbedding => {
                for p in chunk {
                    scores.push(f64::from(slidewin_score(model, &p.container.image, &p.query, cfg.slidewin_max_grid)?));
                }
            }
            _ => {
                let a = model.embed(&containers)?;
                let b = model.embed(&queries)?;
                scores.extend(a.iter().zip(&b).map(|(x, y)| f64::from(tradem_decision(x, y).1)));
            }
        }
    }
    Ok(scores)
}

fn eval_containment(cfg: &ExperimentConfig, split: &Split, model: &Model, seed: u64) -> Result<QueryReport> {
    let pairs = containment_pairs(cfg, split, seed, false)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    let scores = containment_scores(cfg, model, &pairs)?;
    match model.config.model {
        ModelKind::Query { .. } => query_report(&scores, &labels, 0.5, true),
        ModelKind::SingletonEmbedding => {
            let val = containment_pairs(cfg, split, seed, true)?;
            let val_labels: Vec<bool> = val.iter().map(|p| p.label).collect();
            let val_scores: Vec<f32> = containment_scores(cfg, model, &val)?.iter().map(|&s| s as f32).collect();
            let thr = calibrate_distance_threshold(&val_scores, &val_labels)?;
            query_report(&scores, &labels, f64::from(thr), false)
        }
        _ => query_report(&scores, &labels, f64::from(crate::baselines::TRADEM_THRESHOLD), false),
    }
}

fn eval_supervised(cfg: &ExperimentConfig, split: &Split, model: &Model, seed: u64) -> Result<QueryReport> {
    let mut rng = eval_rng(seed, 0);
    let data = TrainData {
        store: &split.test,
        classes: &split.test_classes,
    };
    let scenes = sample_supervised_scenes(data, &model.config, cfg.eval_pairs, &mut rng)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in scenes.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.0).collect();
        let probs = model.class_probabilities(&imgs)?;
        for ((_, y), p) in chunk.iter().zip(&probs) {
            for c in balanced_queries(y, &mut rng) {
                scores.push(f64::from(p[c]));
                labels.push(y[c] == 1.0);
            }
        }
    }
    query_report(&scores, &labels, 0.5, true)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_rate(rates: &[&Rate]) -> Rate {
    let mut v: Vec<f64> = rates.iter().map(|r| r.value).collect();
    let value = median(&mut v);
    let n = rates[0].n;
    Rate {
        value,
        n,
        sigma: crate::metrics::binomial_sigma(value, n),
    }
}

/// Cell-wise median of per-seed reports.
pub fn median_report(reports: &[&Report]) -> Result<Report> {
    match reports.first() {
        Some(Report::LabelSet(_)) => {
            let ls: Vec<&LabelSetReport> = reports
                .iter()
                .filter_map(|r| match r {
                    Report::LabelSet(l) => Some(l),
                    _ => None,
                })
                .collect();
            let mut by_size = BTreeMap::new();
            for size in ls[0].by_size.keys() {
                let strata: Vec<&Stratum> = ls.iter().filter_map(|r| r.by_size.get(size)).collect();
                by_size.insert(
                    *size,
                    Stratum {
                        exact: median_rate(&strata.iter().map(|s| &s.exact).collect::<Vec<_>>()),
                        top3: median_rate(&strata.iter().map(|s| &s.top3).collect::<Vec<_>>()),
                    },
                );
            }
            Ok(Report::LabelSet(LabelSetReport {
                exact: median_rate(&ls.iter().map(|r| &r.exact).collect::<Vec<_>>()),
                top3: median_rate(&ls.iter().map(|r| &r.top3).collect::<Vec<_>>()),
                set_size: median_rate(&ls.iter().map(|r| &r.set_size).collect::<Vec<_>>()),
                by_size,
            }))
        }
        Some(Report::Query(_)) => {
            let qs: Vec<&QueryReport> = reports
                .iter()
                .filter_map(|r| match r {
                    Report::Query(q) => Some(q),
                    _ => None,
                })
                .collect();
            let mut aucs: Vec<f64> = qs.iter().map(|q| q.auc).collect();
            let mut thr: Vec<f64> = qs.iter().map(|q| q.threshold).collect();
            Ok(Report::Query(QueryReport {
                accuracy: median_rate(&qs.iter().map(|q| &q.accuracy).collect::<Vec<_>>()),
                auc: median(&mut aucs),
                threshold: median(&mut thr),
            }))
        }
        None => Err(Error::InvalidArgument("no reports to combine".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Median over seeds.
    pub median: Report,
    pub per_seed: Vec<(u64, Report)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

pub fn summarize(cfg: &ExperimentConfig, records: &[MetricRecord]) -> Result<Summary> {
    let hash = cfg.hash();
    let mut methods_out = Vec::new();
    for name in methods(cfg) {
        let mine: Vec<&MetricRecord> = records.iter().filter(|r| r.method == name).collect();
        if mine.is_empty() {
            return Err(Error::InvalidState(format!("no metrics recorded for {name}")));
        }
        if let Some(r) = mine.iter().find(|r| r.config_hash != hash) {
            return Err(Error::InvalidState(format!(
                "metrics for {name} come from config {}, not {hash}",
                r.config_hash
            )));
        }
        let reports: Vec<&Report> = mine.iter().map(|r| &r.report).collect();
        methods_out.push(MethodSummary {
            method: name,
            median: median_report(&reports)?,
            per_seed: mine.iter().map(|r| (r.seed, r.report.clone())).collect(),
        });
    }
    Ok(Summary {
        experiment: cfg.experiment.name().into(),
        config_hash: hash,
        seed: cfg.seed,
        seeds: cfg.seed_list(),
        methods: methods_out,
    })
}

/// CSV of medians in the experiment's table layout.
pub fn table_csv(summary: &Summary) -> String {
    let mut ls = Vec::new();
    let mut qs = Vec::new();
    for m in &summary.methods {
        match &m.median {
            Report::LabelSet(r) => ls.push((m.method.clone(), r.clone())),
            Report::Query(r) => qs.push((m.method.clone(), r.clone())),
        }
    }
    let body = if ls.is_empty() { query_table_csv(&qs) } else { labelset_table_csv(&ls) };
    format!(
        "# {} config {} seed {}\n{body}",
        summary.experiment, summary.config_hash, summary.seed
    )
}

/// Trains, evaluates and summarizes in memory.
pub fn run(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<Summary> {
    let store = load_data(cfg)?;
    let sp = split(cfg, &store)?;
    let models = train_all(cfg, &sp, None, progress)?;
    let records = evaluate(cfg, &sp, &models, progress)?;
    summarize(cfg, &records)
}

/// One rendering of every label set over a `k`-class test episode, in
/// canonical order, with the label set in the file name.
pub fn render_preview(cfg: &ExperimentConfig, store: &GlyphStore, dir: &Path) -> Result<Vec<(PathBuf, LabelSet)>> {
    let sp = split(cfg, store)?;
    let k = cfg.k.min(sp.test_classes.len());
    let cap = match cfg.experiment {
        ExperimentTag::Exp1Union => cfg.cap,
        ExperimentTag::Exp2Containment => cfg.container_max,
        ExperimentTag::Exp3Scene => cfg.container_max,
        ExperimentTag::Exp4Supervised => cfg.scene_max,
    }
    .min(k);
    let mut rng = eval_rng(cfg.seed, 9);
    let episode = Episode::new(sp.test_classes[..k].to_vec(), vec![0; k])?;
    fs::create_dir_all(dir)?;
    let spec = cfg.scene_spec();
    let mut out = Vec::new();
    for (i, t) in enumerate_label_sets(k, cap)?.into_iter().enumerate() {
        let scene = render(&sp.test, &episode, &t, &spec, &mut rng)?;
        let tag: Vec<String> = t.canonical_elements().iter().map(usize::to_string).collect();
        let path = dir.join(format!("{i:02}_{}.png", tag.join("-")));
        scene.image.save_png(&path)?;
        out.push((path, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tag: ExperimentTag) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(tag);
        c.data = DataSource::Synthetic {
            classes: 30,
            exemplars: 6,
            seed: 1,
        };
        c.train_classes = 20;
        c.fixed_classes = 6;
        c.train_exemplars = 4;
        c.backbone = Backbone::SmallCnn { widths: [4, 4, 8, 8] };
        c.embed_dim = 8;
        c.feature_dim = 16;
        c.label_dim = 8;
        c.head_hidden = 8;
        c.steps = 3;
        c.batch = 4;
        c.eval_episodes = 2;
        c.eval_queries_per_episode = 5;
        c.eval_pairs = 8;
        c.validation_pairs = 4;
        c.seeds = 2;
        c.log_every = 1;
        c.g_variants = vec![GVariant::Lin];
        c.h_variants = vec![HVariant::Dnn];
        c.scene_max = 3;
        c.container_max = 3;
        c
    }

    #[test]
    fn parse_defaults_and_overrides() {
        let c = ExperimentConfig::parse("experiment = exp1_union\n# comment\nsteps = 50 # trailing\ng_variants = Lin, DNN\nwidths = 8,16,32,32\n").unwrap();
        assert_eq!(c.experiment, ExperimentTag::Exp1Union);
        assert_eq!(c.steps, 50);
        assert_eq!(c.g_variants, vec![GVariant::Lin, GVariant::Dnn]);
        assert_eq!(c.backbone, Backbone::SmallCnn { widths: [8, 16, 32, 32] });
        assert_eq!(c.models().len(), 3);
        assert_eq!(methods(&c), ["Lin", "DNN", "TradEm", "MF"]);
    }

    #[test]
    fn parse_rejects_bad_input() {
        for text in [
            "steps = 5",
            "experiment = exp9",
            "experiment = exp1_union\nbogus = 1",
            "experiment = exp1_union\nsteps = many",
            "experiment = exp1_union\nsteps = 1\nsteps = 2",
            "experiment = exp1_union\ng_variants = ",
            "experiment = exp1_union\ng_variants = Lin,Foo",
            "experiment = exp1_union\nwidths = 1,2",
            "experiment = exp2_containment\ndata = /no/such/dir",
            "experiment = exp1_union\ncap = 9",
            "experiment = exp1_union\nno equals sign",
            "experiment = exp3_scene\nlayout = overlay",
            "experiment = exp4_supervised\nlayout = grid\nscene_max = 5",
            "experiment = exp4_supervised\nlayout = diagonal",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_directory() {
        let mut a = ExperimentConfig::new(ExperimentTag::Exp2Containment);
        let h = a.hash();
        a.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), h);
        a.steps += 1;
        assert_ne!(a.hash(), h);
        assert_eq!(h.len(), 64);
    }

    #[test]
    fn every_experiment_runs_end_to_end() {
        for tag in [
            ExperimentTag::Exp1Union,
            ExperimentTag::Exp2Containment,
            ExperimentTag::Exp3Scene,
            ExperimentTag::Exp4Supervised,
        ] {
            let cfg = tiny(tag);
            let s = run(&cfg, &mut |_| {}).unwrap();
            assert_eq!(s.methods.len(), methods(&cfg).len());
            for m in &s.methods {
                assert_eq!(m.per_seed.len(), 2);
            }
            let again = run(&cfg, &mut |_| {}).unwrap();
            assert_eq!(serde_json::to_string(&s).unwrap(), serde_json::to_string(&again).unwrap());
            let csv = table_csv(&s);
            assert!(csv.lines().nth(1).unwrap().ends_with(&methods(&cfg).join(",")));
        }
    }

    #[test]
    fn split_by_exemplar_for_supervised() {
        let cfg = tiny(ExperimentTag::Exp4Supervised);
        let store = load_data(&cfg).unwrap();
        let sp = split(&cfg, &store).unwrap();
        assert_eq!(sp.train.n_classes(), 6);
        assert_eq!(sp.train.exemplars(0).len(), 4);
        assert_eq!(sp.test.exemplars(0).len(), 2);
        assert_eq!(sp.test.exemplars(3)[0], store.exemplars(3)[4]);
        let cfg = tiny(ExperimentTag::Exp1Union);
        let sp = split(&cfg, &store).unwrap();
        assert_eq!(sp.test_classes, (20..30).collect::<Vec<_>>());
    }

    #[test]
    fn preview_covers_the_lattice() {
        let cfg = tiny(ExperimentTag::Exp1Union);
        let dir = tempfile::tempdir().unwrap();
        let store = load_data(&cfg).unwrap();
        let files = render_preview(&cfg, &store, dir.path()).unwrap();
        assert_eq!(files.len(), 25);
        assert!(files.iter().all(|(p, _)| p.exists()));
        assert!(files[5].0.ends_with("05_0-1.png"));
    }
}
