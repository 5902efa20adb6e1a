//! Network building blocks: the image encoder `f`, the symmetric layer,
//! composition heads `g`, query heads `h`, the label embedder and the
//! supervised query head, plus the independent-sigmoid multilabel head.
//!
//! Every block registers its parameters under a name prefix in a
//! [`ParamStore`] and builds its forward pass on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::params::{add_batch_norm, add_conv, add_linear};
use crate::nn::{Graph, NodeId, ParamStore, Real, Tensor};
use crate::render::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    /// Four `Conv3x3 -> BN -> ReLU -> MaxPool2` blocks with the given widths.
    SmallCnn { widths: [usize; 4] },
    /// ResNet-18 with one input channel.
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding dimension.
    pub m: usize,
    pub backbone: Backbone,
    /// Side length of the square input image.
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            m: 32,
            backbone: Backbone::SmallCnn {
                widths: [16, 32, 32, 32],
            },
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return invalid_arg(format!("embedding dimension {} < 2", self.m));
        }
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return invalid_arg(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            ));
        }
        if let Backbone::SmallCnn { widths } = &self.backbone {
            if widths.contains(&0) {
                return invalid_arg("convolution widths must be positive");
            }
        }
        Ok(())
    }
}

/// The image embedding `f`: backbone, `FC(m)`, then L2 normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
}

const RESNET_STAGES: [usize; 4] = [64, 128, 256, 512];

impl Encoder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        config: EncoderConfig,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let p = prefix;
        match &config.backbone {
            Backbone::SmallCnn { widths } => {
                let mut cin = 1;
                for (i, &w) in widths.iter().enumerate() {
                    add_conv(store, rng, &format!("{p}.conv{i}"), cin, w, 3, false);
                    add_batch_norm(store, &format!("{p}.bn{i}"), w);
                    cin = w;
                }
                let side = config.input_size / 16;
                add_linear(store, rng, &format!("{p}.fc"), cin * side * side, config.m, true);
            }
            Backbone::Resnet18 => {
                add_conv(store, rng, &format!("{p}.stem"), 1, 64, 7, false);
                add_batch_norm(store, &format!("{p}.stem_bn"), 64);
                let mut cin = 64;
                for (s, &w) in RESNET_STAGES.iter().enumerate() {
                    for blk in 0..2 {
                        let b = format!("{p}.layer{s}.{blk}");
                        let block_in = if blk == 0 { cin } else { w };
                        add_conv(store, rng, &format!("{b}.conv1"), block_in, w, 3, false);
                        add_batch_norm(store, &format!("{b}.bn1"), w);
                        add_conv(store, rng, &format!("{b}.conv2"), w, w, 3, false);
                        add_batch_norm(store, &format!("{b}.bn2"), w);
                        if blk == 0 && (s > 0 || block_in != w) {
                            add_conv(store, rng, &format!("{b}.down"), block_in, w, 1, false);
                            add_batch_norm(store, &format!("{b}.down_bn"), w);
                        }
                    }
                    cin = w;
                }
                add_linear(store, rng, &format!("{p}.fc"), cin, config.m, true);
            }
        }
        Ok(Self {
            config,
            prefix: prefix.to_string(),
        })
    }

    /// `[N, 1, S, S]` images to `[N, m]` unit-norm embeddings.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let p = &self.prefix;
        let mut h = x;
        match &self.config.backbone {
            Backbone::SmallCnn { .. } => {
                for i in 0..4 {
                    h = g.conv(store, &format!("{p}.conv{i}"), h);
                    h = g.batch_norm(store, &format!("{p}.bn{i}"), h);
                    h = g.relu(h);
                    h = g.max_pool2(h);
                }
                h = g.flatten(h);
            }
            Backbone::Resnet18 => {
                h = g.conv_with(store, &format!("{p}.stem"), h, 2, 3);
                h = g.batch_norm(store, &format!("{p}.stem_bn"), h);
                h = g.relu(h);
                h = g.max_pool2(h);
                for s in 0..RESNET_STAGES.len() {
                    for blk in 0..2 {
                        let b = format!("{p}.layer{s}.{blk}");
                        let stride = if blk == 0 && s > 0 { 2 } else { 1 };
                        let mut y = g.conv_with(store, &format!("{b}.conv1"), h, stride, 1);
                        y = g.batch_norm(store, &format!("{b}.bn1"), y);
                        y = g.relu(y);
                        y = g.conv_with(store, &format!("{b}.conv2"), y, 1, 1);
                        y = g.batch_norm(store, &format!("{b}.bn2"), y);
                        let shortcut = if store.contains(&format!("{b}.down.w")) {
                            let d = g.conv_with(store, &format!("{b}.down"), h, stride, 0);
                            g.batch_norm(store, &format!("{b}.down_bn"), d)
                        } else {
                            h
                        };
                        let sum = g.add(y, shortcut);
                        h = g.relu(sum);
                    }
                }
                h = g.global_avg_pool(h);
            }
        }
        let y = g.dense(store, &format!("{p}.fc"), h);
        g.l2_normalize(y)
    }

    /// Packs images into a `[N, 1, S, S]` tensor, rejecting wrong sizes.
    pub fn batch<F: Real>(&self, images: &[&Image]) -> Result<Tensor<F>> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.height != s || img.width != s {
                return invalid_arg(format!(
                    "encoder expects {s}x{s} images, got {}x{}",
                    img.height, img.width
                ));
            }
            data.extend(img.pixels.iter().map(|&p| F::from_f64_lossy(f64::from(p))));
        }
        Ok(Tensor::new(vec![images.len(), 1, s, s], data))
    }

    /// Eval-mode embeddings, one row per image, in input order.
    pub fn encode(&self, store: &ParamStore<f32>, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let x = self.batch::<f32>(chunk)?;
            let mut g = Graph::new(false);
            let xi = g.input(x);
            let e = self.forward(&mut g, store, xi);
            out.extend(g.value(e).to_rows());
        }
        Ok(out)
    }

    pub fn encode_one(&self, store: &ParamStore<f32>, image: &Image) -> Result<Vec<f32>> {
        Ok(self.encode(store, &[image])?.remove(0))
    }
}

/// `W1 a + W1 b + W2 (a * b)`: symmetric in its two arguments.
pub fn symm_layer<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    name: &str,
    a: NodeId,
    b: NodeId,
) -> NodeId {
    let w1 = g.param(store, &format!("{name}.w1"));
    let w2 = g.param(store, &format!("{name}.w2"));
    let sum = g.add(a, b);
    let prod = g.mul(a, b);
    let lin = g.linear(sum, w1, None);
    let bil = g.linear(prod, w2, None);
    g.add(lin, bil)
}

/// `Symm(a, b)` for single vectors with explicit weight matrices
/// `w1, w2: [out, n]`.
pub fn symm(a: &[f32], b: &[f32], w1: &Tensor<f32>, w2: &Tensor<f32>) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return invalid_arg(format!("symm inputs of length {} and {}", a.len(), b.len()));
    }
    for w in [w1, w2] {
        if w.shape.len() != 2 || w.shape[1] != a.len() || w.shape[0] != w1.shape[0] {
            return invalid_arg(format!("symm weight shape {:?} vs input {}", w.shape, a.len()));
        }
    }
    let mut store = ParamStore::new();
    store.insert_param("s.w1", w1.clone());
    store.insert_param("s.w2", w2.clone());
    let mut g = Graph::new(false);
    let ai = g.input(Tensor::new(vec![1, a.len()], a.to_vec()));
    let bi = g.input(Tensor::new(vec![1, b.len()], b.to_vec()));
    let y = symm_layer(&mut g, &store, "s", ai, bi);
    Ok(g.value(y).data.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GVariant {
    Mean,
    Lin,
    LinFc,
    Dnn,
}

impl GVariant {
    pub const ALL: [GVariant; 4] = [GVariant::Mean, GVariant::Lin, GVariant::LinFc, GVariant::Dnn];

    pub fn name(&self) -> &'static str {
        match self {
            GVariant::Mean => "Mean",
            GVariant::Lin => "Lin",
            GVariant::LinFc => "LinFC",
            GVariant::Dnn => "DNN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(GVariant::Mean),
            "lin" => Ok(GVariant::Lin),
            "linfc" | "lin+fc" => Ok(GVariant::LinFc),
            "dnn" => Ok(GVariant::Dnn),
            _ => invalid_arg(format!("unknown g variant `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HVariant {
    Lin,
    LinFc,
    Dnn,
}

impl HVariant {
    pub const ALL: [HVariant; 3] = [HVariant::Lin, HVariant::LinFc, HVariant::Dnn];

    pub fn name(&self) -> &'static str {
        match self {
            HVariant::Lin => "Lin",
            HVariant::LinFc => "LinFC",
            HVariant::Dnn => "DNN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lin" => Ok(HVariant::Lin),
            "linfc" | "lin+fc" => Ok(HVariant::LinFc),
            "dnn" => Ok(HVariant::Dnn),
            _ => invalid_arg(format!("unknown h variant `{s}`")),
        }
    }
}

/// Composition head `g`: maps the embeddings of two label sets to the
/// embedding of their union. Symmetric in its arguments by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionHead {
    pub variant: GVariant,
    pub m: usize,
    pub hidden: usize,
    pub prefix: String,
}

impl CompositionHead {
    pub fn new<F: Real, R: Rng + ?Sized>(
        variant: GVariant,
        m: usize,
        hidden: usize,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let head = Self {
            variant,
            m,
            hidden,
            prefix: prefix.to_string(),
        };
        let p = prefix;
        match variant {
            GVariant::Mean => {}
            GVariant::Lin => add_symm(store, rng, &format!("{p}.symm"), m, m),
            GVariant::LinFc | GVariant::Dnn => {
                add_symm(store, rng, &format!("{p}.symm"), m, hidden);
                for i in 0..head.fc_layers() {
                    add_batch_norm(store, &format!("{p}.bn{i}"), hidden);
                    let out = if i + 1 == head.fc_layers() { m } else { hidden };
                    add_linear(store, rng, &format!("{p}.fc{i}"), hidden, out, true);
                }
            }
        }
        head
    }

    fn fc_layers(&self) -> usize {
        match self.variant {
            GVariant::Mean | GVariant::Lin => 0,
            GVariant::LinFc => 1,
            GVariant::Dnn => 3,
        }
    }

    /// Batched `g(a, b)` on `[N, m]` inputs.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        a: NodeId,
        b: NodeId,
    ) -> NodeId {
        let p = &self.prefix;
        let h = match self.variant {
            GVariant::Mean => {
                let s = g.add(a, b);
                g.scale(s, F::from_f64_lossy(0.5))
            }
            _ => {
                let mut h = symm_layer(g, store, &format!("{p}.symm"), a, b);
                for i in 0..self.fc_layers() {
                    h = g.batch_norm(store, &format!("{p}.bn{i}"), h);
                    h = g.relu(h);
                    h = g.dense(store, &format!("{p}.fc{i}"), h);
                }
                h
            }
        };
        g.l2_normalize(h)
    }

    /// Eval-mode `g(a, b)` on single embeddings.
    pub fn apply(&self, store: &ParamStore<f32>, a: &[f32], b: &[f32]) -> Result<Vec<f32>> {
        check_pair(a, b, self.m)?;
        let mut g = Graph::new(false);
        let ai = g.input(Tensor::new(vec![1, self.m], a.to_vec()));
        let bi = g.input(Tensor::new(vec![1, self.m], b.to_vec()));
        let y = self.forward(&mut g, store, ai, bi);
        Ok(g.value(y).data.clone())
    }
}

fn add_symm<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    name: &str,
    inputs: usize,
    outputs: usize,
) {
    use crate::nn::params::uniform_fan_in;
    store.insert_param(
        format!("{name}.w1"),
        uniform_fan_in(rng, vec![outputs, inputs], inputs),
    );
    store.insert_param(
        format!("{name}.w2"),
        uniform_fan_in(rng, vec![outputs, inputs], inputs),
    );
}

fn check_pair(a: &[f32], b: &[f32], m: usize) -> Result<()> {
    if a.len() != m || b.len() != m {
        return invalid_arg(format!(
            "expected two {m}-dimensional inputs, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    Ok(())
}

/// Query head `h(container, query)`: probability that the label set behind
/// `query` is contained in the one behind `container`. The first layer is
/// the asymmetric `W1 a + W2 b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHead {
    pub variant: HVariant,
    pub m: usize,
    pub hidden: usize,
    pub prefix: String,
}

impl QueryHead {
    pub fn new<F: Real, R: Rng + ?Sized>(
        variant: HVariant,
        m: usize,
        hidden: usize,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let head = Self {
            variant,
            m,
            hidden,
            prefix: prefix.to_string(),
        };
        let p = prefix;
        add_linear(store, rng, &format!("{p}.wa"), m, hidden, false);
        add_linear(store, rng, &format!("{p}.wb"), m, hidden, false);
        for i in 0..head.bn_stages() {
            add_batch_norm(store, &format!("{p}.bn{i}"), hidden);
            if i + 1 < head.bn_stages() {
                add_linear(store, rng, &format!("{p}.fc{i}"), hidden, hidden, true);
            }
        }
        add_linear(store, rng, &format!("{p}.out"), hidden, 1, true);
        head
    }

    fn bn_stages(&self) -> usize {
        match self.variant {
            HVariant::Lin => 0,
            HVariant::LinFc => 1,
            HVariant::Dnn => 3,
        }
    }

    /// Batched probabilities `[N, 1]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        container: NodeId,
        query: NodeId,
    ) -> NodeId {
        let p = &self.prefix;
        let ha = g.dense(store, &format!("{p}.wa"), container);
        let hb = g.dense(store, &format!("{p}.wb"), query);
        let mut h = g.add(ha, hb);
        let stages = self.bn_stages();
        for i in 0..stages {
            h = g.batch_norm(store, &format!("{p}.bn{i}"), h);
            h = g.relu(h);
            if i + 1 < stages {
                h = g.dense(store, &format!("{p}.fc{i}"), h);
            }
        }
        let logit = g.dense(store, &format!("{p}.out"), h);
        g.sigmoid(logit)
    }

    /// Eval-mode `h(container, query)` for single embeddings.
    pub fn apply(&self, store: &ParamStore<f32>, container: &[f32], query: &[f32]) -> Result<f32> {
        check_pair(container, query, self.m)?;
        let mut g = Graph::new(false);
        let a = g.input(Tensor::new(vec![1, self.m], container.to_vec()));
        let b = g.input(Tensor::new(vec![1, self.m], query.to_vec()));
        let y = self.forward(&mut g, store, a, b);
        Ok(g.value(y).data[0])
    }

    /// Eval-mode probabilities for aligned batches of embeddings.
    pub fn apply_batch(
        &self,
        store: &ParamStore<f32>,
        containers: &[Vec<f32>],
        queries: &[Vec<f32>],
    ) -> Result<Vec<f32>> {
        if containers.len() != queries.len() {
            return invalid_arg("container and query batches differ in length");
        }
        if containers.is_empty() {
            return Ok(Vec::new());
        }
        for (a, b) in containers.iter().zip(queries) {
            check_pair(a, b, self.m)?;
        }
        let mut g = Graph::new(false);
        let a = g.input(Tensor::from_rows(containers));
        let b = g.input(Tensor::from_rows(queries));
        let y = self.forward(&mut g, store, a, b);
        Ok(g.value(y).data.clone())
    }
}

/// `f_label`: a linear map from one-hot class indicators to embeddings,
/// stored as the `[n_classes, dim]` matrix `prefix.emb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedder {
    pub n_classes: usize,
    pub dim: usize,
    pub prefix: String,
}

impl LabelEmbedder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        n_classes: usize,
        dim: usize,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        store.insert_param(
            format!("{prefix}.emb"),
            crate::nn::params::uniform_fan_in(rng, vec![n_classes, dim], n_classes),
        );
        Self {
            n_classes,
            dim,
            prefix: prefix.to_string(),
        }
    }

    /// Embeddings of the given class indices, `[N, dim]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, classes: &[usize]) -> NodeId {
        let e = g.param(store, &format!("{}.emb", self.prefix));
        g.gather_rows(e, classes)
    }

    /// Embedding of a one-hot vector.
    pub fn embed_one_hot(&self, store: &ParamStore<f32>, one_hot: &[f32]) -> Result<Vec<f32>> {
        if one_hot.len() != self.n_classes {
            return invalid_arg(format!(
                "one-hot of length {} for {} classes",
                one_hot.len(),
                self.n_classes
            ));
        }
        let ones: Vec<usize> = (0..one_hot.len()).filter(|&i| one_hot[i] == 1.0).collect();
        let zeros = one_hot.iter().filter(|&&v| v == 0.0).count();
        if ones.len() != 1 || zeros != one_hot.len() - 1 {
            return invalid_arg("label vector is not one-hot");
        }
        Ok(store.expect(&format!("{}.emb", self.prefix)).row(ones[0]).to_vec())
    }
}

/// Fully connected `Linear -> BN -> ReLU` chain ending in a sigmoid layer.
/// `widths` lists the fan-in of each linear layer; `outputs` is the width of
/// the final sigmoid layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidMlp {
    pub widths: Vec<usize>,
    pub outputs: usize,
    pub prefix: String,
}

impl SigmoidMlp {
    pub fn new<F: Real, R: Rng + ?Sized>(
        widths: Vec<usize>,
        outputs: usize,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        for i in 0..widths.len() {
            let out = widths.get(i + 1).copied().unwrap_or(outputs);
            add_linear(store, rng, &format!("{prefix}.fc{i}"), widths[i], out, true);
            if i + 1 < widths.len() {
                add_batch_norm(store, &format!("{prefix}.bn{i}"), out);
            }
        }
        Self {
            widths,
            outputs,
            prefix: prefix.to_string(),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let p = &self.prefix;
        let mut h = x;
        for i in 0..self.widths.len() {
            h = g.dense(store, &format!("{p}.fc{i}"), h);
            if i + 1 < self.widths.len() {
                h = g.batch_norm(store, &format!("{p}.bn{i}"), h);
                h = g.relu(h);
            }
        }
        g.sigmoid(h)
    }
}

/// Shape of the supervised query model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model3Config {
    pub image_dim: usize,
    pub label_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
}

impl Default for Model3Config {
    fn default() -> Self {
        Self {
            image_dim: 128,
            label_dim: 32,
            hidden: vec![136, 136],
            n_classes: 80,
        }
    }
}

/// The supervised query model's `h`: concatenated image and label
/// embeddings to the probability that the image contains the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model3Head {
    pub config: Model3Config,
    pub mlp: SigmoidMlp,
}

impl Model3Head {
    pub fn new<F: Real, R: Rng + ?Sized>(
        config: Model3Config,
        prefix: &str,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![config.image_dim + config.label_dim];
        widths.extend(&config.hidden);
        let mlp = SigmoidMlp::new(widths, 1, prefix, store, rng);
        Self { config, mlp }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        image_emb: NodeId,
        label_emb: NodeId,
    ) -> NodeId {
        let x = g.concat_cols(&[image_emb, label_emb]);
        self.mlp.forward(g, store, x)
    }

    /// Eval-mode probability for one image/label embedding pair.
    pub fn apply(&self, store: &ParamStore<f32>, image_emb: &[f32], label_emb: &[f32]) -> Result<f32> {
        if image_emb.len() != self.config.image_dim || label_emb.len() != self.config.label_dim {
            return invalid_arg(format!(
                "expected embeddings of {} and {}, got {} and {}",
                self.config.image_dim,
                self.config.label_dim,
                image_emb.len(),
                label_emb.len()
            ));
        }
        let mut g = Graph::new(false);
        let a = g.input(Tensor::new(vec![1, image_emb.len()], image_emb.to_vec()));
        let b = g.input(Tensor::new(vec![1, label_emb.len()], label_emb.to_vec()));
        let y = self.forward(&mut g, store, a, b);
        Ok(g.value(y).data[0])
    }
}

/// Independent-sigmoid multilabel head over a 128-d image feature:
/// one probability per class.
pub fn multilabel_head<F: Real, R: Rng + ?Sized>(
    feature_dim: usize,
    n_classes: usize,
    prefix: &str,
    store: &mut ParamStore<F>,
    rng: &mut R,
) -> SigmoidMlp {
    SigmoidMlp::new(vec![feature_dim; 3], n_classes, prefix, store, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{relative_error, relative_error_f32};
    use crate::nn::tensor::{l2_norm, normalized};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_rows<F: Real>(r: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor<F> {
        let rows: Vec<Vec<F>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
                normalized(&v).into_iter().map(F::from_f64_lossy).collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    fn small_encoder(store: &mut ParamStore<f32>) -> Encoder {
        let cfg = EncoderConfig {
            m: 8,
            backbone: Backbone::SmallCnn { widths: [4, 4, 4, 4] },
            input_size: 32,
        };
        Encoder::new(cfg, "f", store, &mut rng(1)).unwrap()
    }

    fn noise_image(seed: u64, s: usize) -> Image {
        let mut r = rng(seed);
        Image::new(s, s, (0..s * s).map(|_| r.gen::<f32>()).collect())
    }

    #[test]
    fn encoder_outputs_unit_norm_and_is_deterministic() {
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store);
        let imgs: Vec<Image> = (0..3).map(|i| noise_image(i, 32)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let a = enc.encode(&store, &refs).unwrap();
        let b = enc.encode(&store, &refs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for v in &a {
            assert_eq!(v.len(), 8);
            assert!((l2_norm(v) - 1.0).abs() < 1e-5);
        }
        // batch rows align with single-image calls
        let single = enc.encode_one(&store, &imgs[1]).unwrap();
        for (x, y) in single.iter().zip(&a[1]) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(enc.encode_one(&store, &noise_image(0, 64)).is_err());
    }

    #[test]
    fn encoder_config_validation() {
        let mut store = ParamStore::<f32>::new();
        let bad = EncoderConfig {
            m: 1,
            ..EncoderConfig::default()
        };
        assert!(Encoder::new(bad, "f", &mut store, &mut rng(0)).is_err());
        let bad = EncoderConfig {
            input_size: 60,
            ..EncoderConfig::default()
        };
        assert!(Encoder::new(bad, "f", &mut store, &mut rng(0)).is_err());
    }

    #[test]
    fn resnet18_forward_shape() {
        let mut store = ParamStore::<f32>::new();
        let cfg = EncoderConfig {
            m: 32,
            backbone: Backbone::Resnet18,
            input_size: 64,
        };
        let enc = Encoder::new(cfg, "f", &mut store, &mut rng(2)).unwrap();
        // 11M-parameter network with 1 input channel and a 32-d output
        let n = store.count_trainable("f.");
        assert!((11_000_000..11_300_000).contains(&n), "{n}");
        let img = noise_image(3, 64);
        let e = enc.encode_one(&store, &img).unwrap();
        assert_eq!(e.len(), 32);
        assert!((l2_norm(&e) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn symm_examples() {
        let mut r = rng(4);
        let a: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w1 = Tensor::new(vec![3, 4], (0..12).map(|_| r.gen_range(-1.0..1.0)).collect());
        let w2 = Tensor::new(vec![3, 4], (0..12).map(|_| r.gen_range(-1.0..1.0)).collect());
        assert_eq!(symm(&a, &b, &w1, &w2).unwrap(), symm(&b, &a, &w1, &w2).unwrap());

        let eye = Tensor::new(
            vec![4, 4],
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        let zero = Tensor::zeros(vec![4, 4]);
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let prod: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        assert_eq!(symm(&a, &b, &eye, &zero).unwrap(), sum);
        assert_eq!(symm(&a, &b, &zero, &eye).unwrap(), prod);
        assert!(symm(&a, &b[..3], &eye, &zero).is_err());
        assert!(symm(&a, &b, &w1, &eye).is_err());
    }

    #[test]
    fn mean_head_examples() {
        let mut store = ParamStore::<f32>::new();
        let g = CompositionHead::new(GVariant::Mean, 3, 3, "g", &mut store, &mut rng(0));
        let v = normalized(&[0.3f32, -0.2, 0.9]);
        let out = g.apply(&store, &v, &v).unwrap();
        for (x, y) in out.iter().zip(&v) {
            assert!((x - y).abs() < 1e-6);
        }
        let e1 = [1.0f32, 0.0, 0.0];
        let e2 = [0.0f32, 1.0, 0.0];
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let out = g.apply(&store, &e1, &e2).unwrap();
        assert!((out[0] - h).abs() < 1e-6 && (out[1] - h).abs() < 1e-6 && out[2] == 0.0);
        assert!(g.apply(&store, &e1, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn lin_head_with_identity_weights_is_mean() {
        let mut store = ParamStore::<f32>::new();
        let g = CompositionHead::new(GVariant::Lin, 3, 3, "g", &mut store, &mut rng(0));
        let eye = Tensor::new(
            vec![3, 3],
            (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        *store.get_mut("g.symm.w1").unwrap() = eye;
        *store.get_mut("g.symm.w2").unwrap() = Tensor::zeros(vec![3, 3]);
        let out = g.apply(&store, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-6 && (out[1] - h).abs() < 1e-6);
    }

    #[test]
    fn g_heads_are_symmetric_and_unit_norm() {
        for variant in GVariant::ALL {
            let mut store = ParamStore::<f32>::new();
            let mut r = rng(7);
            let head = CompositionHead::new(variant, 8, 8, "g", &mut store, &mut r);
            let a = unit_rows::<f32>(&mut r, 50, 8);
            let b = unit_rows::<f32>(&mut r, 50, 8);
            for train in [false, true] {
                let mut g = Graph::new(train);
                let (ai, bi) = (g.input(a.clone()), g.input(b.clone()));
                let ab = head.forward(&mut g, &store, ai, bi);
                let ba = head.forward(&mut g, &store, bi, ai);
                assert_eq!(g.value(ab), g.value(ba), "{variant:?} train={train}");
                for row in g.value(ab).to_rows() {
                    assert!((l2_norm(&row) - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn h_head_range_and_asymmetry() {
        let mut r = rng(9);
        for variant in HVariant::ALL {
            let mut store = ParamStore::<f32>::new();
            let head = QueryHead::new(variant, 6, 8, "h", &mut store, &mut r);
            let a = unit_rows::<f32>(&mut r, 20, 6);
            let b = unit_rows::<f32>(&mut r, 20, 6);
            let p = head.apply_batch(&store, &a.to_rows(), &b.to_rows()).unwrap();
            let q = head.apply_batch(&store, &b.to_rows(), &a.to_rows()).unwrap();
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-6), "{variant:?}");
        }
        let mut store = ParamStore::<f32>::new();
        let head = QueryHead::new(HVariant::Dnn, 4, 4, "h", &mut store, &mut r);
        for name in store.trainable_names() {
            if name.contains(".bn") {
                continue;
            }
            let t = store.get_mut(&name).unwrap();
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let p = head.apply(&store, &[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn label_embedder_selects_rows() {
        let mut store = ParamStore::<f32>::new();
        let emb = LabelEmbedder::new(5, 32, "label", &mut store, &mut rng(3));
        let mut one_hot = vec![0.0; 5];
        one_hot[2] = 1.0;
        let v = emb.embed_one_hot(&store, &one_hot).unwrap();
        assert_eq!(v.len(), 32);
        assert_eq!(v.as_slice(), store.expect("label.emb").row(2));
        one_hot[3] = 1.0;
        assert!(emb.embed_one_hot(&store, &one_hot).is_err());
        assert!(emb.embed_one_hot(&store, &[0.0; 5]).is_err());
        assert_ne!(store.expect("label.emb").row(0), store.expect("label.emb").row(1));
    }

    #[test]
    fn model3_head_shape_and_sensitivity() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(5);
        let cfg = Model3Config {
            n_classes: 20,
            ..Model3Config::default()
        };
        let head = Model3Head::new(cfg.clone(), "m3", &mut store, &mut r);
        assert_eq!(head.mlp.widths[0], 160);
        let img = unit_rows::<f32>(&mut r, 1, 128).data;
        let l1 = unit_rows::<f32>(&mut r, 1, 32).data;
        let l2 = unit_rows::<f32>(&mut r, 1, 32).data;
        let p1 = head.apply(&store, &img, &l1).unwrap();
        let p2 = head.apply(&store, &img, &l2).unwrap();
        assert!(p1 > 0.0 && p1 < 1.0);
        assert_ne!(p1, p2);
        assert!(head.apply(&store, &img[..100], &l1).is_err());
    }

    #[test]
    fn multilabel_head_matches_model3_parameter_budget() {
        let mut r = rng(21);
        let mut m3 = ParamStore::<f32>::new();
        let cfg = Model3Config::default();
        Model3Head::new(cfg.clone(), "m3", &mut m3, &mut r);
        LabelEmbedder::new(cfg.n_classes, cfg.label_dim, "label", &mut m3, &mut r);
        let mut ml = ParamStore::<f32>::new();
        let head = multilabel_head(128, cfg.n_classes, "ml", &mut ml, &mut r);
        let (a, b) = (m3.count_trainable("") as f64, ml.count_trainable("") as f64);
        assert_eq!(a, 43769.0);
        assert_eq!(b, 43856.0);
        assert!((a - b).abs() / a <= 0.05);

        let x = unit_rows::<f32>(&mut r, 3, 128);
        let mut g = Graph::new(false);
        let xi = g.input(x);
        let p = head.forward(&mut g, &ml, xi);
        assert_eq!(g.shape(p), &[3, 80]);
        assert!(g.value(p).data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    fn g_case<F: Real>(head: &CompositionHead, t: &Tensor<f64>, g: &mut Graph<F>, s: &ParamStore<F>) -> NodeId {
        let (a, b) = (g.param(s, "a"), g.param(s, "b"));
        let y = head.forward(g, s, a, b);
        let ti = g.input(t.cast());
        let d = g.sub(y, ti);
        let n = g.row_norm(d);
        g.sum(n)
    }

    fn h_case<F: Real>(head: &QueryHead, g: &mut Graph<F>, s: &ParamStore<F>) -> NodeId {
        let labels: Vec<F> = (0..6).map(|i| F::from_usize(i % 2).unwrap()).collect();
        let ones = vec![F::one(); 6];
        let (a, b) = (g.param(s, "a"), g.param(s, "b"));
        let p = head.forward(g, s, a, b);
        let l = g.bce(p, &labels, &ones, F::from_f64_lossy(1e-7));
        g.mean(l)
    }

    fn model3_case<F: Real>(
        head: &Model3Head,
        emb: &LabelEmbedder,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
    ) -> NodeId {
        let labels: Vec<F> = (0..6).map(|i| F::from_usize((i / 2) % 2).unwrap()).collect();
        let ones = vec![F::one(); 6];
        let img = g.param(s, "img");
        let le = emb.forward(g, s, &[0, 1, 2, 0, 1, 2]);
        let p = head.forward(g, s, img, le);
        let l = g.bce(p, &labels, &ones, F::from_f64_lossy(1e-7));
        g.mean(l)
    }

    /// Relative gradient error of every head at m = 4. With `single`, the
    /// tape runs in f32 and is compared against f64 finite differences.
    fn gradcheck_heads(single: bool) -> Vec<(String, f64)> {
        let check = |store: &ParamStore<f64>,
                     l32: &dyn Fn(&mut Graph<f32>, &ParamStore<f32>) -> NodeId,
                     l64: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId| {
            if single {
                relative_error_f32(&store.cast(), 1e-6, l32, l64)
            } else {
                relative_error(store, 1e-6, &[], l64)
            }
        };
        let mut out = Vec::new();
        let m = 4;
        for variant in GVariant::ALL.into_iter().filter(|v| *v != GVariant::Mean) {
            let mut store = ParamStore::<f64>::new();
            let mut r = rng(11);
            let head = CompositionHead::new(variant, m, m, "g", &mut store, &mut r);
            store.insert_param("a", unit_rows(&mut r, 5, m));
            store.insert_param("b", unit_rows(&mut r, 5, m));
            let t = unit_rows::<f64>(&mut r, 5, m);
            let err = check(
                &store,
                &|g, s| g_case(&head, &t, g, s),
                &|g, s| g_case(&head, &t, g, s),
            );
            out.push((format!("g_{}", variant.name()), err));
        }
        for variant in HVariant::ALL {
            let mut store = ParamStore::<f64>::new();
            let mut r = rng(12);
            let head = QueryHead::new(variant, m, m, "h", &mut store, &mut r);
            store.insert_param("a", unit_rows(&mut r, 6, m));
            store.insert_param("b", unit_rows(&mut r, 6, m));
            let err = check(&store, &|g, s| h_case(&head, g, s), &|g, s| h_case(&head, g, s));
            out.push((format!("h_{}", variant.name()), err));
        }
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(13);
        let cfg = Model3Config {
            image_dim: m,
            label_dim: m,
            hidden: vec![5, 5],
            n_classes: 3,
        };
        let head = Model3Head::new(cfg, "m3", &mut store, &mut r);
        let emb = LabelEmbedder::new(3, m, "label", &mut store, &mut r);
        store.insert_param("img", unit_rows(&mut r, 6, m));
        let err = check(
            &store,
            &|g, s| model3_case(&head, &emb, g, s),
            &|g, s| model3_case(&head, &emb, g, s),
        );
        out.push(("model3".into(), err));
        out
    }

    #[test]
    fn head_gradients_extended_precision() {
        for (name, err) in gradcheck_heads(false) {
            assert!(err <= 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn head_gradients_default_precision() {
        for (name, err) in gradcheck_heads(true) {
            assert!(err <= 1e-3, "{name}: {err}");
        }
    }
}
