//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output and whatever it needs
//! for the backward pass. [`Graph::backward`] walks the tape once in reverse.
//! Parameters are copied in from a [`ParamStore`] on first use and memoized
//! by name, so a block applied many times accumulates into one gradient.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};

const BN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Batch statistics observed by a train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub layer: String,
    pub mean: Vec<F>,
    /// Unbiased variance.
    pub var: Vec<F>,
}

enum Op<F> {
    Input,
    Param,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    GlobalAvgPool(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    L2Normalize {
        x: NodeId,
        norms: Vec<F>,
    },
    RowNorm(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddScalar(NodeId),
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Bce {
        p: NodeId,
        targets: Vec<F>,
        weights: Vec<F>,
        delta: F,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    train: bool,
    params: HashMap<String, NodeId>,
    batch_stats: Vec<BatchStats<F>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Grads<F> {
    by_node: Vec<Option<Vec<F>>>,
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Grads<F> {
    /// Gradient for a named parameter, if it took part in the computation.
    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn node(&self, id: NodeId) -> Option<&[F]> {
        self.by_node.get(id.0).and_then(|g| g.as_deref())
    }
}

impl<F: Real> Graph<F> {
    /// `train` selects batch statistics in batch-norm layers.
    pub fn new(train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            train,
            params: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn batch_stats(&self) -> &[BatchStats<F>] {
        &self.batch_stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// A leaf that receives a gradient but is not backed by a store entry.
    pub fn variable(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Param, true)
    }

    /// The named parameter as a node; created once per graph.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let requires_grad = store.is_trainable(name);
        let id = self.push(store.expect(name).clone(), Op::Param, requires_grad);
        self.params.insert(name.to_string(), id);
        id
    }

    /// `x [N, in] * w^T + b`, with `w: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        let n = xv.rows();
        let inputs = xv.row_len();
        let (outputs, w_in) = (wv.shape[0], wv.shape[1]);
        assert_eq!(inputs, w_in, "linear: input width {inputs} vs weight {w_in}");
        let mut out = vec![F::zero(); n * outputs];
        F::gemm(
            n,
            inputs,
            outputs,
            F::one(),
            &xv.data,
            inputs as isize,
            1,
            &wv.data,
            1,
            inputs as isize,
            F::zero(),
            &mut out,
            outputs as isize,
            1,
        );
        if let Some(b) = b {
            let bv = &self.value(b).data;
            assert_eq!(bv.len(), outputs);
            for row in out.chunks_mut(outputs) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(vec![n, outputs], out), Op::Linear { x, w, b }, rg)
    }

    /// Linear layer read from `store` as `name.w` and optional `name.b`.
    pub fn dense(&mut self, store: &ParamStore<F>, name: &str, x: NodeId) -> NodeId {
        let w = self.param(store, &format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = store.contains(&bname).then(|| self.param(store, &bname));
        self.linear(x, w, b)
    }

    /// Square-kernel convolution with zero padding. `x: [N, C, H, W]`,
    /// `w: [O, C, K, K]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (o, k) = (wv.shape[0], wv.shape[2]);
        assert_eq!(wv.shape, vec![o, c, k, k], "conv weight shape vs input channels");
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let ohw = geom.out_h * geom.out_w;
        let kk = c * k * k;
        let mut cols = vec![F::zero(); n * kk * ohw];
        let mut out = vec![F::zero(); n * o * ohw];
        let chw = c * h * wd;
        for img in 0..n {
            let col = &mut cols[img * kk * ohw..(img + 1) * kk * ohw];
            geom.im2col(&xv.data[img * chw..(img + 1) * chw], col);
            let dst = &mut out[img * o * ohw..(img + 1) * o * ohw];
            if let Some(b) = b {
                let bias = &self.value(b).data;
                for (oc, chunk) in dst.chunks_mut(ohw).enumerate() {
                    chunk.fill(bias[oc]);
                }
            }
            F::gemm(
                o,
                kk,
                ohw,
                F::one(),
                &wv.data,
                kk as isize,
                1,
                col,
                ohw as isize,
                1,
                F::one(),
                dst,
                ohw as isize,
                1,
            );
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let shape = vec![n, o, geom.out_h, geom.out_w];
        self.push(
            Tensor::new(shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// 3x3, stride 1, padding 1 convolution read from `store` as `name.w`, `name.b`.
    pub fn conv(&mut self, store: &ParamStore<F>, name: &str, x: NodeId) -> NodeId {
        self.conv_with(store, name, x, 1, 1)
    }

    /// Convolution read from `store`; the bias `name.b` is optional.
    pub fn conv_with(
        &mut self,
        store: &ParamStore<F>,
        name: &str,
        x: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let w = self.param(store, &format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = store.contains(&bname).then(|| self.param(store, &bname));
        self.conv2d(x, w, b, stride, pad)
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (n, c) = (v.shape[0], v.shape[1]);
        let spatial: usize = v.shape[2..].iter().product();
        let inv = F::one() / F::from_usize(spatial).unwrap();
        let out = v
            .data
            .chunks(spatial)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), rg)
    }

    /// 2x2 max pooling, stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv.data[i] > xv.data[best] {
                            best = i;
                        }
                    }
                    out.push(xv.data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    /// Batch normalization over all axes except 1. In train mode the batch
    /// statistics are used and recorded for a running-average update; in eval
    /// mode `name.running_mean` / `name.running_var` are used.
    pub fn batch_norm(&mut self, store: &ParamStore<F>, name: &str, x: NodeId) -> NodeId {
        let gamma = self.param(store, &format!("{name}.gamma"));
        let beta = self.param(store, &format!("{name}.beta"));
        let xv = self.value(x);
        let shape = xv.shape.clone();
        let n = shape[0];
        let ch = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let count = n * spatial;
        let eps = F::from_f64_lossy(BN_EPS);
        let (mean, var) = if self.train {
            let mut mean = vec![F::zero(); ch];
            let mut var = vec![F::zero(); ch];
            for img in 0..n {
                for (c, m) in mean.iter_mut().enumerate() {
                    let s = &xv.data[(img * ch + c) * spatial..(img * ch + c + 1) * spatial];
                    *m += s.iter().copied().sum::<F>();
                }
            }
            let inv = F::one() / F::from_usize(count).unwrap();
            mean.iter_mut().for_each(|m| *m *= inv);
            for img in 0..n {
                for c in 0..ch {
                    let s = &xv.data[(img * ch + c) * spatial..(img * ch + c + 1) * spatial];
                    var[c] += s.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<F>();
                }
            }
            var.iter_mut().for_each(|v| *v *= inv);
            (mean, var)
        } else {
            (
                store.expect(&format!("{name}.running_mean")).data.clone(),
                store.expect(&format!("{name}.running_var")).data.clone(),
            )
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for img in 0..n {
            for c in 0..ch {
                let off = (img * ch + c) * spatial;
                for s in 0..spatial {
                    let h = (xv.data[off + s] - mean[c]) * inv_std[c];
                    xhat[off + s] = h;
                    out[off + s] = g[c] * h + bt[c];
                }
            }
        }
        if self.train {
            let unbias = if count > 1 {
                F::from_usize(count).unwrap() / F::from_usize(count - 1).unwrap()
            } else {
                F::one()
            };
            self.batch_stats.push(BatchStats {
                layer: name.to_string(),
                mean,
                var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = self.train;
        self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = v.data.iter().map(|&a| a.max(F::zero())).collect();
        let t = Tensor::new(v.shape.clone(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = v.data.iter().map(|&a| sigmoid(a)).collect();
        let t = Tensor::new(v.shape.clone(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.row_len();
        let floor = F::from_f64_lossy(NORM_FLOOR);
        let mut out = v.data.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&a| a * a).sum::<F>().sqrt().max(floor);
            row.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        let t = Tensor::new(vec![v.rows(), d], out);
        let rg = self.rg(&[x]);
        self.push(t, Op::L2Normalize { x, norms }, rg)
    }

    /// Euclidean norm of each row: `[N, D] -> [N, 1]`.
    pub fn row_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.row_len();
        let out: Vec<F> = v
            .data
            .chunks(d)
            .map(|r| r.iter().map(|&a| a * a).sum::<F>().sqrt())
            .collect();
        let t = Tensor::new(vec![v.rows(), 1], out);
        let rg = self.rg(&[x]);
        self.push(t, Op::RowNorm(x), rg)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise op on {:?} and {:?}", av.shape, bv.shape);
        let out = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape.clone(), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| a * s).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: F) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| a + s).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(shape, v.data.clone());
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// `[N, D]` collapse of any `[N, ...]` node.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let shape = vec![v.rows(), v.row_len()];
        self.reshape(x, shape)
    }

    /// Side-by-side concatenation of `[N, D_i]` blocks.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), n, "concat_cols row mismatch");
                out.extend_from_slice(v.row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Vertical stacking of blocks with equal row length.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let first = self.value(parts[0]);
        let mut shape = first.shape.clone();
        let d = first.row_len();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.row_len(), d, "concat_rows width mismatch");
            out.extend_from_slice(&v.data);
            rows += v.rows();
        }
        shape[0] = rows;
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(x);
        let mut shape = v.shape.clone();
        shape[0] = idx.len();
        let mut out = Vec::with_capacity(idx.len() * v.row_len());
        for &i in idx {
            out.extend_from_slice(v.row(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1], vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data.iter().copied().sum::<F>() / F::from_usize(v.len()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1], vec![s]), Op::Mean(x), rg)
    }

    /// Elementwise weighted binary cross-entropy on probabilities clamped
    /// to `[delta, 1 - delta]`. Output has the shape of `p`.
    pub fn bce(&mut self, p: NodeId, targets: &[F], weights: &[F], delta: F) -> NodeId {
        let v = self.value(p);
        assert_eq!(v.len(), targets.len(), "bce target length");
        assert_eq!(v.len(), weights.len(), "bce weight length");
        let out = v
            .data
            .iter()
            .zip(targets.iter().zip(weights))
            .map(|(&pp, (&y, &w))| w * bce_value(pp, y, delta))
            .collect();
        let t = Tensor::new(v.shape.clone(), out);
        let rg = self.rg(&[p]);
        self.push(
            t,
            Op::Bce {
                p,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                delta,
            },
            rg,
        )
    }

    /// Gradients of the single-element node `loss`.
    pub fn backward(&self, loss: NodeId) -> Grads<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(name, id)| {
                grads[id.0]
                    .as_ref()
                    .map(|g| (name.clone(), Tensor::new(self.value(*id).shape.clone(), g.clone())))
            })
            .collect();
        Grads {
            by_node: grads,
            params,
        }
    }

    fn backprop_node(&self, i: usize, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.rows();
                let inputs = xv.row_len();
                let outputs = wv.shape[0];
                if self.needs(*x) {
                    let gx = acc(grads, *x, xv.len());
                    F::gemm(
                        n,
                        outputs,
                        inputs,
                        F::one(),
                        dy,
                        outputs as isize,
                        1,
                        &wv.data,
                        inputs as isize,
                        1,
                        F::one(),
                        gx,
                        inputs as isize,
                        1,
                    );
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, wv.len());
                    F::gemm(
                        outputs,
                        n,
                        inputs,
                        F::one(),
                        dy,
                        1,
                        outputs as isize,
                        &xv.data,
                        inputs as isize,
                        1,
                        F::one(),
                        gw,
                        inputs as isize,
                        1,
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = acc(grads, *b, outputs);
                        for row in dy.chunks(outputs) {
                            for (g, &d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape[0];
                let o = wv.shape[0];
                let ohw = geom.out_h * geom.out_w;
                let kk = geom.c * geom.k * geom.k;
                let chw = geom.c * geom.h * geom.w;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = acc(grads, *b, o);
                        for img in 0..n {
                            for (oc, g) in gb.iter_mut().enumerate() {
                                let off = (img * o + oc) * ohw;
                                *g += dy[off..off + ohw].iter().copied().sum::<F>();
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, wv.len());
                    for img in 0..n {
                        F::gemm(
                            o,
                            ohw,
                            kk,
                            F::one(),
                            &dy[img * o * ohw..(img + 1) * o * ohw],
                            ohw as isize,
                            1,
                            &cols[img * kk * ohw..(img + 1) * kk * ohw],
                            1,
                            ohw as isize,
                            F::one(),
                            gw,
                            kk as isize,
                            1,
                        );
                    }
                }
                if self.needs(*x) {
                    let mut dcol = vec![F::zero(); kk * ohw];
                    let gx = acc(grads, *x, xv.len());
                    for img in 0..n {
                        F::gemm(
                            kk,
                            o,
                            ohw,
                            F::one(),
                            &wv.data,
                            1,
                            kk as isize,
                            &dy[img * o * ohw..(img + 1) * o * ohw],
                            ohw as isize,
                            1,
                            F::zero(),
                            &mut dcol,
                            ohw as isize,
                            1,
                        );
                        geom.col2im(&dcol, &mut gx[img * chw..(img + 1) * chw]);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let len = self.value(*x).len();
                let spatial = len / dy.len();
                let inv = F::one() / F::from_usize(spatial).unwrap();
                let gx = acc(grads, *x, len);
                for (plane, &d) in gx.chunks_mut(spatial).zip(dy) {
                    plane.iter_mut().for_each(|g| *g += d * inv);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = acc(grads, *x, self.value(*x).len());
                for (&src, &d) in argmax.iter().zip(dy) {
                    gx[src] += d;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = &self.value(*x).shape;
                let n = shape[0];
                let ch = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let g = &self.value(*gamma).data;
                let mut sum_dy = vec![F::zero(); ch];
                let mut sum_dy_xhat = vec![F::zero(); ch];
                for img in 0..n {
                    for c in 0..ch {
                        let off = (img * ch + c) * spatial;
                        for s in 0..spatial {
                            sum_dy[c] += dy[off + s];
                            sum_dy_xhat[c] += dy[off + s] * xhat[off + s];
                        }
                    }
                }
                if self.needs(*gamma) {
                    let gg = acc(grads, *gamma, ch);
                    for c in 0..ch {
                        gg[c] += sum_dy_xhat[c];
                    }
                }
                if self.needs(*beta) {
                    let gb = acc(grads, *beta, ch);
                    for c in 0..ch {
                        gb[c] += sum_dy[c];
                    }
                }
                if self.needs(*x) {
                    let gx = acc(grads, *x, dy.len());
                    let m = F::from_usize(n * spatial).unwrap();
                    for img in 0..n {
                        for c in 0..ch {
                            let off = (img * ch + c) * spatial;
                            let k = g[c] * inv_std[c];
                            for s in 0..spatial {
                                let j = off + s;
                                gx[j] += if *batch_stats {
                                    k * (dy[j] - sum_dy[c] / m - xhat[j] * sum_dy_xhat[c] / m)
                                } else {
                                    k * dy[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let gx = acc(grads, *x, xv.len());
                for ((g, &d), &a) in gx.iter_mut().zip(dy).zip(xv) {
                    if a > F::zero() {
                        *g += d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                let gx = acc(grads, *x, y.len());
                for ((g, &d), &s) in gx.iter_mut().zip(dy).zip(y) {
                    *g += d * s * (F::one() - s);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = y.row_len();
                let gx = acc(grads, *x, y.len());
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let dr = &dy[r * d..(r + 1) * d];
                    let proj: F = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (dr[j] - yr[j] * proj) / nrm;
                    }
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let d = xv.row_len();
                let norms = &node.value.data;
                let gx = acc(grads, *x, xv.len());
                for (r, &nrm) in norms.iter().enumerate() {
                    if nrm > F::zero() {
                        let k = dy[r] / nrm;
                        for j in 0..d {
                            gx[r * d + j] += k * xv.data[r * d + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs(*id) {
                        add_into(acc(grads, *id, dy.len()), dy, F::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(acc(grads, *a, dy.len()), dy, F::one());
                }
                if self.needs(*b) {
                    add_into(acc(grads, *b, dy.len()), dy, -F::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    let ga = acc(grads, *a, dy.len());
                    for j in 0..dy.len() {
                        ga[j] += dy[j] * bv[j];
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, dy.len());
                    for j in 0..dy.len() {
                        gb[j] += dy[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => add_into(acc(grads, *x, dy.len()), dy, *s),
            Op::AddScalar(x) | Op::Reshape(x) => add_into(acc(grads, *x, dy.len()), dy, F::one()),
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.row_len();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if self.needs(p) {
                        let gp = acc(grads, p, n * w);
                        for r in 0..n {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &dy[r * total + col..r * total + col + w],
                                F::one(),
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        add_into(acc(grads, p, len), &dy[off..off + len], F::one());
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let d = xv.row_len();
                let gx = acc(grads, *x, xv.len());
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * d..(src + 1) * d], &dy[r * d..(r + 1) * d], F::one());
                }
            }
            Op::Sum(x) => {
                let gx = acc(grads, *x, self.value(*x).len());
                gx.iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let k = dy[0] / F::from_usize(len).unwrap();
                let gx = acc(grads, *x, len);
                gx.iter_mut().for_each(|g| *g += k);
            }
            Op::Bce {
                p,
                targets,
                weights,
                delta,
            } => {
                let pv = &self.value(*p).data;
                let gp = acc(grads, *p, pv.len());
                for j in 0..pv.len() {
                    gp[j] += dy[j] * weights[j] * bce_grad(pv[j], targets[j], *delta);
                }
            }
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut [F] {
    grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F], k: F) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub fn sigmoid<F: Real>(a: F) -> F {
    if a >= F::zero() {
        F::one() / (F::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (F::one() + e)
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[delta, 1 - delta]`.
pub fn bce_value<F: Real>(p: F, y: F, delta: F) -> F {
    let pc = p.max(delta).min(F::one() - delta);
    -(y * pc.ln() + (F::one() - y) * (F::one() - pc).ln())
}

/// Derivative of [`bce_value`] in `p`; zero where the clamp is active.
pub fn bce_grad<F: Real>(p: F, y: F, delta: F) -> F {
    if p < delta || p > F::one() - delta {
        return F::zero();
    }
    -y / p + (F::one() - y) / (F::one() - p)
}

/// Layout of one convolution: input `[C, H, W]`, square kernel `k`.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && h + 2 * pad >= k && w + 2 * pad >= k, "conv geometry");
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Valid output columns `[x0, x1)` for kernel column `kx`, i.e. those
    /// whose input column `ox * stride + kx - pad` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let x0 = (self.pad.saturating_sub(kx)).div_ceil(s);
        let lim = (self.w + self.pad).saturating_sub(kx); // ix < w  <=>  ox * s < w + pad - kx
        let x1 = lim.div_ceil(s).min(self.out_w);
        (x0.min(x1), x1)
    }

    fn im2col<F: Real>(&self, src: &[F], col: &mut [F]) {
        let (hw, ohw) = (self.h * self.w, self.out_h * self.out_w);
        let k = self.k;
        for ch in 0..self.c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ch * k + ky) * k + kx;
                    let row = &mut col[r * ohw..(r + 1) * ohw];
                    let (x0, x1) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        dst[..x0].fill(F::zero());
                        dst[x1..].fill(F::zero());
                        if self.stride == 1 {
                            let ix0 = x0 + kx - self.pad;
                            dst[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate().take(x1).skip(x0) {
                                *d = srow[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, col: &[F], dst: &mut [F]) {
        let (hw, ohw) = (self.h * self.w, self.out_h * self.out_w);
        let k = self.k;
        for ch in 0..self.c {
            let plane = &mut dst[ch * hw..(ch + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ch * k + ky) * k + kx;
                    let row = &col[r * ohw..(r + 1) * ohw];
                    let (x0, x1) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let prow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &row[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in x0..x1 {
                            prow[ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}
