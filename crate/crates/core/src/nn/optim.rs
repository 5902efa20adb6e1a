use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{BatchStats, Grads};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub first: BTreeMap<String, Vec<f32>>,
    pub second: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (name, g) in grads.params() {
            if !store.is_trainable(name) {
                continue;
            }
            let p = store.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for j in 0..g.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p.data[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Folds train-mode batch statistics into running averages:
/// `running = (1 - momentum) * running + momentum * batch`.
/// A layer applied several times in one graph contributes each batch in turn.
pub fn update_running_stats<F: Real>(store: &mut ParamStore<F>, stats: &[BatchStats<F>], momentum: F) {
    for s in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{}.{suffix}", s.layer);
            let run: &mut Tensor<F> = store
                .get_mut(&name)
                .unwrap_or_else(|| panic!("missing buffer `{name}`"));
            for (r, &b) in run.data.iter_mut().zip(batch.iter()) {
                *r = (F::one() - momentum) * *r + momentum * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        store.insert_param("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let mut g = Graph::new(true);
            let x = g.param(&store, "x");
            let sq = g.mul(x, x);
            let l = g.sum(sq);
            let grads = g.backward(l);
            opt.step(&mut store, &grads);
        }
        let x = &store.expect("x").data;
        assert!(x[0].abs() < 0.05 && x[1].abs() < 0.05, "{x:?}");
    }

    #[test]
    fn running_stats_momentum() {
        let mut store = ParamStore::<f64>::new();
        crate::nn::params::add_batch_norm(&mut store, "bn", 1);
        let stats = [BatchStats {
            layer: "bn".into(),
            mean: vec![2.0],
            var: vec![3.0],
        }];
        update_running_stats(&mut store, &stats, 0.5);
        assert_eq!(store.expect("bn.running_mean").data, vec![1.0]);
        assert_eq!(store.expect("bn.running_var").data, vec![2.0]);
    }
}
