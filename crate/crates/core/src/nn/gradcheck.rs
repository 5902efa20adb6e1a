//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Real;

/// Aggregate relative error `||g_tape - g_fd|| / max(||g_tape||, ||g_fd||)`
/// over every trainable scalar in `store`. `loss` must build a scalar node
/// in the graph it is handed (train mode). Trainable entries listed in
/// `skip` are left out.
pub fn relative_error<F, L>(store: &ParamStore<F>, step: f64, skip: &[&str], loss: L) -> f64
where
    F: Real,
    L: Fn(&mut Graph<F>, &ParamStore<F>) -> NodeId,
{
    let mut g = Graph::new(true);
    let out = loss(&mut g, store);
    let grads = g.backward(out);
    let (mut num, mut tape_sq, mut fd_sq) = (0.0f64, 0.0f64, 0.0f64);
    for name in store.trainable_names() {
        if skip.iter().any(|s| name.starts_with(s)) {
            continue;
        }
        let tape = grads.param(&name).map(|t| t.data.clone());
        for j in 0..store.expect(&name).len() {
            let probe = |delta: f64| {
                let mut s = store.clone();
                let v = &mut s.get_mut(&name).expect("present").data[j];
                *v += F::from_f64_lossy(delta);
                let mut g = Graph::new(true);
                let out = loss(&mut g, &s);
                g.value(out).data[0].to_f64().unwrap_or(f64::NAN)
            };
            let fd = (probe(step) - probe(-step)) / (2.0 * step);
            let an = tape.as_ref().map_or(0.0, |t| t[j].to_f64().unwrap_or(f64::NAN));
            num += (fd - an).powi(2);
            tape_sq += an * an;
            fd_sq += fd * fd;
        }
    }
    num.sqrt() / tape_sq.sqrt().max(fd_sq.sqrt()).max(1e-30)
}

/// Like [`relative_error`] for a single-precision tape, but with the
/// finite differences taken in double precision at the same point, so the
/// comparison measures the tape rather than f32 rounding in the probes.
pub fn relative_error_f32<L32, L64>(store: &ParamStore<f32>, step: f64, loss32: L32, loss64: L64) -> f64
where
    L32: Fn(&mut Graph<f32>, &ParamStore<f32>) -> NodeId,
    L64: Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
{
    let mut g = Graph::new(true);
    let out = loss32(&mut g, store);
    let grads = g.backward(out);
    let wide: ParamStore<f64> = store.cast();
    let (mut num, mut tape_sq, mut fd_sq) = (0.0f64, 0.0f64, 0.0f64);
    for name in store.trainable_names() {
        let tape = grads.param(&name).map(|t| t.data.clone());
        for j in 0..store.expect(&name).len() {
            let probe = |delta: f64| {
                let mut s = wide.clone();
                s.get_mut(&name).expect("present").data[j] += delta;
                let mut g = Graph::new(true);
                let out = loss64(&mut g, &s);
                g.value(out).data[0]
            };
            let fd = (probe(step) - probe(-step)) / (2.0 * step);
            let an = tape.as_ref().map_or(0.0, |t| f64::from(t[j]));
            num += (fd - an).powi(2);
            tape_sq += an * an;
            fd_sq += fd * fd;
        }
    }
    num.sqrt() / tape_sq.sqrt().max(fd_sq.sqrt()).max(1e-30)
}
