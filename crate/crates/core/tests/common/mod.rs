//! Helpers shared by the integration tests and the acceptance runner:
//! random inputs, a finite-difference gradient checker and loop oracles.

#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use srtod::nn::layers::Graph;
use srtod::nn::{ParamStore, Var};
use srtod::{Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Overwrite every trainable parameter with Normal(0, std) draws.
pub fn randomize<T: Real>(store: &mut ParamStore<T>, seed: u64, std: f64) {
    let mut r = rng(seed);
    let dist = Normal::new(0.0, std).unwrap();
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        for v in e.value.data_mut() {
            *v = T::lit(dist.sample(&mut r));
        }
    }
}

/// A scalar loss of one input leaf, evaluable at any precision.
pub trait LossFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var;
}

/// Worst relative error over every checked tensor.
#[derive(Debug)]
pub struct GradReport {
    pub worst: f64,
    pub worst_name: String,
    pub tensors: usize,
    pub coordinates: usize,
}

const EPS: f64 = 1e-6;

fn analytic<T: Real, L: LossFn>(store: &ParamStore<T>, input: &Tensor<T>, loss: &L) -> Vec<(String, Option<usize>, Tensor<f64>)> {
    let mut g = Graph::new(store, true);
    let x = g.tape.input(input.clone());
    let l = loss.eval(&mut g, x);
    let grads = g.tape.backward(l);
    let mut out = vec![(
        "input".to_string(),
        None,
        grads.get(x).map_or_else(|| Tensor::zeros(input.shape()), |t| t.cast()),
    )];
    for id in store.ids() {
        let e = store.entry(id);
        if !e.trainable {
            continue;
        }
        let grad = grads
            .param(id)
            .map_or_else(|| Tensor::zeros(e.value.shape()), |t| t.cast());
        out.push((e.name.clone(), Some(id.0), grad));
    }
    out
}

fn value<L: LossFn>(store: &ParamStore<f64>, input: &Tensor<f64>, loss: &L) -> f64 {
    let mut g = Graph::new(store, true);
    let x = g.tape.input(input.clone());
    let l = loss.eval(&mut g, x);
    g.tape.scalar(l)
}

/// Central differences at float64 against the analytic gradient computed at
/// precision `T`, on up to `samples` random coordinates per tensor. The error
/// of a tensor is `‖a − n‖ / max(‖a‖, ‖n‖)` over its sampled coordinates
/// (absolute when both norms vanish).
pub fn gradcheck<T: Real, L: LossFn>(store: &ParamStore<f64>, input: &Tensor<f64>, loss: &L, samples: usize, seed: u64) -> GradReport {
    let grads = analytic::<T, L>(&store.cast(), &input.cast(), loss);
    let mut r = rng(seed);
    let mut store = store.clone();
    let mut input = input.clone();
    let mut report = GradReport {
        worst: 0.0,
        worst_name: String::new(),
        tensors: 0,
        coordinates: 0,
    };
    for (name, id, grad) in grads {
        let n = grad.len();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            sample(&mut r, n, samples).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &k in &coords {
            let slot = |s: &mut ParamStore<f64>, x: &mut Tensor<f64>, v: Option<f64>| -> f64 {
                let cell = match id {
                    Some(i) => &mut s.entries_mut()[i].value.data_mut()[k],
                    None => &mut x.data_mut()[k],
                };
                let old = *cell;
                if let Some(v) = v {
                    *cell = v;
                }
                old
            };
            let orig = slot(&mut store, &mut input, None);
            slot(&mut store, &mut input, Some(orig + EPS));
            let fp = value(&store, &input, loss);
            slot(&mut store, &mut input, Some(orig - EPS));
            let fm = value(&store, &input, loss);
            slot(&mut store, &mut input, Some(orig));
            let num = (fp - fm) / (2.0 * EPS);
            let a = grad.data()[k];
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let err = if denom < 1e-8 { diff.sqrt() } else { diff.sqrt() / denom };
        if err > report.worst || report.worst_name.is_empty() {
            report.worst = err.max(report.worst);
            report.worst_name = name;
        }
        report.tensors += 1;
        report.coordinates += coords.len();
    }
    report
}

/// Random weights of the same shape as `v`, used to turn a tensor output
/// into a scalar loss `Σ r ⊙ v`.
pub fn projection<T: Real>(g: &mut Graph<T>, v: Var, seed: u64) -> Var {
    let shape = g.value(v).shape().to_vec();
    let r = uniform(&shape, seed, -1.0, 1.0).cast();
    let c = g.tape.constant(r);
    let p = g.tape.mul(v, c);
    g.tape.sum(p)
}
