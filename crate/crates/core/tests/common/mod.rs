#![allow(dead_code)]

use cellsearch::data::Batch;
use cellsearch::optim::{loss_and_grad, unrolled_arch_grad};
use cellsearch::supernet::{default_layout, Supernet, SupernetConfig};
use cellsearch::tape::{Tape, Var};
use cellsearch::tensor::{ParamGroup, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Passes when `|a - b| <= max(rtol * max(|a|, |b|), atol)`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= (rtol * a.abs().max(b.abs())).max(atol)
}

/// Worst-case violation report of an analytic-vs-numeric comparison.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel: f64,
    pub max_abs: f64,
    /// Entries that only agreed at a finer step.
    pub refined: usize,
}

/// Central finite differences for every element of `ids` against the
/// gradients produced by one backward pass of `loss_fn`.
pub fn gradcheck<L>(store: &mut ParamStore<f64>, ids: &[ParamId], eps: f64, rtol: f64, atol: f64, loss_fn: L) -> GradReport
where
    L: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Var,
{
    gradcheck_refined(store, ids, &[eps], rtol, atol, loss_fn)
}

/// Like [`gradcheck`], but an entry that disagrees at `steps[0]` is retried
/// at the following (smaller) steps. A perturbation that crosses a ReLU or
/// max-pool kink breaks the difference quotient, not the gradient.
pub fn gradcheck_refined<L>(store: &mut ParamStore<f64>, ids: &[ParamId], steps: &[f64], rtol: f64, atol: f64, loss_fn: L) -> GradReport
where
    L: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Var,
{
    store.clear_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape);
    tape.backward(loss, store).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            store
                .tensor(id)
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.tensor(id).numel()])
        })
        .collect();
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let l = loss_fn(s, &mut t);
        t.value(l).data()[0]
    };
    let mut report = GradReport::default();
    for (pi, &id) in ids.iter().enumerate() {
        for j in 0..store.tensor(id).numel() {
            let a = analytic[pi][j];
            let mut numeric = f64::NAN;
            for (k, &eps) in steps.iter().enumerate() {
                let orig = store.tensor(id).data()[j];
                store.tensor_mut(id).data_mut()[j] = orig + eps;
                let up = eval(store);
                store.tensor_mut(id).data_mut()[j] = orig - eps;
                let down = eval(store);
                store.tensor_mut(id).data_mut()[j] = orig;
                numeric = (up - down) / (2.0 * eps);
                if close(a, numeric, rtol, atol) {
                    report.refined += usize::from(k > 0);
                    break;
                }
            }
            report.checked += 1;
            let denom = a.abs().max(numeric.abs());
            report.max_abs = report.max_abs.max((a - numeric).abs());
            if (a - numeric).abs() > atol {
                report.max_rel = report.max_rel.max((a - numeric).abs() / denom);
            }
            if !close(a, numeric, rtol, atol) {
                report.failures.push(format!(
                    "{}[{j}]: analytic {a:e} numeric {numeric:e}",
                    store.get(id).name
                ));
            }
        }
    }
    report
}

/// sum(y * r) for a fixed pseudo-random r, so every output element matters.
pub fn probe_loss(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(random_tensor(&mut rng(seed), &shape));
    let m = tape.mul(y, r).unwrap();
    tape.sum(m)
}

/// Two-cell supernet (C = 2, T = 16, two classes) with one training and one
/// validation batch.
pub fn tiny_search(seed: u64) -> (Supernet<f64>, Batch<f64>, Batch<f64>) {
    let cfg = SupernetConfig {
        num_cells: 2,
        layout: default_layout(2),
        init_channels: 2,
        num_classes: 2,
        ..SupernetConfig::default()
    };
    let mut net = Supernet::<f64>::new(cfg, seed).unwrap();
    let mut r = rng(seed + 1);
    // Spread the logits so softmax weights are not all equal.
    for group in [ParamGroup::Alpha, ParamGroup::Beta] {
        for id in net.store().ids(group) {
            let n = net.store().tensor(id).numel();
            let v = random_tensor(&mut r, &[n]);
            net.store_mut().tensor_mut(id).data_mut().copy_from_slice(v.data());
        }
    }
    let mut batch = |n: usize| Batch {
        x: random_tensor(&mut r, &[n, 2, 16]),
        labels: (0..n).map(|i| i % 2).collect(),
    };
    let train = batch(4);
    let val = batch(4);
    (net, train, val)
}

/// `L_val(w - xi * grad_w L_train(w, a), a)` evaluated with `store`'s
/// architecture values.
pub fn unrolled_val_loss(net: &Supernet<f64>, store: &ParamStore<f64>, train: &Batch<f64>, val: &Batch<f64>, xi: f64) -> f64 {
    let mut scratch = store.clone();
    loss_and_grad(net, &mut scratch, train).unwrap();
    let mut unrolled = store.clone();
    for id in store.ids(ParamGroup::Weight) {
        if let Some(g) = scratch.tensor(id).grad() {
            let g = g.to_vec();
            unrolled.tensor_mut(id).data_mut().iter_mut().zip(g).for_each(|(p, g)| *p -= xi * g);
        }
    }
    let mut tape = Tape::new();
    let out = net.forward_with(&unrolled, &mut tape, &val.x).unwrap();
    let loss = tape.cross_entropy(out.logits, &val.labels).unwrap();
    tape.value(loss).data()[0]
}

/// Compares the engine's unrolled architecture gradient with central
/// differences of [`unrolled_val_loss`] for every alpha and beta entry.
pub fn second_order_check(seed: u64, xi: f64, h: f64, rtol: f64) -> GradReport {
    let (mut net, train, val) = tiny_search(seed);
    let base = net.store().clone();
    unrolled_arch_grad(&mut net, &train, &val, xi).unwrap();
    let mut report = GradReport::default();
    let mut store = base.clone();
    for group in [ParamGroup::Alpha, ParamGroup::Beta] {
        for id in base.ids(group) {
            let analytic = net.store().tensor(id).grad().unwrap().to_vec();
            for (j, &a) in analytic.iter().enumerate() {
                let orig = store.tensor(id).data()[j];
                store.tensor_mut(id).data_mut()[j] = orig + h;
                let up = unrolled_val_loss(&net, &store, &train, &val, xi);
                store.tensor_mut(id).data_mut()[j] = orig - h;
                let down = unrolled_val_loss(&net, &store, &train, &val, xi);
                store.tensor_mut(id).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                report.checked += 1;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-300);
                report.max_abs = report.max_abs.max((a - numeric).abs());
                if (a - numeric).abs() > 1e-7 {
                    report.max_rel = report.max_rel.max(rel);
                }
                if !close(a, numeric, rtol, 1e-7) {
                    report.failures.push(format!("{}[{j}]: analytic {a:e} numeric {numeric:e}", base.get(id).name));
                }
            }
        }
    }
    report
}
