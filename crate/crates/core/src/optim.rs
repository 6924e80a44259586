//! Weight and architecture optimizers, and the alternating search step.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::supernet::Supernet;
use crate::tape::Tape;
use crate::tensor::{ParamGroup, ParamStore, Scalar};

/// `0.5 * lr0 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(t: f64, total: f64, lr0: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    let t = t.clamp(0.0, total);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t / total).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Initial weight learning rate, annealed to zero by [`cosine_lr`].
    pub w_lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global-norm clip on weight gradients; 0 disables clipping.
    pub grad_clip: f64,
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub arch_eps: f64,
    pub arch_weight_decay: f64,
    /// Virtual step size of the unrolled architecture gradient; 0 is first order.
    pub xi: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            w_lr0: 0.025,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 5.0,
            arch_lr: 3e-4,
            arch_beta1: 0.5,
            arch_beta2: 0.999,
            arch_eps: 1e-8,
            arch_weight_decay: 1e-3,
            xi: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("w_lr0", self.w_lr0),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("arch_lr", self.arch_lr),
            ("arch_weight_decay", self.arch_weight_decay),
            ("xi", self.xi),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("{name} = {v} must be a finite non-negative number")));
        }
        for (name, v) in [("momentum", self.momentum), ("arch_beta1", self.arch_beta1), ("arch_beta2", self.arch_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1)")));
            }
        }
        if !(self.arch_eps > 0.0) {
            return Err(Error::InvalidArgument("arch_eps must be positive".into()));
        }
        Ok(())
    }

    /// Zeroes every learning rate (used to check that a run is a no-op).
    pub fn frozen(mut self) -> Self {
        self.w_lr0 = 0.0;
        self.arch_lr = 0.0;
        self
    }
}

/// Momentum buffers keyed by parameter index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<Option<Vec<f64>>>,
}

/// First and second moment estimates keyed by parameter index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

fn slot(buffers: &mut Vec<Option<Vec<f64>>>, i: usize, n: usize) -> &mut Vec<f64> {
    if buffers.len() <= i {
        buffers.resize(i + 1, None);
    }
    buffers[i].get_or_insert_with(|| vec![0.0; n])
}

fn check_grad<F: Scalar>(name: &str, g: &[F]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient of {name}")))
    }
}

/// `v <- momentum * v + (g + weight_decay * p); p <- p - lr * v` for every
/// parameter of `group` that holds a gradient. All gradients are checked
/// before any parameter moves.
pub fn sgd_step<F: Scalar>(
    store: &mut ParamStore<F>,
    group: ParamGroup,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for id in store.ids(group) {
        let p = store.get(id);
        if let Some(g) = p.tensor.grad() {
            check_grad(&p.name, g)?;
        }
    }
    for id in store.ids(group) {
        let t = store.tensor_mut(id);
        let Some(g) = t.grad().map(|g| g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>()) else {
            continue;
        };
        let v = slot(&mut state.velocity, id.0, g.len());
        for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            let pf = p.to_f64().unwrap_or(f64::NAN);
            *vi = momentum * *vi + gi + weight_decay * pf;
            *p = F::lit(pf - lr * *vi);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Bias-corrected adaptive-moment step with L2 decay folded into the
/// gradient, for every parameter of `group` that holds a gradient.
pub fn adam_step<F: Scalar>(store: &mut ParamStore<F>, group: ParamGroup, state: &mut AdamState, hp: AdamParams) -> Result<()> {
    for id in store.ids(group) {
        let p = store.get(id);
        if let Some(g) = p.tensor.grad() {
            check_grad(&p.name, g)?;
        }
    }
    state.step += 1;
    let c1 = 1.0 - hp.beta1.powi(state.step as i32);
    let c2 = 1.0 - hp.beta2.powi(state.step as i32);
    for id in store.ids(group) {
        let t = store.tensor_mut(id);
        let Some(g) = t.grad().map(|g| g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>()) else {
            continue;
        };
        let n = g.len();
        let m = slot(&mut state.m, id.0, n);
        let mut mhat = vec![0.0; n];
        let data = t.data_mut();
        for i in 0..n {
            let gi = g[i] + hp.weight_decay * data[i].to_f64().unwrap_or(f64::NAN);
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            mhat[i] = m[i] / c1;
        }
        let v = slot(&mut state.v, id.0, n);
        for i in 0..n {
            let pf = data[i].to_f64().unwrap_or(f64::NAN);
            let gi = g[i] + hp.weight_decay * pf;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let vhat = v[i] / c2;
            data[i] = F::lit(pf - hp.lr * mhat[i] / (vhat.sqrt() + hp.eps));
        }
    }
    Ok(())
}

/// Scales the gradients of `group` so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(store: &mut ParamStore<F>, group: ParamGroup, max_norm: f64) -> f64 {
    let norm = store.grad_norm(group).to_f64().unwrap_or(f64::NAN);
    if max_norm > 0.0 && norm > max_norm {
        let c = F::lit(max_norm / (norm + 1e-6));
        for id in store.ids(group) {
            if let Some(g) = store.tensor_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }
    norm
}

/// Optimizer state of one search run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TripleState {
    pub w: SgdState,
    pub alpha: AdamState,
    pub beta: AdamState,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

/// Clears all gradients of `store`, runs a search-mode forward pass on
/// `batch` and backpropagates the mean cross-entropy into `store`.
pub fn loss_and_grad<F: Scalar>(net: &Supernet<F>, store: &mut ParamStore<F>, batch: &Batch<F>) -> Result<f64> {
    store.clear_grads();
    let mut tape = Tape::new();
    let out = net.forward_with(store, &mut tape, &batch.x)?;
    let loss = tape.cross_entropy(out.logits, &batch.labels)?;
    let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::NonFinite("search loss".into()));
    }
    tape.backward(loss, store)?;
    Ok(value)
}

fn arch_groups() -> [ParamGroup; 2] {
    [ParamGroup::Alpha, ParamGroup::Beta]
}

fn grads_of<F: Scalar>(store: &ParamStore<F>, group: ParamGroup) -> Vec<Option<Vec<f64>>> {
    store
        .ids(group)
        .into_iter()
        .map(|id| store.tensor(id).grad().map(|g| g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()))
        .collect()
}

/// Moves every weight by `c * d(weight)` where `d` is the weight gradient
/// held in `direction`.
fn shift_weights<F: Scalar>(dst: &mut ParamStore<F>, base: &ParamStore<F>, direction: &ParamStore<F>, c: f64) {
    for id in base.ids(ParamGroup::Weight) {
        let b = base.tensor(id).data();
        let d = direction.tensor(id).grad();
        let out = dst.tensor_mut(id).data_mut();
        match d {
            Some(d) => {
                for ((o, &bv), &dv) in out.iter_mut().zip(b).zip(d) {
                    *o = bv + F::lit(c) * dv;
                }
            }
            None => out.copy_from_slice(b),
        }
    }
}

/// Architecture gradient of `L_val(w - xi * grad_w L_train(w, a), a)`, with
/// the mixed second-derivative term replaced by a central difference along
/// `grad_w' L_val`. Leaves the result in the alpha and beta gradient buffers
/// of `net.store_mut()`; weights are untouched. Returns `L_val(w')`.
pub fn unrolled_arch_grad<F: Scalar>(net: &mut Supernet<F>, train: &Batch<F>, val: &Batch<F>, xi: f64) -> Result<f64> {
    let base = net.store().clone();

    // w' = w - xi * grad_w L_train(w, a)
    let mut scratch = base.clone();
    loss_and_grad(net, &mut scratch, train)?;
    let mut unrolled = base.clone();
    shift_weights(&mut unrolled, &base, &scratch, -xi);

    // grad_a L_val(w', a) and grad_w' L_val(w', a)
    let val_loss = loss_and_grad(net, &mut unrolled, val)?;
    let direct: Vec<_> = arch_groups().iter().map(|&g| grads_of(&unrolled, g)).collect();
    let norm = unrolled.grad_norm(ParamGroup::Weight).to_f64().unwrap_or(f64::NAN);
    // Perturbation of norm cbrt(machine epsilon), the usual central-difference
    // step; a fixed 0.01 is too coarse for small batch-normalized nets.
    let radius = F::epsilon().to_f64().unwrap_or(1e-16).cbrt();
    let eps = if norm > 0.0 { radius / norm } else { 0.0 };

    let mut correction: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    if eps > 0.0 {
        let mut plus = base.clone();
        shift_weights(&mut plus, &base, &unrolled, eps);
        loss_and_grad(net, &mut plus, train)?;
        let mut minus = base.clone();
        shift_weights(&mut minus, &base, &unrolled, -eps);
        loss_and_grad(net, &mut minus, train)?;
        for g in arch_groups() {
            let (gp, gm) = (grads_of(&plus, g), grads_of(&minus, g));
            correction.push(
                gp.into_iter()
                    .zip(gm)
                    .map(|(p, m)| match (p, m) {
                        (Some(p), Some(m)) => Some(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * eps)).collect()),
                        _ => None,
                    })
                    .collect(),
            );
        }
    }

    let store = net.store_mut();
    store.clear_grads();
    for (gi, group) in arch_groups().into_iter().enumerate() {
        for (k, id) in store.ids(group).into_iter().enumerate() {
            let Some(d) = &direct[gi][k] else { continue };
            let mut g = d.clone();
            if let Some(Some(c)) = correction.get(gi).map(|c| &c[k]) {
                g.iter_mut().zip(c).for_each(|(a, b)| *a -= xi * b);
            }
            store.tensor_mut(id).set_grad(Some(g.into_iter().map(F::lit).collect()));
        }
    }
    Ok(val_loss)
}

/// Architecture gradients for one step: first order when `xi == 0`.
pub fn arch_grad<F: Scalar>(net: &mut Supernet<F>, train: &Batch<F>, val: &Batch<F>, xi: f64) -> Result<f64> {
    if xi > 0.0 {
        unrolled_arch_grad(net, train, val, xi)
    } else {
        let mut store = std::mem::take(net.store_mut());
        let r = loss_and_grad(net, &mut store, val);
        *net.store_mut() = store;
        let loss = r?;
        net.store_mut().clear_group_grads(ParamGroup::Weight);
        Ok(loss)
    }
}

pub fn arch_update<F: Scalar>(net: &mut Supernet<F>, state: &mut TripleState, cfg: &OptimizerConfig) -> Result<()> {
    let hp = AdamParams {
        lr: cfg.arch_lr,
        beta1: cfg.arch_beta1,
        beta2: cfg.arch_beta2,
        eps: cfg.arch_eps,
        weight_decay: cfg.arch_weight_decay,
    };
    adam_step(net.store_mut(), ParamGroup::Alpha, &mut state.alpha, hp)?;
    adam_step(net.store_mut(), ParamGroup::Beta, &mut state.beta, hp)
}

pub fn weight_update<F: Scalar>(net: &mut Supernet<F>, train: &Batch<F>, state: &mut TripleState, cfg: &OptimizerConfig, lr: f64) -> Result<f64> {
    let mut store = std::mem::take(net.store_mut());
    let r = loss_and_grad(net, &mut store, train);
    *net.store_mut() = store;
    let loss = r?;
    let store = net.store_mut();
    store.clear_group_grads(ParamGroup::Alpha);
    store.clear_group_grads(ParamGroup::Beta);
    clip_grad_norm(store, ParamGroup::Weight, cfg.grad_clip);
    sgd_step(store, ParamGroup::Weight, &mut state.w, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(loss)
}

/// One search iteration: architecture logits and gates move on the
/// validation batch, then weights move on the training batch.
pub fn triple_step<F: Scalar>(
    net: &mut Supernet<F>,
    train: &Batch<F>,
    val: &Batch<F>,
    state: &mut TripleState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<StepLosses> {
    let val_loss = arch_grad(net, train, val, cfg.xi)?;
    arch_update(net, state, cfg)?;
    let train_loss = weight_update(net, train, state, cfg, lr)?;
    net.store_mut().clear_grads();
    state.step += 1;
    Ok(StepLosses {
        train: train_loss,
        val: val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 10.0, 0.025), 0.025);
        assert!(cosine_lr(10.0, 10.0, 0.025).abs() < 1e-18);
        assert!((cosine_lr(5.0, 10.0, 0.025) - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn plain_gradient_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", ParamGroup::Weight, Tensor::full(&[1], 1.0));
        store.tensor_mut(id).set_grad(Some(vec![0.5]));
        sgd_step(&mut store, ParamGroup::Weight, &mut SgdState::default(), 0.1, 0.0, 0.0).unwrap();
        assert!((store.tensor(id).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("cells.0.pre0.conv", ParamGroup::Weight, Tensor::full(&[2], 1.0));
        store.tensor_mut(id).set_grad(Some(vec![0.5, f64::NAN]));
        let err = sgd_step(&mut store, ParamGroup::Weight, &mut SgdState::default(), 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("cells.0.pre0.conv"));
        assert_eq!(store.tensor(id).data(), &[1.0, 1.0]);
    }
}
