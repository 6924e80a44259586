//! From-scratch training of a discrete network, with drop-path.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::discrete::{DiscreteNet, Phase};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, cosine_lr, sgd_step, OptimizerConfig, SgdState};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamGroup, Scalar};

/// Zeroes whole samples with probability `p` and rescales survivors by
/// `1 / (1 - p)`. The identity outside training or when `p == 0`.
pub fn drop_path<F: Scalar>(tape: &mut Tape<F>, x: Var, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("drop-path rate {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let batch = tape.shape(x)[0];
    let factors = (0..batch)
        .map(|_| if rng.random_bool(keep) { F::lit(1.0 / keep) } else { F::zero() })
        .collect();
    tape.scale_samples(x, factors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub drop_path: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            drop_path: 0.3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("training batch size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::InvalidArgument(format!("drop-path rate {} outside [0, 1)", self.drop_path)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<TrainLogRow>,
    /// Epoch whose weights were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_accuracy: f64,
}

/// Mini-batch index lists for one epoch. A trailing batch of one sample is
/// dropped since batch statistics need at least two.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).filter(|c| c.len() > 1).map(<[usize]>::to_vec).collect()
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Identification training on session-1 windows with a cosine-annealed SGD
/// schedule. The weights of the epoch with the best training accuracy are
/// restored at the end.
pub fn train_final<F: Scalar>(net: &mut DiscreteNet<F>, data: &WindowSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.num_classes() != net.config().num_classes {
        return Err(Error::Data(format!(
            "data has {} subjects, network head has {} classes",
            data.num_classes(),
            net.config().num_classes
        )));
    }
    if data.sessions.iter().any(|&s| s != 1) {
        return Err(Error::Data("training windows must all come from session 1".into()));
    }
    if data.len() < 2 {
        return Err(Error::Data("training needs at least two windows".into()));
    }
    let opt = &cfg.optimizer;
    let mut state = SgdState::default();
    let mut report = TrainReport {
        log: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_accuracy: f64::NEG_INFINITY,
    };
    let mut best = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, opt.w_lr0);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd20b);
        drop_rng.set_stream(epoch as u64);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let batch = data.batch::<F>(idx);
            let mut tape = Tape::new();
            let (out, observed) = net.forward(
                &mut tape,
                &batch.x,
                Phase::Train {
                    drop_path: cfg.drop_path,
                    rng: &mut drop_rng,
                },
            )?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            let classes = net.config().num_classes;
            for (row, &label) in tape.value(out.logits).data().chunks(classes).zip(&batch.labels) {
                correct += usize::from(argmax(row) == label);
            }
            seen += idx.len();
            loss_sum += value * idx.len() as f64;

            let store = net.store_mut();
            store.clear_grads();
            tape.backward(loss, store)?;
            clip_grad_norm(store, ParamGroup::Weight, opt.grad_clip);
            sgd_step(store, ParamGroup::Weight, &mut state, lr, opt.momentum, opt.weight_decay)?;
            net.update_running(&observed);
        }
        net.store_mut().clear_grads();
        let accuracy = correct as f64 / seen.max(1) as f64;
        let loss = loss_sum / seen.max(1) as f64;
        log::info!("train epoch {epoch}: lr {lr:.5} loss {loss:.4} accuracy {accuracy:.4}");
        report.log.push(TrainLogRow { epoch, lr, loss, accuracy });
        if accuracy > report.best_accuracy {
            report.best_accuracy = accuracy;
            report.best_epoch = Some(epoch);
            best = Some((net.store().clone(), net.running().clone()));
        }
    }
    if let Some((store, running)) = best {
        *net.store_mut() = store;
        *net.running_mut() = running;
    }
    if report.best_epoch.is_none() {
        report.best_accuracy = 0.0;
    }
    Ok(report)
}

/// Identification accuracy in evaluation mode.
pub fn accuracy<F: Scalar>(net: &DiscreteNet<F>, data: &WindowSet, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch::<F>(chunk);
        let mut tape = Tape::new();
        let (out, _) = net.forward(&mut tape, &batch.x, Phase::Eval)?;
        let classes = net.config().num_classes;
        for (row, &label) in tape.value(out.logits).data().chunks(classes).zip(&batch.labels) {
            correct += usize::from(argmax(row) == label);
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}
