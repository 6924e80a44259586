//! Forward-pass context, parameter construction and normalization layers
//! shared by the supernet and the discrete networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{ConvSpec, NormStats, Tape, Var};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Tensor};

/// Momentum of the running-statistics update.
pub const RUNNING_MOMENTUM: f64 = 0.1;

/// How normalization layers obtain their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Current-batch statistics, nothing recorded (architecture search).
    Batch,
    /// Current-batch statistics, recorded for the running averages (training).
    Track,
    /// Frozen running statistics (evaluation).
    Running,
}

/// Per-layer running mean and variance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl RunningStats {
    pub fn register(&mut self, channels: usize) -> usize {
        self.mean.push(vec![0.0; channels]);
        self.var.push(vec![1.0; channels]);
        self.mean.len() - 1
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn update<F: Scalar>(&mut self, slot: usize, mean: &[F], var: &[F]) {
        let m = RUNNING_MOMENTUM;
        for (r, &b) in self.mean[slot].iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b.to_f64().unwrap_or(f64::NAN);
        }
        for (r, &b) in self.var[slot].iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b.to_f64().unwrap_or(f64::NAN);
        }
    }
}

/// Drop-path settings for one training forward pass.
pub struct DropPathCtx<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Everything a module needs during one forward pass.
pub struct Ctx<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    pub params: &'a ParamStore<F>,
    pub norm: NormMode,
    pub running: Option<&'a RunningStats>,
    pub drop_path: Option<DropPathCtx<'a>>,
    observed: Vec<(usize, Vec<F>, Vec<F>)>,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, params: &'a ParamStore<F>, norm: NormMode) -> Self {
        Ctx {
            tape,
            params,
            norm,
            running: None,
            drop_path: None,
            observed: Vec::new(),
        }
    }

    pub fn with_running(mut self, running: &'a RunningStats) -> Self {
        self.running = Some(running);
        self
    }

    pub fn with_drop_path(mut self, p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.drop_path = Some(DropPathCtx { p, rng });
        }
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    /// Batch statistics recorded in [`NormMode::Track`], keyed by layer slot.
    pub fn take_observed(&mut self) -> Vec<(usize, Vec<F>, Vec<F>)> {
        std::mem::take(&mut self.observed)
    }
}

/// Per-channel normalization with optional learnable scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub affine: Option<(ParamId, ParamId)>,
    pub slot: usize,
    pub channels: usize,
}

impl NormLayer {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let affine = self.affine.map(|(g, b)| (ctx.param(g), ctx.param(b)));
        match ctx.norm {
            NormMode::Batch => ctx.tape.batch_norm(x, affine, NormStats::Batch),
            NormMode::Track => {
                let y = ctx.tape.batch_norm(x, affine, NormStats::Batch)?;
                if let Some((m, v)) = ctx.tape.norm_batch_stats(y) {
                    let (m, v) = (m.to_vec(), v.to_vec());
                    ctx.observed.push((self.slot, m, v));
                }
                Ok(y)
            }
            NormMode::Running => {
                let running = ctx.running.expect("running statistics required in evaluation mode");
                let mean: Vec<F> = running.mean[self.slot].iter().map(|&v| F::lit(v)).collect();
                let var: Vec<F> = running.var[self.slot].iter().map(|&v| F::lit(v)).collect();
                ctx.tape.batch_norm(x, affine, NormStats::Fixed { mean: &mean, var: &var })
            }
        }
    }
}

/// ReLU, 1x1 convolution (optionally strided), normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluConvNorm {
    pub weight: ParamId,
    pub stride: usize,
    pub norm: NormLayer,
}

impl ReluConvNorm {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x);
        let w = ctx.param(self.weight);
        let h = ctx.tape.conv1d(h, w, ConvSpec::new(self.stride, 1, 1))?;
        self.norm.forward(ctx, h)
    }
}

/// Allocates parameters and normalization slots while a network is built.
pub struct Builder<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub running: &'a mut RunningStats,
    pub rng: &'a mut ChaCha8Rng,
    /// Whether normalization layers get learnable scale and shift.
    pub affine: bool,
}

impl<'a, F: Scalar> Builder<'a, F> {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound)));
        self.store.add(name, ParamGroup::Weight, t)
    }

    pub fn conv(&mut self, name: String, out_ch: usize, in_per_group: usize, kernel: usize) -> ParamId {
        self.uniform(name, &[out_ch, in_per_group, kernel], in_per_group * kernel)
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> NormLayer {
        self.norm_with(name, channels, self.affine)
    }

    pub fn norm_with(&mut self, name: &str, channels: usize, affine: bool) -> NormLayer {
        let affine = affine.then(|| {
            let g = self
                .store
                .add(format!("{name}.scale"), ParamGroup::Weight, Tensor::full(&[channels], F::one()));
            let b = self
                .store
                .add(format!("{name}.shift"), ParamGroup::Weight, Tensor::zeros(&[channels]));
            (g, b)
        });
        NormLayer {
            affine,
            slot: self.running.register(channels),
            channels,
        }
    }

    pub fn relu_conv_norm(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> ReluConvNorm {
        ReluConvNorm {
            weight: self.conv(format!("{name}.conv"), c_out, c_in, 1),
            stride,
            norm: self.norm(&format!("{name}.norm"), c_out),
        }
    }
}
