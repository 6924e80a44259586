//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value, its inputs and
//! whatever it needs for the backward pass. Since a node can only reference
//! nodes created before it, replaying the record in reverse is a valid
//! topological order. Leaves created with [`Tape::param`] remember their
//! [`ParamId`]; [`Tape::backward`] adds their gradients into the store.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{ParamId, ParamStore, Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyper-parameters. Padding is always symmetric
/// `dilation * (kernel - 1) / 2`, so stride 1 preserves length and stride 2
/// yields `ceil(len / 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            groups,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 1, 1)
    }
}

/// Where a normalization layer takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, F> {
    /// Mean and biased variance of the current batch.
    Batch,
    /// Frozen per-channel statistics (evaluation mode).
    Fixed { mean: &'a [F], var: &'a [F] },
}

#[derive(Debug)]
enum Op<F> {
    Leaf(Option<ParamId>),
    Add(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleBy { x: Var, s: Var, index: usize },
    WeightedSum { terms: Vec<(Var, usize)>, weights: Var },
    ScaleSamples { x: Var, factors: Vec<F> },
    Concat(Vec<Var>),
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeom },
    Relu(Var),
    Norm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
        mean: Vec<F>,
        var: Vec<F>,
    },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize)> {
    match *t {
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::shape(op, format!("expected [batch, channels, time], got {t:?}"))),
    }
}

/// Splits a shape around `axis` into (outer, axis, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics computed by a normalization node, if it used them.
    pub fn norm_batch_stats(&self, v: Var) -> Option<(&[F], &[F])> {
        match &self.nodes[v.0].op {
            Op::Norm {
                batch_stats: true,
                mean,
                var,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(shape: &[usize], data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape.to_vec(), data).expect("primitive produced a consistent shape")
    }

    /// Records a parameter leaf; gradients flow back into `store` on backward.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let t = store.tensor(id);
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf(Some(id)),
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, mut value: Tensor<F>) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf(None),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Elementwise sum of equally shaped inputs.
    pub fn add(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("add", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        let mut data = self.value(first).data().to_vec();
        for &v in &inputs[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape(
                    "add",
                    format!("{:?} vs {:?}", shape, self.shape(v)),
                ));
            }
            data.iter_mut()
                .zip(self.value(v).data())
                .for_each(|(a, &b)| *a += b);
        }
        Ok(self.push(Self::out(&shape, data), Op::Add(inputs.to_vec()), inputs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::out(&shape, data), Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::out(&shape, data), Op::Scale(x, c), &[x])
    }

    /// Multiplies `x` by the single element `s[index]`.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let n = self.value(s).numel();
        if index >= n {
            return Err(Error::shape("scale_by", format!("index {index} outside {n} elements")));
        }
        let c = self.value(s).data()[index];
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::out(&shape, data), Op::ScaleBy { x, s, index }, &[x, s]))
    }

    /// `sum_k weights[idx_k] * x_k` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, usize)], weights: Var) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::shape("weighted_sum", "no terms"))?;
        let shape = self.shape(first).to_vec();
        let wn = self.value(weights).numel();
        let mut data = vec![F::zero(); self.value(first).numel()];
        for &(v, idx) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{:?} vs {:?}", shape, self.shape(v)),
                ));
            }
            if idx >= wn {
                return Err(Error::shape("weighted_sum", format!("weight index {idx} outside {wn}")));
            }
            let c = self.value(weights).data()[idx];
            data.iter_mut()
                .zip(self.value(v).data())
                .for_each(|(a, &b)| *a += c * b);
        }
        let mut inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        inputs.push(weights);
        Ok(self.push(
            Self::out(&shape, data),
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
            &inputs,
        ))
    }

    /// Multiplies every sample (leading axis) by its own constant factor.
    pub fn scale_samples(&mut self, x: Var, factors: Vec<F>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if factors.len() != shape[0] {
            return Err(Error::shape(
                "scale_samples",
                format!("{} factors for batch {}", factors.len(), shape[0]),
            ));
        }
        let per = self.value(x).numel() / shape[0];
        let data = self
            .value(x)
            .data()
            .chunks(per)
            .zip(&factors)
            .flat_map(|(row, &f)| row.iter().map(move |&v| v * f))
            .collect();
        Ok(self.push(Self::out(&shape, data), Op::ScaleSamples { x, factors }, &[x]))
    }

    /// Concatenation along the channel axis of `[batch, channels, time]` inputs.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (b, _, l) = dims3("concat", self.shape(first))?;
        let mut total = 0;
        for &v in inputs {
            let (bv, cv, lv) = dims3("concat", self.shape(v))?;
            if bv != b || lv != l {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(v)),
                ));
            }
            total += cv;
        }
        let mut data = Vec::with_capacity(b * total * l);
        for bi in 0..b {
            for &v in inputs {
                let c = self.shape(v)[1];
                data.extend_from_slice(&self.value(v).data()[bi * c * l..(bi + 1) * c * l]);
            }
        }
        Ok(self.push(Self::out(&[b, total, l], data), Op::Concat(inputs.to_vec()), inputs))
    }

    /// 1-D convolution, weight `[out, in / groups, kernel]`, odd kernel.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (b, cin, l) = dims3("conv1d", self.shape(x))?;
        let wshape = self.shape(w).to_vec();
        let [cout, cin_g, k] = wshape[..] else {
            return Err(Error::shape("conv1d", format!("weight must be 3-D, got {wshape:?}")));
        };
        if k % 2 == 0 {
            return Err(Error::shape("conv1d", format!("kernel length {k} must be odd")));
        }
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
            return Err(Error::shape(
                "conv1d",
                format!("input channels {cin}, weight {wshape:?}, groups {}", spec.groups),
            ));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidArgument("conv1d stride and dilation must be positive".into()));
        }
        let padding = spec.dilation * (k - 1) / 2;
        let lo = kernels::conv_out_len(l, k, spec.stride, spec.dilation, padding)
            .ok_or_else(|| Error::shape("conv1d", format!("input length {l} shorter than kernel span")))?;
        let geom = ConvGeom {
            batch: b,
            in_channels: cin,
            out_channels: cout,
            groups: spec.groups,
            kernel: k,
            stride: spec.stride,
            dilation: spec.dilation,
            padding,
            in_len: l,
            out_len: lo,
        };
        let mut y = vec![F::zero(); b * cout * lo];
        kernels::conv1d_forward(&geom, self.value(x).data(), self.value(w).data(), &mut y);
        Ok(self.push(Self::out(&[b, cout, lo], y), Op::Conv1d { x, w, geom }, &[x, w]))
    }

    /// Depthwise convolution followed by a pointwise (1x1) projection.
    pub fn separable_conv1d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        let h = self.conv1d(x, depthwise, ConvSpec::new(stride, dilation, c))?;
        self.conv1d(h, pointwise, ConvSpec::default())
    }

    fn pool_geom(&self, op: &'static str, x: Var, kernel: usize, stride: usize) -> Result<(PoolGeom, [usize; 3])> {
        let (b, c, l) = dims3(op, self.shape(x))?;
        if kernel.is_multiple_of(2) || stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: kernel {kernel} stride {stride}")));
        }
        let padding = (kernel - 1) / 2;
        let lo = kernels::conv_out_len(l, kernel, stride, 1, padding)
            .ok_or_else(|| Error::shape(op, format!("length {l} shorter than window")))?;
        Ok((
            PoolGeom {
                rows: b * c,
                kernel,
                stride,
                padding,
                in_len: l,
                out_len: lo,
            },
            [b, c, lo],
        ))
    }

    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, shape) = self.pool_geom("max_pool1d", x, kernel, stride)?;
        let mut y = vec![F::zero(); shape.iter().product()];
        let argmax = kernels::max_pool_forward(&geom, self.value(x).data(), &mut y);
        Ok(self.push(Self::out(&shape, y), Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, shape) = self.pool_geom("avg_pool1d", x, kernel, stride)?;
        let mut y = vec![F::zero(); shape.iter().product()];
        kernels::avg_pool_forward(&geom, self.value(x).data(), &mut y);
        Ok(self.push(Self::out(&shape, y), Op::AvgPool { x, geom }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::out(&shape, data), Op::Relu(x), &[x])
    }

    /// Per-channel normalization of `[batch, channels, time]` with an optional
    /// learnable `(scale, shift)` pair of shape `[channels]`.
    pub fn batch_norm(&mut self, x: Var, affine: Option<(Var, Var)>, stats: NormStats<'_, F>) -> Result<Var> {
        let (b, c, l) = dims3("batch_norm", self.shape(x))?;
        if let Some((g, s)) = affine {
            if self.value(g).numel() != c || self.value(s).numel() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine params {:?}/{:?} for {c} channels", self.shape(g), self.shape(s)),
                ));
            }
        }
        let xs = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let (m, v) = kernels::channel_stats(xs, b, c, l);
                (m, v, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", format!("running stats for {} channels, need {c}", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let eps = F::lit(NORM_EPS);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                for t in 0..l {
                    xhat[base + t] = (xs[base + t] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let y = match affine {
            Some((g, s)) => {
                let (gd, sd) = (self.value(g).data(), self.value(s).data());
                let mut y = xhat.clone();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * l;
                        for v in &mut y[base..base + l] {
                            *v = *v * gd[ci] + sd[ci];
                        }
                    }
                }
                y
            }
            None => xhat.clone(),
        };
        let mut inputs = vec![x];
        if let Some((g, s)) = affine {
            inputs.extend([g, s]);
        }
        Ok(self.push(
            Self::out(&[b, c, l], y),
            Op::Norm {
                x,
                affine,
                xhat,
                inv_std,
                batch_stats,
                mean,
                var,
            },
            &inputs,
        ))
    }

    /// Mean over the time axis: `[batch, channels, time] -> [batch, channels]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, l) = dims3("global_avg_pool", self.shape(x))?;
        let n = F::lit(l as f64);
        let data = self
            .value(x)
            .data()
            .chunks(l)
            .map(|row| row.iter().copied().sum::<F>() / n)
            .collect();
        Ok(self.push(Self::out(&[b, c], data), Op::GlobalAvgPool(x), &[x]))
    }

    /// `x W^T + b` with `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[bn, fin], &[fout, win]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        };
        if fin != win {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(bias) = b {
            if self.value(bias).numel() != fout {
                return Err(Error::shape("linear", format!("bias {:?} for {fout} outputs", self.shape(bias))));
            }
        }
        let mut y = vec![F::zero(); bn * fout];
        if let Some(bias) = b {
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(self.value(bias).data());
            }
        }
        // SAFETY: x is [bn, fin] row-major, W^T is read through strides (1, fin),
        // y is a fresh [bn, fout] buffer.
        unsafe {
            F::gemm(
                bn,
                fin,
                fout,
                F::one(),
                self.value(x).data().as_ptr(),
                fin as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                fin as isize,
                F::one(),
                y.as_mut_ptr(),
                fout as isize,
                1,
            );
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Self::out(&[bn, fout], y), Op::Linear { x, w, b }, &inputs))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let data = softmax_along(self.value(x).data(), &shape, axis, false);
        Ok(self.push(Self::out(&shape, data), Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("log_softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let data = softmax_along(self.value(x).data(), &shape, axis, true);
        Ok(self.push(Self::out(&shape, data), Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, k] = shape[..] else {
            return Err(Error::shape("cross_entropy", format!("logits must be [batch, classes], got {shape:?}")));
        };
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} labels for batch {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::shape("cross_entropy", format!("label {bad} outside {k} classes")));
        }
        let logp = softmax_along(self.value(logits).data(), &shape, 1, true);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -logp[i * k + y])
            .sum::<F>()
            / F::lit(b as f64);
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Propagates gradients from the scalar `loss` and adds them into the
    /// gradient buffers of every parameter leaf in `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf(Some(id)) => store.tensor_mut(*id).accumulate_grad(&g),
                Op::Leaf(None) => {}
                _ => self.backward_node(i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf(_) => {}
            Op::Add(inputs) => {
                for &v in inputs {
                    if needs(v) {
                        grad_slot(grads, nodes, v).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    let bv = val(b);
                    grad_slot(grads, nodes, a).iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&gg, &y))| *d += gg * y);
                }
                if needs(b) {
                    let av = val(a);
                    grad_slot(grads, nodes, b).iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&gg, &x))| *d += gg * x);
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let c = *c;
                    grad_slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * c);
                }
            }
            Op::ScaleBy { x, s, index } => {
                let c = val(*s)[*index];
                if needs(*s) {
                    let dot: F = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum();
                    grad_slot(grads, nodes, *s)[*index] += dot;
                }
                if needs(*x) {
                    grad_slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * c);
                }
            }
            Op::WeightedSum { terms, weights } => {
                let w = val(*weights).to_vec();
                for &(v, idx) in terms {
                    if needs(*weights) {
                        let dot: F = g.iter().zip(val(v)).map(|(&a, &b)| a * b).sum();
                        grad_slot(grads, nodes, *weights)[idx] += dot;
                    }
                    if needs(v) {
                        let c = w[idx];
                        grad_slot(grads, nodes, v).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * c);
                    }
                }
            }
            Op::ScaleSamples { x, factors } => {
                if needs(*x) {
                    let per = g.len() / factors.len();
                    let dx = grad_slot(grads, nodes, *x);
                    for (bi, &f) in factors.iter().enumerate() {
                        for j in bi * per..(bi + 1) * per {
                            dx[j] += g[j] * f;
                        }
                    }
                }
            }
            Op::Concat(inputs) => {
                let shape = nodes[i].value.shape();
                let (b, total, l) = (shape[0], shape[1], shape[2]);
                let mut c0 = 0;
                for &v in inputs {
                    let c = nodes[v.0].value.shape()[1];
                    if needs(v) {
                        let dx = grad_slot(grads, nodes, v);
                        for bi in 0..b {
                            let src = &g[(bi * total + c0) * l..(bi * total + c0 + c) * l];
                            dx[bi * c * l..(bi + 1) * c * l]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    c0 += c;
                }
            }
            Op::Conv1d { x, w, geom } => {
                let (x, w) = (*x, *w);
                let xv = val(x);
                let wv = val(w);
                // Take both buffers out so they can be borrowed mutably together.
                let mut dx = needs(x).then(|| {
                    let n = xv.len();
                    grads[x.0].take().unwrap_or_else(|| vec![F::zero(); n])
                });
                let mut dw = needs(w).then(|| {
                    let n = wv.len();
                    grads[w.0].take().unwrap_or_else(|| vec![F::zero(); n])
                });
                kernels::conv1d_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                if needs(*x) {
                    let dx = grad_slot(grads, nodes, *x);
                    for (&src, &gg) in argmax.iter().zip(g) {
                        dx[src] += gg;
                    }
                }
            }
            Op::AvgPool { x, geom } => {
                if needs(*x) {
                    kernels::avg_pool_backward(geom, g, grad_slot(grads, nodes, *x));
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let y = nodes[i].value.data();
                    grad_slot(grads, nodes, *x)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (&gg, &yy))| {
                            if yy > F::zero() {
                                *d += gg
                            }
                        });
                }
            }
            Op::Norm {
                x,
                affine,
                xhat,
                inv_std,
                batch_stats,
                ..
            } => {
                let shape = nodes[i].value.shape();
                let (b, c, l) = (shape[0], shape[1], shape[2]);
                let gamma = affine.map(|(gm, _)| val(gm).to_vec());
                if let Some((gm, sh)) = *affine {
                    if needs(gm) || needs(sh) {
                        let mut dg = vec![F::zero(); c];
                        let mut ds = vec![F::zero(); c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * l;
                                for t in 0..l {
                                    dg[ci] += g[base + t] * xhat[base + t];
                                    ds[ci] += g[base + t];
                                }
                            }
                        }
                        if needs(gm) {
                            grad_slot(grads, nodes, gm).iter_mut().zip(&dg).for_each(|(d, &v)| *d += v);
                        }
                        if needs(sh) {
                            grad_slot(grads, nodes, sh).iter_mut().zip(&ds).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                if needs(*x) {
                    let n = F::lit((b * l) as f64);
                    let dx = grad_slot(grads, nodes, *x);
                    for ci in 0..c {
                        let scale = gamma.as_ref().map_or(F::one(), |gm| gm[ci]);
                        if *batch_stats {
                            let mut sum_g = F::zero();
                            let mut sum_gx = F::zero();
                            for bi in 0..b {
                                let base = (bi * c + ci) * l;
                                for t in 0..l {
                                    let dxh = g[base + t] * scale;
                                    sum_g += dxh;
                                    sum_gx += dxh * xhat[base + t];
                                }
                            }
                            let k = inv_std[ci] / n;
                            for bi in 0..b {
                                let base = (bi * c + ci) * l;
                                for t in 0..l {
                                    let dxh = g[base + t] * scale;
                                    dx[base + t] += k * (n * dxh - sum_g - xhat[base + t] * sum_gx);
                                }
                            }
                        } else {
                            let k = scale * inv_std[ci];
                            for bi in 0..b {
                                let base = (bi * c + ci) * l;
                                for t in 0..l {
                                    dx[base + t] += g[base + t] * k;
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if needs(*x) {
                    let l = nodes[x.0].value.shape()[2];
                    let inv = F::one() / F::lit(l as f64);
                    for (row, &gg) in grad_slot(grads, nodes, *x).chunks_mut(l).zip(g) {
                        row.iter_mut().for_each(|d| *d += gg * inv);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let xs = nodes[x.0].value.shape();
                let (bn, fin) = (xs[0], xs[1]);
                let fout = nodes[w.0].value.shape()[0];
                if needs(x) {
                    let wv = val(w);
                    let dx = grad_slot(grads, nodes, x);
                    // SAFETY: dy [bn, fout] times W [fout, fin] into dx [bn, fin].
                    unsafe {
                        F::gemm(
                            bn,
                            fout,
                            fin,
                            F::one(),
                            g.as_ptr(),
                            fout as isize,
                            1,
                            wv.as_ptr(),
                            fin as isize,
                            1,
                            F::one(),
                            dx.as_mut_ptr(),
                            fin as isize,
                            1,
                        );
                    }
                }
                if needs(w) {
                    let xv = val(x);
                    let dw = grad_slot(grads, nodes, w);
                    // SAFETY: dy^T [fout, bn] times x [bn, fin] into dW [fout, fin].
                    unsafe {
                        F::gemm(
                            fout,
                            bn,
                            fin,
                            F::one(),
                            g.as_ptr(),
                            1,
                            fout as isize,
                            xv.as_ptr(),
                            fin as isize,
                            1,
                            F::one(),
                            dw.as_mut_ptr(),
                            fin as isize,
                            1,
                        );
                    }
                }
                if let Some(bias) = *b {
                    if needs(bias) {
                        let db = grad_slot(grads, nodes, bias);
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let y = nodes[i].value.data();
                    let (outer, n, inner) = axis_split(nodes[i].value.shape(), *axis);
                    let dx = grad_slot(grads, nodes, *x);
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + r;
                            let dot: F = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                if needs(*x) {
                    let y = nodes[i].value.data();
                    let (outer, n, inner) = axis_split(nodes[i].value.shape(), *axis);
                    let dx = grad_slot(grads, nodes, *x);
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + r;
                            let total: F = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(*logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / F::lit(b as f64);
                    let dx = grad_slot(grads, nodes, *logits);
                    for (bi, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { F::one() } else { F::zero() };
                            dx[bi * k + j] += scale * (probs[bi * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let gg = g[0];
                    grad_slot(grads, nodes, *x).iter_mut().for_each(|d| *d += gg);
                }
            }
        }
    }
}

fn grad_slot<'g, F: Scalar>(grads: &'g mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'g mut [F] {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n]).as_mut_slice()
}

/// Numerically stable (log-)softmax along one axis.
pub(crate) fn softmax_along<F: Scalar>(x: &[F], shape: &[usize], axis: usize, log: bool) -> Vec<F> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + r;
            let m = (0..n).map(|j| x[idx(j)]).fold(F::neg_infinity(), F::max);
            let z: F = (0..n).map(|j| (x[idx(j)] - m).exp()).sum();
            let lz = z.ln();
            for j in 0..n {
                y[idx(j)] = if log {
                    x[idx(j)] - m - lz
                } else {
                    (x[idx(j)] - m).exp() / z
                };
            }
        }
    }
    y
}
