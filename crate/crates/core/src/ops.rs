//! The candidate operation vocabulary and the softmax-mixed edge operation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Builder, Ctx, NormLayer, ReluConvNorm};
use crate::tape::Var;
use crate::tensor::{ParamId, Scalar};

/// Candidate operations, in the fixed order used to index architecture logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    None,
    SkipConnect,
    MaxPool3,
    AvgPool3,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
}

pub const VOCAB: [OpKind; 8] = [
    OpKind::None,
    OpKind::SkipConnect,
    OpKind::MaxPool3,
    OpKind::AvgPool3,
    OpKind::SepConv3,
    OpKind::SepConv5,
    OpKind::DilConv3,
    OpKind::DilConv5,
];

pub const NUM_OPS: usize = VOCAB.len();

impl OpKind {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        VOCAB.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3 => "max_pool_3",
            OpKind::AvgPool3 => "avg_pool_3",
            OpKind::SepConv3 => "sep_conv_3",
            OpKind::SepConv5 => "sep_conv_5",
            OpKind::DilConv3 => "dil_conv_3",
            OpKind::DilConv5 => "dil_conv_5",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3 | OpKind::SepConv5 | OpKind::DilConv3 | OpKind::DilConv5
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VOCAB
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Genotype(format!("unknown operation {s:?}")))
    }
}

pub fn vocab_names() -> Vec<String> {
    VOCAB.iter().map(|op| op.name().to_string()).collect()
}

/// Depthwise conv, pointwise conv, normalization; preceded by a ReLU.
#[derive(Clone, Debug, PartialEq)]
struct DwStage {
    depthwise: ParamId,
    pointwise: ParamId,
    norm: NormLayer,
    stride: usize,
    dilation: usize,
}

impl DwStage {
    fn build<F: Scalar>(b: &mut Builder<'_, F>, name: &str, c: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        DwStage {
            depthwise: b.conv(format!("{name}.dw"), c, 1, kernel),
            pointwise: b.conv(format!("{name}.pw"), c, c, 1),
            norm: b.norm(&format!("{name}.norm"), c),
            stride,
            dilation,
        }
    }

    fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x);
        let dw = ctx.param(self.depthwise);
        let pw = ctx.param(self.pointwise);
        let h = ctx.tape.separable_conv1d(h, dw, pw, self.stride, self.dilation)?;
        self.norm.forward(ctx, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum OpBody {
    Zero,
    Identity,
    Project(ReluConvNorm),
    MaxPool,
    AvgPool,
    Stages(Vec<DwStage>),
}

/// One candidate operation on an edge, with its own weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateOp {
    kind: OpKind,
    stride: usize,
    channels: usize,
    body: OpBody,
}

impl CandidateOp {
    pub fn build<F: Scalar>(b: &mut Builder<'_, F>, name: &str, kind: OpKind, channels: usize, stride: usize) -> Self {
        let c = channels;
        let name = format!("{name}.{}", kind.name());
        let body = match kind {
            OpKind::None => OpBody::Zero,
            OpKind::SkipConnect if stride == 1 => OpBody::Identity,
            OpKind::SkipConnect => OpBody::Project(b.relu_conv_norm(&name, c, c, stride)),
            OpKind::MaxPool3 => OpBody::MaxPool,
            OpKind::AvgPool3 => OpBody::AvgPool,
            OpKind::SepConv3 | OpKind::SepConv5 => {
                let k = if kind == OpKind::SepConv3 { 3 } else { 5 };
                OpBody::Stages(vec![
                    DwStage::build(b, &format!("{name}.0"), c, k, stride, 1),
                    DwStage::build(b, &format!("{name}.1"), c, k, 1, 1),
                ])
            }
            OpKind::DilConv3 | OpKind::DilConv5 => {
                let k = if kind == OpKind::DilConv3 { 3 } else { 5 };
                OpBody::Stages(vec![DwStage::build(b, &format!("{name}.0"), c, k, stride, 2)])
            }
        };
        CandidateOp {
            kind,
            stride,
            channels,
            body,
        }
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![input[0], self.channels, input[2].div_ceil(self.stride)]
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::shape(
                "candidate_op",
                format!("{} expects {} channels, got {shape:?}", self.kind, self.channels),
            ));
        }
        match &self.body {
            OpBody::Zero => Ok(ctx.tape.zeros(&self.output_shape(&shape))),
            OpBody::Identity => Ok(x),
            OpBody::Project(p) => p.forward(ctx, x),
            OpBody::MaxPool => ctx.tape.max_pool1d(x, 3, self.stride),
            OpBody::AvgPool => ctx.tape.avg_pool1d(x, 3, self.stride),
            OpBody::Stages(stages) => {
                let mut h = x;
                for s in stages {
                    h = s.forward(ctx, h)?;
                }
                Ok(h)
            }
        }
    }
}

/// All candidates of one edge, in [`VOCAB`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedOp {
    candidates: Vec<CandidateOp>,
}

impl MixedOp {
    pub fn build<F: Scalar>(b: &mut Builder<'_, F>, name: &str, channels: usize, stride: usize) -> Self {
        MixedOp {
            candidates: VOCAB
                .iter()
                .map(|&k| CandidateOp::build(b, name, k, channels, stride))
                .collect(),
        }
    }

    pub fn candidates(&self) -> &[CandidateOp] {
        &self.candidates
    }

    pub fn candidate(&self, kind: OpKind) -> &CandidateOp {
        &self.candidates[kind.index()]
    }

    /// `sum_o softmax(alpha_row)_o * o(x)` for a `[NUM_OPS]` logit row.
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var, alpha_row: Var) -> Result<Var> {
        let row = ctx.tape.value(alpha_row);
        if row.numel() != NUM_OPS {
            return Err(Error::shape(
                "mixed_op",
                format!("alpha row has {} entries, vocabulary has {NUM_OPS}", row.numel()),
            ));
        }
        if !row.is_finite() {
            return Err(Error::NonFinite("architecture logits".into()));
        }
        let weights = ctx.tape.softmax(alpha_row, 0)?;
        self.forward_weighted(ctx, x, weights, 0)
    }

    /// Mixes candidates with already-normalized weights `weights[offset + o]`.
    pub fn forward_weighted<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var, weights: Var, offset: usize) -> Result<Var> {
        let terms = self.weighted_terms(ctx, x, offset)?;
        ctx.tape.weighted_sum(&terms, weights)
    }

    /// Candidate outputs paired with their weight index. The zero op is left
    /// out: its term contributes nothing to the sum or to any gradient.
    pub(crate) fn weighted_terms<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var, offset: usize) -> Result<Vec<(Var, usize)>> {
        let mut terms = Vec::with_capacity(NUM_OPS - 1);
        for op in self.candidates.iter().filter(|op| op.kind != OpKind::None) {
            terms.push((op.forward(ctx, x)?, offset + op.kind.index()));
        }
        Ok(terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_in_vocab_order() {
        for (i, op) in VOCAB.iter().enumerate() {
            assert_eq!(op.index(), i);
            assert_eq!(op.name().parse::<OpKind>().unwrap(), *op);
        }
        assert!("conv_7".parse::<OpKind>().is_err());
        assert_eq!(vocab_names()[4], "sep_conv_3");
    }

    #[test]
    fn parameter_free_ops_are_flagged() {
        assert!(!OpKind::SkipConnect.has_params());
        assert!(!OpKind::MaxPool3.has_params());
        assert!(OpKind::DilConv5.has_params());
    }
}

