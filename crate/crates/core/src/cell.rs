//! Cell topology: two inputs, four intermediate nodes, one concatenated output.
//!
//! Nodes are numbered `0` and `1` for the inputs (outputs of cells `i-2` and
//! `i-1`) and `2..6` for the intermediate nodes. Intermediate node `2 + j`
//! receives one edge from every earlier node, giving `2 + 3 + 4 + 5 = 14`
//! edges per cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::CellGenotype;
use crate::layers::{Builder, Ctx, ReluConvNorm};
use crate::ops::{CandidateOp, MixedOp, OpKind, NUM_OPS};
use crate::tape::Var;
use crate::tensor::Scalar;
use crate::train::drop_path;

pub const NUM_INPUTS: usize = 2;
pub const NUM_INTERMEDIATE: usize = 4;
pub const NUM_EDGES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn letter(self) -> char {
        match self {
            CellKind::Normal => 'N',
            CellKind::Reduction => 'R',
        }
    }
}

/// Static description of a cell's DAG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub num_intermediate: usize,
    /// `(from_node, to_node)` in edge-index order.
    pub edges: Vec<(usize, usize)>,
}

impl CellSpec {
    pub fn new(kind: CellKind) -> Self {
        let edges = (0..NUM_INTERMEDIATE)
            .flat_map(|j| (0..NUM_INPUTS + j).map(move |from| (from, NUM_INPUTS + j)))
            .collect();
        CellSpec {
            kind,
            num_intermediate: NUM_INTERMEDIATE,
            edges,
        }
    }

    /// Index of the edge `from -> intermediate node j`.
    pub fn edge_index(j: usize, from: usize) -> usize {
        debug_assert!(from < NUM_INPUTS + j);
        NUM_INPUTS * j + j * (j.saturating_sub(1)) / 2 + from
    }

    /// Stride of an edge: reduction cells halve along edges leaving the inputs.
    pub fn stride(&self, from: usize) -> usize {
        if self.kind == CellKind::Reduction && from < NUM_INPUTS {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum EdgeOps {
    Mixed(MixedOp),
    Single(CandidateOp),
}

/// How a cell combines its candidate operations.
#[derive(Clone, Copy, Debug)]
pub enum CellMode<'g> {
    /// Every edge is a softmax mixture; `weights` holds `softmax(alpha)` as `[14, 8]`.
    Search { weights: Var },
    /// Only the edges retained by the genotype entry are evaluated.
    Discrete(&'g CellGenotype),
}

/// Input handling for one forward pass of a cell.
#[derive(Clone, Copy, Debug, Default)]
pub struct CellInputs {
    /// Gate coefficients `[g0, g1]`; `None` leaves the inputs unscaled.
    pub gates: Option<Var>,
    /// Inputs replaced by all-zero tensors.
    pub pruned: [bool; 2],
}

/// A cell with its preprocessing layers and edge operations.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    spec: CellSpec,
    channels: usize,
    pre0: ReluConvNorm,
    pre1: ReluConvNorm,
    edges: Vec<Option<EdgeOps>>,
}

impl Cell {
    fn preprocess<F: Scalar>(
        b: &mut Builder<'_, F>,
        name: &str,
        c_prev_prev: usize,
        c_prev: usize,
        channels: usize,
        reduction_prev: bool,
    ) -> (ReluConvNorm, ReluConvNorm) {
        let pre0 = b.relu_conv_norm(
            &format!("{name}.pre0"),
            c_prev_prev,
            channels,
            if reduction_prev { 2 } else { 1 },
        );
        let pre1 = b.relu_conv_norm(&format!("{name}.pre1"), c_prev, channels, 1);
        (pre0, pre1)
    }

    /// A search cell with all candidates on all 14 edges.
    pub fn build_search<F: Scalar>(
        b: &mut Builder<'_, F>,
        name: &str,
        kind: CellKind,
        c_prev_prev: usize,
        c_prev: usize,
        channels: usize,
        reduction_prev: bool,
    ) -> Self {
        let spec = CellSpec::new(kind);
        let (pre0, pre1) = Self::preprocess(b, name, c_prev_prev, c_prev, channels, reduction_prev);
        let edges = spec
            .edges
            .iter()
            .enumerate()
            .map(|(e, &(from, _))| {
                Some(EdgeOps::Mixed(MixedOp::build(
                    b,
                    &format!("{name}.edges.{e}"),
                    channels,
                    spec.stride(from),
                )))
            })
            .collect();
        Cell {
            spec,
            channels,
            pre0,
            pre1,
            edges,
        }
    }

    /// A discrete cell holding only the operations its genotype entry retains.
    pub fn build_discrete<F: Scalar>(
        b: &mut Builder<'_, F>,
        name: &str,
        genotype: &CellGenotype,
        c_prev_prev: usize,
        c_prev: usize,
        channels: usize,
        reduction_prev: bool,
    ) -> Self {
        let spec = CellSpec::new(genotype.kind);
        let (pre0, pre1) = Self::preprocess(b, name, c_prev_prev, c_prev, channels, reduction_prev);
        let mut edges: Vec<Option<EdgeOps>> = vec![None; NUM_EDGES];
        for (j, pair) in genotype.nodes.iter().enumerate() {
            for choice in pair {
                let e = CellSpec::edge_index(j, choice.from);
                edges[e] = Some(EdgeOps::Single(CandidateOp::build(
                    b,
                    &format!("{name}.edges.{e}"),
                    choice.op,
                    channels,
                    spec.stride(choice.from),
                )));
            }
        }
        Cell {
            spec,
            channels,
            pre0,
            pre1,
            edges,
        }
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn kind(&self) -> CellKind {
        self.spec.kind
    }

    /// Channels of each intermediate node.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn out_channels(&self) -> usize {
        self.channels * NUM_INTERMEDIATE
    }

    fn op_on(&self, e: usize, kind: OpKind) -> Result<&CandidateOp> {
        match &self.edges[e] {
            Some(EdgeOps::Mixed(m)) => Ok(m.candidate(kind)),
            Some(EdgeOps::Single(op)) if op.kind() == kind => Ok(op),
            _ => Err(Error::Genotype(format!(
                "edge {e} has no {kind} operation in this cell"
            ))),
        }
    }

    /// Runs the cell on the raw outputs of cells `i-2` (`s0`) and `i-1` (`s1`).
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut Ctx<'_, F>,
        s0: Var,
        s1: Var,
        inputs: CellInputs,
        mode: CellMode<'_>,
    ) -> Result<Var> {
        let pruned = inputs.pruned;
        if pruned[0] && pruned[1] {
            return Err(Error::InvalidArgument("both cell inputs pruned".into()));
        }
        let p0 = if pruned[0] { None } else { Some(self.pre0.forward(ctx, s0)?) };
        let p1 = if pruned[1] { None } else { Some(self.pre1.forward(ctx, s1)?) };
        if let (Some(a), Some(b)) = (p0, p1) {
            if ctx.tape.shape(a) != ctx.tape.shape(b) {
                return Err(Error::shape(
                    "cell_forward",
                    format!(
                        "preprocessed inputs differ: {:?} vs {:?}",
                        ctx.tape.shape(a),
                        ctx.tape.shape(b)
                    ),
                ));
            }
        }
        let gate = |ctx: &mut Ctx<'_, F>, p: Option<Var>, k: usize| -> Result<Option<Var>> {
            match (p, inputs.gates) {
                (Some(v), Some(g)) => Ok(Some(ctx.tape.scale_by(v, g, k)?)),
                (p, _) => Ok(p),
            }
        };
        let p0 = gate(ctx, p0, 0)?;
        let p1 = gate(ctx, p1, 1)?;
        let shape = ctx.tape.shape(p0.or(p1).expect("one input survives")).to_vec();
        let p0 = p0.unwrap_or_else(|| ctx.tape.zeros(&shape));
        let p1 = p1.unwrap_or_else(|| ctx.tape.zeros(&shape));

        let mut states = vec![p0, p1];
        for j in 0..NUM_INTERMEDIATE {
            let node = match mode {
                CellMode::Search { weights } => {
                    let mut terms = Vec::new();
                    for from in 0..NUM_INPUTS + j {
                        let e = CellSpec::edge_index(j, from);
                        let Some(EdgeOps::Mixed(m)) = &self.edges[e] else {
                            return Err(Error::InvalidArgument(
                                "search mode needs a search cell".into(),
                            ));
                        };
                        terms.extend(m.weighted_terms(ctx, states[from], e * NUM_OPS)?);
                    }
                    ctx.tape.weighted_sum(&terms, weights)?
                }
                CellMode::Discrete(g) => {
                    if g.kind != self.spec.kind || g.nodes.len() != NUM_INTERMEDIATE {
                        return Err(Error::Genotype("genotype entry does not match cell".into()));
                    }
                    let mut outs = Vec::with_capacity(2);
                    for choice in &g.nodes[j] {
                        if choice.from >= NUM_INPUTS + j {
                            return Err(Error::Genotype(format!(
                                "node {j} cannot read from node {}",
                                choice.from
                            )));
                        }
                        let op = self.op_on(CellSpec::edge_index(j, choice.from), choice.op)?;
                        let mut h = op.forward(ctx, states[choice.from])?;
                        if choice.op != OpKind::SkipConnect {
                            if let Some(dp) = ctx.drop_path.as_mut() {
                                h = drop_path(ctx.tape, h, dp.p, true, dp.rng)?;
                            }
                        }
                        outs.push(h);
                    }
                    ctx.tape.add(&outs)?
                }
            };
            states.push(node);
        }
        ctx.tape.concat(&states[NUM_INPUTS..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourteen_edges_from_earlier_nodes() {
        let spec = CellSpec::new(CellKind::Normal);
        assert_eq!(spec.edges.len(), NUM_EDGES);
        for (e, &(from, to)) in spec.edges.iter().enumerate() {
            assert!(from < to);
            assert_eq!(CellSpec::edge_index(to - NUM_INPUTS, from), e);
        }
    }

    #[test]
    fn reduction_strides_only_input_edges() {
        let spec = CellSpec::new(CellKind::Reduction);
        assert_eq!(spec.stride(0), 2);
        assert_eq!(spec.stride(1), 2);
        assert_eq!(spec.stride(2), 1);
        assert_eq!(CellSpec::new(CellKind::Normal).stride(0), 1);
    }
}
