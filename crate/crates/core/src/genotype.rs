//! Discrete architectures: derivation from learned logits, JSON and DOT export.
//!
//! Derivation rules:
//! - every edge is scored by its largest softmax weight over the non-`none`
//!   candidates, and labeled with that candidate;
//! - each intermediate node keeps its two best-scoring incoming edges;
//! - ties go to the lower source node, then to the lower operation index;
//! - a cell input is pruned when its gate coefficient is below the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::{CellKind, CellSpec, NUM_EDGES, NUM_INPUTS, NUM_INTERMEDIATE};
use crate::error::{Error, Result};
use crate::ops::{vocab_names, OpKind, NUM_OPS};

/// Absolute slack on the pruning comparison so that coefficients that are
/// mathematically equal to the threshold are not pruned by rounding.
pub const GATE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeChoice {
    #[serde(with = "op_name")]
    pub op: OpKind,
    pub from: usize,
}

mod op_name {
    use super::OpKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(op: &OpKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(op.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<OpKind, D::Error> {
        let name = String::deserialize(d)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub s0: f64,
    pub s1: f64,
    pub pruned: [bool; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub kind: CellKind,
    pub nodes: Vec<[EdgeChoice; 2]>,
    pub gates: GateDecision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub cells: Vec<CellGenotype>,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Learned architecture state of one cell, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct CellArchValues {
    pub kind: CellKind,
    /// `softmax`-free logits, `[14 * 8]` row-major.
    pub alpha: Vec<f64>,
    /// Gate coefficients `[g0, g1]`.
    pub gates: [f64; 2],
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Best non-`none` candidate of one logit row: `(op, weight)`.
fn best_op(row: &[f64]) -> (OpKind, f64) {
    let w = softmax(row);
    let mut best = 1;
    for k in 2..NUM_OPS {
        if w[k] > w[best] {
            best = k;
        }
    }
    (OpKind::from_index(best).expect("vocab index"), w[best])
}

/// Discretizes learned logits and gate coefficients; `threshold` is the gate
/// pruning level `c`.
pub fn derive_genotype(cells: &[CellArchValues], threshold: f64) -> Result<Genotype> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("gate threshold {threshold} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (ci, cell) in cells.iter().enumerate() {
        if cell.alpha.len() != NUM_EDGES * NUM_OPS {
            return Err(Error::shape(
                "derive_genotype",
                format!("cell {ci} has {} logits, expected {}", cell.alpha.len(), NUM_EDGES * NUM_OPS),
            ));
        }
        if cell.alpha.iter().any(|v| !v.is_finite()) || cell.gates.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("architecture state of cell {ci}")));
        }
        let mut nodes = Vec::with_capacity(NUM_INTERMEDIATE);
        for j in 0..NUM_INTERMEDIATE {
            let mut scored: Vec<(usize, OpKind, f64)> = (0..NUM_INPUTS + j)
                .map(|from| {
                    let e = CellSpec::edge_index(j, from);
                    let (op, w) = best_op(&cell.alpha[e * NUM_OPS..(e + 1) * NUM_OPS]);
                    (from, op, w)
                })
                .collect();
            // Stable sort keeps lower source nodes first among equal scores.
            scored.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores"));
            let mut keep = [scored[0], scored[1]];
            keep.sort_by_key(|c| c.0);
            nodes.push(keep.map(|(from, op, _)| EdgeChoice { op, from }));
        }
        let pruned = cell.gates.map(|g| g < threshold - GATE_TOLERANCE);
        if pruned[0] && pruned[1] {
            return Err(Error::DegenerateCell { cell: ci });
        }
        out.push(CellGenotype {
            kind: cell.kind,
            nodes,
            gates: GateDecision {
                s0: cell.gates[0],
                s1: cell.gates[1],
                pruned,
            },
        });
    }
    Ok(Genotype {
        cells: out,
        vocab: vocab_names(),
        meta: BTreeMap::new(),
    })
}

impl Genotype {
    /// Checks the structural invariants of a genotype.
    pub fn validate(&self) -> Result<()> {
        if self.vocab != vocab_names() {
            return Err(Error::Genotype(format!(
                "operation vocabulary {:?} does not match the engine's {:?}",
                self.vocab,
                vocab_names()
            )));
        }
        if self.cells.is_empty() {
            return Err(Error::Genotype("no cells".into()));
        }
        for (ci, cell) in self.cells.iter().enumerate() {
            if cell.nodes.len() != NUM_INTERMEDIATE {
                return Err(Error::Genotype(format!(
                    "cell {ci} has {} nodes, expected {NUM_INTERMEDIATE}",
                    cell.nodes.len()
                )));
            }
            for (j, pair) in cell.nodes.iter().enumerate() {
                for choice in pair {
                    if choice.op == OpKind::None {
                        return Err(Error::Genotype(format!("cell {ci} node {j} retains a none edge")));
                    }
                    if choice.from >= NUM_INPUTS + j {
                        return Err(Error::Genotype(format!(
                            "cell {ci} node {j} reads from later node {}",
                            choice.from
                        )));
                    }
                }
                if pair[0].from == pair[1].from {
                    return Err(Error::Genotype(format!("cell {ci} node {j} repeats source {}", pair[0].from)));
                }
            }
            if cell.gates.pruned[0] && cell.gates.pruned[1] {
                return Err(Error::DegenerateCell { cell: ci });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype =
            serde_json::from_str(text).map_err(|e| Error::Genotype(format!("parse error: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn kinds(&self) -> Vec<CellKind> {
        self.cells.iter().map(|c| c.kind).collect()
    }

    /// Graphviz description, one `digraph` per cell. Pruned inputs and the
    /// edges leaving them are omitted.
    pub fn to_dot(&self) -> String {
        let label = |n: usize| match n {
            0 => "s0".to_string(),
            1 => "s1".to_string(),
            n => format!("n{}", n - NUM_INPUTS),
        };
        let mut out = String::new();
        for (ci, cell) in self.cells.iter().enumerate() {
            let kind = match cell.kind {
                CellKind::Normal => "normal",
                CellKind::Reduction => "reduction",
            };
            writeln!(out, "digraph cell_{ci} {{").unwrap();
            writeln!(out, "  label=\"cell {ci} ({kind})\";").unwrap();
            writeln!(out, "  rankdir=LR;").unwrap();
            for (k, pruned) in cell.gates.pruned.iter().enumerate() {
                if !pruned {
                    let g = if k == 0 { cell.gates.s0 } else { cell.gates.s1 };
                    writeln!(out, "  {} [shape=box, label=\"{} ({g:.3})\"];", label(k), label(k)).unwrap();
                }
            }
            for j in 0..cell.nodes.len() {
                writeln!(out, "  {} [shape=circle];", label(NUM_INPUTS + j)).unwrap();
            }
            writeln!(out, "  out [shape=box];").unwrap();
            for (j, pair) in cell.nodes.iter().enumerate() {
                for choice in pair {
                    if choice.from < NUM_INPUTS && cell.gates.pruned[choice.from] {
                        continue;
                    }
                    writeln!(
                        out,
                        "  {} -> {} [label=\"{}\"];",
                        label(choice.from),
                        label(NUM_INPUTS + j),
                        choice.op
                    )
                    .unwrap();
                }
            }
            for j in 0..cell.nodes.len() {
                writeln!(out, "  {} -> out;", label(NUM_INPUTS + j)).unwrap();
            }
            writeln!(out, "}}").unwrap();
        }
        out
    }
}
