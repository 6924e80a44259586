//! The searchable network: stem, a stack of cells with per-cell (or shared)
//! architecture logits and per-cell input gates, and a classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cell::{Cell, CellInputs, CellKind, CellMode, NUM_EDGES};
use crate::error::{Error, Result};
use crate::genotype::{CellArchValues, Genotype};
use crate::layers::{Builder, Ctx, NormLayer, NormMode, RunningStats};
use crate::ops::NUM_OPS;
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub num_cells: usize,
    pub layout: Vec<CellKind>,
    pub init_channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    /// One logit matrix per cell instead of one per cell kind.
    pub independent_alpha: bool,
    /// Learnable input gates on every cell.
    pub use_gates: bool,
    /// Gate coefficients are `gate_scale * softmax(beta)`.
    pub gate_scale: f64,
    /// Inputs whose gate coefficient falls below this are pruned at derivation.
    pub gate_threshold: f64,
    pub alpha_init_std: f64,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            num_cells: 6,
            layout: default_layout(6),
            init_channels: 8,
            num_classes: 20,
            input_channels: 2,
            independent_alpha: true,
            use_gates: true,
            gate_scale: 2.0,
            gate_threshold: 0.2,
            alpha_init_std: 1e-3,
        }
    }
}

/// Alternating `[N, R, N, R, ...]` layout.
pub fn default_layout(num_cells: usize) -> Vec<CellKind> {
    (0..num_cells)
        .map(|i| if i % 2 == 0 { CellKind::Normal } else { CellKind::Reduction })
        .collect()
}

/// Channel bookkeeping for one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellChannels {
    pub c_prev_prev: usize,
    pub c_prev: usize,
    pub channels: usize,
    pub reduction_prev: bool,
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layout.len() != self.num_cells {
            return Err(Error::InvalidArgument(format!(
                "layout has {} cells, num_cells is {}",
                self.layout.len(),
                self.num_cells
            )));
        }
        if self.num_cells == 0 || self.init_channels == 0 || self.input_channels == 0 {
            return Err(Error::InvalidArgument("cells, init_channels and input_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        if !(self.gate_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("gate scale {} must be positive", self.gate_scale)));
        }
        if !(0.0..1.0).contains(&self.gate_threshold) {
            return Err(Error::InvalidArgument(format!("gate threshold {} outside [0, 1)", self.gate_threshold)));
        }
        Ok(())
    }

    pub fn num_reductions(&self) -> usize {
        self.layout.iter().filter(|&&k| k == CellKind::Reduction).count()
    }

    /// Per-node channels double at every reduction cell.
    pub fn channel_plan(&self) -> Vec<CellChannels> {
        let (mut c_pp, mut c_p, mut c) = (self.init_channels, self.init_channels, self.init_channels);
        let mut reduction_prev = false;
        self.layout
            .iter()
            .map(|&kind| {
                if kind == CellKind::Reduction {
                    c *= 2;
                }
                let plan = CellChannels {
                    c_prev_prev: c_pp,
                    c_prev: c_p,
                    channels: c,
                    reduction_prev,
                };
                reduction_prev = kind == CellKind::Reduction;
                c_pp = c_p;
                c_p = 4 * c;
                plan
            })
            .collect()
    }

    /// Width of the pooled embedding fed to the head.
    pub fn embedding_dim(&self) -> usize {
        self.channel_plan().last().map_or(self.init_channels, |p| 4 * p.channels)
    }
}

/// `(g0, g1) = scale * softmax(beta)`.
pub fn gate_coefficients(beta: [f64; 2], scale: f64) -> (f64, f64) {
    let m = beta[0].max(beta[1]);
    let e0 = (beta[0] - m).exp();
    let e1 = (beta[1] - m).exp();
    let z = e0 + e1;
    (scale * e0 / z, scale * e1 / z)
}

/// Architecture logits owned by one cell (or shared by a cell kind).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellArch {
    pub alpha: ParamId,
    pub owner_cell: usize,
}

/// Input-gate logits of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputGate {
    pub beta: ParamId,
    pub scale: f64,
}

impl InputGate {
    pub fn coefficients<F: Scalar>(&self, store: &ParamStore<F>) -> (f64, f64) {
        let b = store.tensor(self.beta).to_f64_vec();
        gate_coefficients([b[0], b[1]], self.scale)
    }

    pub(crate) fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>) -> Result<Var> {
        let beta = ctx.param(self.beta);
        if !ctx.tape.value(beta).is_finite() {
            return Err(Error::NonFinite("gate logits".into()));
        }
        let p = ctx.tape.softmax(beta, 0)?;
        Ok(ctx.tape.scale(p, F::lit(self.scale)))
    }
}

/// Outputs of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    pub logits: Var,
    /// Time-pooled features before the classifier.
    pub embedding: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Stem {
    weight: ParamId,
    norm: NormLayer,
}

impl Stem {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, input_channels: usize, channels: usize) -> Self {
        Stem {
            weight: b.conv("stem.conv".into(), channels, input_channels, 3),
            norm: b.norm_with("stem.norm", channels, true),
        }
    }

    fn forward<F: Scalar>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let h = ctx.tape.conv1d(x, w, ConvSpec::default())?;
        self.norm.forward(ctx, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Head {
    weight: ParamId,
    bias: ParamId,
}

impl Head {
    pub(crate) fn build<F: Scalar>(b: &mut Builder<'_, F>, features: usize, classes: usize) -> Self {
        Head {
            weight: b.uniform("head.weight".into(), &[classes, features], features),
            bias: b.uniform("head.bias".into(), &[classes], features),
        }
    }
}

/// Stem, cells and head, independent of how each cell is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Backbone {
    pub(crate) config: SupernetConfig,
    pub(crate) stem: Stem,
    pub(crate) cells: Vec<Cell>,
    pub(crate) head: Head,
}

impl Backbone {
    pub(crate) fn forward<'g, F, M>(&self, ctx: &mut Ctx<'_, F>, batch: &Tensor<F>, mut per_cell: M) -> Result<NetOutput>
    where
        F: Scalar,
        M: FnMut(&mut Ctx<'_, F>, usize) -> Result<(CellInputs, CellMode<'g>)>,
    {
        let shape = batch.shape();
        if shape.len() != 3 || shape[1] != self.config.input_channels {
            return Err(Error::shape(
                "network_forward",
                format!("expected [batch, {}, time], got {shape:?}", self.config.input_channels),
            ));
        }
        let x = ctx.tape.constant(batch.clone());
        let stem = self.stem.forward(ctx, x)?;
        let (mut s0, mut s1) = (stem, stem);
        for (i, cell) in self.cells.iter().enumerate() {
            let len = ctx.tape.shape(s1)[2];
            if cell.kind() == CellKind::Reduction && len < 2 {
                return Err(Error::TemporalUnderflow { cell: i, length: len });
            }
            let (inputs, mode) = per_cell(ctx, i)?;
            let out = cell.forward(ctx, s0, s1, inputs, mode)?;
            s0 = s1;
            s1 = out;
        }
        let embedding = ctx.tape.global_avg_pool(s1)?;
        let w = ctx.param(self.head.weight);
        let b = ctx.param(self.head.bias);
        let logits = ctx.tape.linear(embedding, w, Some(b))?;
        Ok(NetOutput { logits, embedding })
    }
}

/// The over-parameterized search network.
#[derive(Clone, Debug)]
pub struct Supernet<F: Scalar> {
    backbone: Backbone,
    store: ParamStore<F>,
    arch: Vec<CellArch>,
    cell_arch: Vec<usize>,
    gates: Vec<InputGate>,
}

impl<F: Scalar> Supernet<F> {
    pub fn new(config: SupernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut running = RunningStats::default();
        let mut b = Builder {
            store: &mut store,
            running: &mut running,
            rng: &mut rng,
            affine: false,
        };
        let stem = Stem::build(&mut b, config.input_channels, config.init_channels);
        let cells: Vec<Cell> = config
            .channel_plan()
            .iter()
            .zip(&config.layout)
            .enumerate()
            .map(|(i, (p, &kind))| {
                Cell::build_search(
                    &mut b,
                    &format!("cells.{i}"),
                    kind,
                    p.c_prev_prev,
                    p.c_prev,
                    p.channels,
                    p.reduction_prev,
                )
            })
            .collect();
        let head = Head::build(&mut b, config.embedding_dim(), config.num_classes);

        let normal = Normal::new(0.0, config.alpha_init_std)
            .map_err(|e| Error::InvalidArgument(format!("alpha init std: {e}")))?;
        let mut arch = Vec::new();
        let mut cell_arch = Vec::with_capacity(config.num_cells);
        for (i, &kind) in config.layout.iter().enumerate() {
            let shared = (!config.independent_alpha)
                .then(|| arch.iter().position(|a: &CellArch| config.layout[a.owner_cell] == kind))
                .flatten();
            match shared {
                Some(k) => cell_arch.push(k),
                None => {
                    let name = if config.independent_alpha {
                        format!("alpha.cell{i}")
                    } else {
                        format!("alpha.{kind:?}").to_lowercase()
                    };
                    let rng = &mut rng;
                    let t = Tensor::from_fn(&[NUM_EDGES, NUM_OPS], |_| F::lit(normal.sample(rng)));
                    arch.push(CellArch {
                        alpha: store.add(name, ParamGroup::Alpha, t),
                        owner_cell: i,
                    });
                    cell_arch.push(arch.len() - 1);
                }
            }
        }
        let gates = if config.use_gates {
            (0..config.num_cells)
                .map(|i| InputGate {
                    beta: store.add(format!("beta.cell{i}"), ParamGroup::Beta, Tensor::zeros(&[2])),
                    scale: config.gate_scale,
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Supernet {
            backbone: Backbone {
                config,
                stem,
                cells,
                head,
            },
            store,
            arch,
            cell_arch,
            gates,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.backbone.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn cells(&self) -> &[Cell] {
        &self.backbone.cells
    }

    /// Distinct architecture tensors held by the engine.
    pub fn arch(&self) -> &[CellArch] {
        &self.arch
    }

    /// Architecture tensor used by cell `i`.
    pub fn cell_alpha(&self, i: usize) -> ParamId {
        self.arch[self.cell_arch[i]].alpha
    }

    pub fn gates(&self) -> &[InputGate] {
        &self.gates
    }

    pub fn gate_coefficients(&self, i: usize) -> (f64, f64) {
        match self.gates.get(i) {
            Some(g) => g.coefficients(&self.store),
            None => (1.0, 1.0),
        }
    }

    /// Search-mode forward pass using the network's own parameters.
    pub fn forward(&self, tape: &mut Tape<F>, batch: &Tensor<F>) -> Result<NetOutput> {
        self.forward_with(&self.store, tape, batch)
    }

    /// Search-mode forward pass reading parameter values from `store`, which
    /// must be structurally identical to [`Supernet::store`].
    pub fn forward_with(&self, store: &ParamStore<F>, tape: &mut Tape<F>, batch: &Tensor<F>) -> Result<NetOutput> {
        let mut ctx = Ctx::new(tape, store, NormMode::Batch);
        let mut weights: Vec<Option<Var>> = vec![None; self.arch.len()];
        self.backbone.forward(&mut ctx, batch, |ctx, i| {
            let a = self.cell_arch[i];
            let w = match weights[a] {
                Some(w) => w,
                None => {
                    let alpha = ctx.param(self.arch[a].alpha);
                    if !ctx.tape.value(alpha).is_finite() {
                        return Err(Error::NonFinite(format!("architecture logits of cell {i}")));
                    }
                    let w = ctx.tape.softmax(alpha, 1)?;
                    weights[a] = Some(w);
                    w
                }
            };
            let gates = match self.gates.get(i) {
                Some(g) => Some(g.forward(ctx)?),
                None => None,
            };
            Ok((CellInputs { gates, pruned: [false, false] }, CellMode::Search { weights: w }))
        })
    }

    /// Evaluates the derived architecture with the supernet's own weights:
    /// only retained edges run, pruned inputs become zeros, gates stay soft.
    pub fn forward_discrete(&self, tape: &mut Tape<F>, batch: &Tensor<F>, genotype: &Genotype) -> Result<NetOutput> {
        if genotype.cells.len() != self.backbone.cells.len() {
            return Err(Error::Genotype(format!(
                "genotype has {} cells, network has {}",
                genotype.cells.len(),
                self.backbone.cells.len()
            )));
        }
        let mut ctx = Ctx::new(tape, &self.store, NormMode::Batch);
        self.backbone.forward(&mut ctx, batch, |ctx, i| {
            let gates = match self.gates.get(i) {
                Some(g) => Some(g.forward(ctx)?),
                None => None,
            };
            let cg = &genotype.cells[i];
            Ok((CellInputs { gates, pruned: cg.gates.pruned }, CellMode::Discrete(cg)))
        })
    }

    /// Current architecture state of every cell as plain values.
    pub fn arch_values(&self) -> Vec<CellArchValues> {
        (0..self.backbone.cells.len())
            .map(|i| {
                let (g0, g1) = self.gate_coefficients(i);
                CellArchValues {
                    kind: self.backbone.config.layout[i],
                    alpha: self.store.tensor(self.cell_alpha(i)).to_f64_vec(),
                    gates: [g0, g1],
                }
            })
            .collect()
    }

    /// Derives the discrete architecture at the configured threshold.
    pub fn derive(&self) -> Result<Genotype> {
        crate::genotype::derive_genotype(&self.arch_values(), self.backbone.config.gate_threshold)
    }
}
