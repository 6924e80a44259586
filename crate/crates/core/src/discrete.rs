//! The network instantiated from a derived genotype, trained from scratch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{Cell, CellInputs, CellMode};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::layers::{Builder, Ctx, NormMode, RunningStats};
use crate::supernet::{Backbone, Head, InputGate, NetOutput, Stem, SupernetConfig};
use crate::tape::Tape;
use crate::tensor::{ParamGroup, ParamStore, Scalar, Tensor};

/// Forward-pass regime of a discrete network.
pub enum Phase<'r> {
    /// Batch statistics (recorded for the running averages) and drop-path.
    Train { drop_path: f64, rng: &'r mut ChaCha8Rng },
    /// Frozen running statistics, no stochasticity.
    Eval,
}

/// Batch statistics observed in a training pass, per normalization slot.
pub type Observed<F> = Vec<(usize, Vec<F>, Vec<F>)>;

#[derive(Clone, Debug)]
pub struct DiscreteNet<F: Scalar> {
    backbone: Backbone,
    genotype: Genotype,
    store: ParamStore<F>,
    running: RunningStats,
    gates: Vec<InputGate>,
}

/// Builds the network the genotype describes with fresh weights drawn from
/// `seed`. Only retained operations get parameters; pruned inputs are fed
/// zeros. With gates enabled each cell keeps a learnable gate pair.
pub fn instantiate_discrete<F: Scalar>(genotype: &Genotype, config: &SupernetConfig, seed: u64) -> Result<DiscreteNet<F>> {
    config.validate()?;
    genotype.validate()?;
    if genotype.cells.len() != config.num_cells {
        return Err(Error::Genotype(format!(
            "genotype has {} cells, configuration expects {}",
            genotype.cells.len(),
            config.num_cells
        )));
    }
    if genotype.kinds() != config.layout {
        let letters = |k: &[crate::cell::CellKind]| k.iter().map(|k| k.letter()).collect::<String>();
        return Err(Error::Genotype(format!(
            "genotype cell layout {} does not match configuration {}",
            letters(&genotype.kinds()),
            letters(&config.layout)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut running = RunningStats::default();
    let mut b = Builder {
        store: &mut store,
        running: &mut running,
        rng: &mut rng,
        affine: true,
    };
    let stem = Stem::build(&mut b, config.input_channels, config.init_channels);
    let cells: Vec<Cell> = config
        .channel_plan()
        .iter()
        .zip(&genotype.cells)
        .enumerate()
        .map(|(i, (p, g))| {
            Cell::build_discrete(
                &mut b,
                &format!("cells.{i}"),
                g,
                p.c_prev_prev,
                p.c_prev,
                p.channels,
                p.reduction_prev,
            )
        })
        .collect();
    let head = Head::build(&mut b, config.embedding_dim(), config.num_classes);
    let gates = if config.use_gates {
        (0..config.num_cells)
            .map(|i| InputGate {
                beta: store.add(format!("beta.cell{i}"), ParamGroup::Weight, Tensor::zeros(&[2])),
                scale: config.gate_scale,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(DiscreteNet {
        backbone: Backbone {
            config: config.clone(),
            stem,
            cells,
            head,
        },
        genotype: genotype.clone(),
        store,
        running,
        gates,
    })
}

impl<F: Scalar> DiscreteNet<F> {
    pub fn config(&self) -> &SupernetConfig {
        &self.backbone.config
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn running(&self) -> &RunningStats {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut RunningStats {
        &mut self.running
    }

    pub fn cells(&self) -> &[Cell] {
        &self.backbone.cells
    }

    pub fn num_params(&self) -> usize {
        self.store.numel(ParamGroup::Weight)
    }

    pub fn forward(&self, tape: &mut Tape<F>, batch: &Tensor<F>, phase: Phase<'_>) -> Result<(NetOutput, Observed<F>)> {
        let mut ctx = match phase {
            Phase::Train { drop_path, rng } => Ctx::new(tape, &self.store, NormMode::Track).with_drop_path(drop_path, rng),
            Phase::Eval => Ctx::new(tape, &self.store, NormMode::Running).with_running(&self.running),
        };
        let genotype = &self.genotype;
        let gates = &self.gates;
        let out = self.backbone.forward(&mut ctx, batch, |ctx, i| {
            let g = match gates.get(i) {
                Some(g) => Some(g.forward(ctx)?),
                None => None,
            };
            let cg = &genotype.cells[i];
            Ok((CellInputs { gates: g, pruned: cg.gates.pruned }, CellMode::Discrete(cg)))
        })?;
        Ok((out, ctx.take_observed()))
    }

    /// Folds one training pass's batch statistics into the running averages.
    pub fn update_running(&mut self, observed: &Observed<F>) {
        for (slot, mean, var) in observed {
            self.running.update(*slot, mean, var);
        }
    }
}
