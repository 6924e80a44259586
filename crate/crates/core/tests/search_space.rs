mod common;

use std::collections::BTreeSet;

use cellsearch::cell::{Cell, CellKind, CellMode, CellInputs, CellSpec, NUM_EDGES};
use cellsearch::discrete::instantiate_discrete;
use cellsearch::error::Error;
use cellsearch::genotype::{derive_genotype, CellArchValues, CellGenotype, EdgeChoice, GateDecision, Genotype};
use cellsearch::layers::{Builder, Ctx, NormMode, RunningStats};
use cellsearch::ops::{MixedOp, OpKind, NUM_OPS, VOCAB};
use cellsearch::optim::{adam_step, AdamParams, AdamState};
use cellsearch::supernet::{gate_coefficients, Supernet, SupernetConfig};
use cellsearch::tape::Tape;
use cellsearch::tensor::{ParamGroup, ParamStore, Tensor};
use common::{close, gradcheck, probe_loss, random_tensor, rng};
use proptest::prelude::*;

struct Edge {
    store: ParamStore<f64>,
    op: MixedOp,
    x: Tensor<f64>,
}

fn edge(channels: usize, stride: usize, seed: u64) -> Edge {
    let mut store = ParamStore::new();
    let mut running = RunningStats::default();
    let mut r = rng(seed);
    let op = {
        let mut b = Builder {
            store: &mut store,
            running: &mut running,
            rng: &mut r,
            affine: false,
        };
        MixedOp::build(&mut b, "edge", channels, stride)
    };
    let x = random_tensor(&mut r, &[2, channels, 9]);
    Edge { store, op, x }
}

fn mixed(e: &Edge, alpha: &[f64]) -> Result<Tensor<f64>, Error> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &e.store, NormMode::Batch);
    let x = ctx.tape.constant(e.x.clone());
    let a = ctx.tape.constant(Tensor::new(vec![alpha.len()], alpha.to_vec()).unwrap());
    let y = e.op.forward(&mut ctx, x, a)?;
    Ok(ctx.tape.value(y).clone())
}

fn candidates(e: &Edge) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &e.store, NormMode::Batch);
    let x = ctx.tape.constant(e.x.clone());
    e.op.candidates()
        .iter()
        .map(|op| {
            let y = op.forward(&mut ctx, x).unwrap();
            ctx.tape.value(y).clone()
        })
        .collect()
}

#[test]
fn uniform_logits_average_all_candidates() {
    let e = edge(3, 1, 1);
    let out = mixed(&e, &[0.7; NUM_OPS]).unwrap();
    let cands = candidates(&e);
    assert_eq!(cands.len(), NUM_OPS);
    for (i, v) in out.data().iter().enumerate() {
        let mean = cands.iter().map(|c| c.data()[i]).sum::<f64>() / NUM_OPS as f64;
        assert!((v - mean).abs() < 1e-6, "{v} vs {mean}");
    }
}

#[test]
fn saturated_logit_selects_one_candidate() {
    let e = edge(3, 1, 2);
    let mut alpha = [0.0; NUM_OPS];
    alpha[0] = 20.0;
    let out = mixed(&e, &alpha).unwrap();
    let lone = &candidates(&e)[0];
    for (a, b) in out.data().iter().zip(lone.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    // Same check on a parametric candidate.
    let mut alpha = [0.0; NUM_OPS];
    alpha[OpKind::SepConv5.index()] = 40.0;
    let out = mixed(&e, &alpha).unwrap();
    let lone = &candidates(&e)[OpKind::SepConv5.index()];
    for (a, b) in out.data().iter().zip(lone.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn mixed_gradient_wrt_logits_matches_finite_differences() {
    let mut e = edge(2, 1, 3);
    let alpha = e.store.add("alpha", ParamGroup::Alpha, random_tensor(&mut rng(4), &[NUM_OPS]));
    let (op, x) = (e.op.clone(), e.x.clone());
    let report = gradcheck(&mut e.store, &[alpha], 1e-5, 1e-4, 1e-7, |s, tape| {
        let mut ctx = Ctx::new(tape, s, NormMode::Batch);
        let xv = ctx.tape.constant(x.clone());
        let a = ctx.param(alpha);
        let y = op.forward(&mut ctx, xv, a).unwrap();
        probe_loss(tape, y, 5)
    });
    assert_eq!(report.checked, NUM_OPS);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
}

#[test]
fn nan_logits_are_rejected() {
    let e = edge(2, 1, 6);
    let mut alpha = [0.0; NUM_OPS];
    alpha[3] = f64::NAN;
    assert!(matches!(mixed(&e, &alpha), Err(Error::NonFinite(_))));
    assert!(mixed(&e, &[0.0; 5]).is_err());
}

#[test]
fn candidates_share_output_shape() {
    for stride in [1, 2] {
        let e = edge(3, stride, 7);
        let out = mixed(&e, &[0.0; NUM_OPS]).unwrap();
        let expect = vec![2, 3, 9usize.div_ceil(stride)];
        assert_eq!(out.shape(), expect.as_slice());
        for (op, c) in e.op.candidates().iter().zip(candidates(&e)) {
            assert_eq!(c.shape(), expect.as_slice(), "{}", op.kind());
        }
        let projected = e.store.iter().any(|(_, p)| p.name.contains("skip_connect"));
        assert_eq!(projected, stride == 2);
    }
    let none = &candidates(&edge(2, 1, 8))[0];
    assert!(none.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn mixed_output_ignores_logit_shift(
        alpha in proptest::collection::vec(-3.0f64..3.0, NUM_OPS),
        shift in -50.0f64..50.0,
    ) {
        let e = edge(2, 1, 9);
        let a = mixed(&e, &alpha).unwrap();
        let shifted: Vec<f64> = alpha.iter().map(|v| v + shift).collect();
        let b = mixed(&e, &shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

fn cell_output_shape(kind: CellKind, len: usize) -> Vec<usize> {
    let mut store = ParamStore::<f64>::new();
    let mut running = RunningStats::default();
    let mut r = rng(10);
    let cell = {
        let mut b = Builder {
            store: &mut store,
            running: &mut running,
            rng: &mut r,
            affine: false,
        };
        Cell::build_search(&mut b, "cell", kind, 4, 4, 3, false)
    };
    let s0 = random_tensor(&mut r, &[2, 4, len]);
    let s1 = random_tensor(&mut r, &[2, 4, len]);
    let logits = random_tensor(&mut r, &[NUM_EDGES, NUM_OPS]);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, NormMode::Batch);
    let (a, b) = (ctx.tape.constant(s0), ctx.tape.constant(s1));
    let l = ctx.tape.constant(logits);
    let weights = ctx.tape.softmax(l, 1).unwrap();
    let y = cell
        .forward(&mut ctx, a, b, CellInputs::default(), CellMode::Search { weights })
        .unwrap();
    ctx.tape.shape(y).to_vec()
}

#[test]
fn cell_output_lengths_and_channels() {
    assert_eq!(cell_output_shape(CellKind::Normal, 64), vec![2, 12, 64]);
    assert_eq!(cell_output_shape(CellKind::Reduction, 64), vec![2, 12, 32]);
    assert_eq!(cell_output_shape(CellKind::Reduction, 7), vec![2, 12, 4]);
}

#[test]
fn cell_topology_has_fourteen_edges_from_earlier_nodes() {
    let spec = CellSpec::new(CellKind::Reduction);
    assert_eq!(spec.edges.len(), NUM_EDGES);
    for (e, &(from, to)) in spec.edges.iter().enumerate() {
        assert!(from < to);
        assert_eq!(CellSpec::edge_index(to - 2, from), e);
        assert_eq!(spec.stride(from), if from < 2 { 2 } else { 1 });
    }
}

/// Ops for each cell of a hand-made architecture, keyed by `(node, from)`.
fn design(cell: usize) -> Vec<[EdgeChoice; 2]> {
    let sources = [[0, 1], [1, 2], [0, 3], [2, 4]];
    let ops = &VOCAB[1..];
    sources
        .iter()
        .enumerate()
        .map(|(j, s)| {
            s.map(|from| EdgeChoice {
                op: ops[(cell + 2 * j + from) % ops.len()],
                from,
            })
        })
        .collect()
}

/// Logits saturated on the design: retained edges on their op, all other
/// edges on `none`.
fn saturated_alpha(nodes: &[[EdgeChoice; 2]]) -> Vec<f64> {
    let mut alpha = vec![0.0; NUM_EDGES * NUM_OPS];
    for e in 0..NUM_EDGES {
        alpha[e * NUM_OPS] = 40.0;
    }
    for (j, pair) in nodes.iter().enumerate() {
        for c in pair {
            let e = CellSpec::edge_index(j, c.from);
            alpha[e * NUM_OPS] = 0.0;
            alpha[e * NUM_OPS + c.op.index()] = 40.0;
        }
    }
    alpha
}

fn tiny_config() -> SupernetConfig {
    SupernetConfig {
        init_channels: 2,
        num_classes: 3,
        ..SupernetConfig::default()
    }
}

fn set_alpha(net: &mut Supernet<f64>, cell: usize, values: &[f64]) {
    let id = net.cell_alpha(cell);
    net.store_mut().tensor_mut(id).data_mut().copy_from_slice(values);
}

#[test]
fn saturated_search_matches_discrete_evaluation() {
    let mut net = Supernet::<f64>::new(tiny_config(), 11).unwrap();
    for i in 0..6 {
        set_alpha(&mut net, i, &saturated_alpha(&design(i)));
    }
    let g = net.derive().unwrap();
    for (i, c) in g.cells.iter().enumerate() {
        assert_eq!(c.nodes, design(i), "cell {i}");
    }
    let x = random_tensor(&mut rng(12), &[3, 2, 16]);
    let mut t1 = Tape::new();
    let a = net.forward(&mut t1, &x).unwrap();
    let mut t2 = Tape::new();
    let b = net.forward_discrete(&mut t2, &x, &g).unwrap();
    for (u, v) in t1.value(a.logits).data().iter().zip(t2.value(b.logits).data()) {
        assert!((u - v).abs() < 1e-5, "{u} vs {v}");
    }
}

fn values(alpha: Vec<f64>, gates: [f64; 2]) -> CellArchValues {
    CellArchValues {
        kind: CellKind::Normal,
        alpha,
        gates,
    }
}

#[test]
fn derivation_follows_argmax_of_logits() {
    let mut alpha: Vec<f64> = random_tensor(&mut rng(13), &[NUM_EDGES * NUM_OPS]).to_f64_vec();
    for e in [CellSpec::edge_index(0, 0), CellSpec::edge_index(0, 1)] {
        alpha[e * NUM_OPS + OpKind::SepConv3.index()] = 25.0;
    }
    let g = derive_genotype(&[values(alpha, [1.0, 1.0])], 0.2).unwrap();
    let n0 = g.cells[0].nodes[0];
    assert_eq!(n0.map(|c| (c.op, c.from)), [(OpKind::SepConv3, 0), (OpKind::SepConv3, 1)]);
}

#[test]
fn equal_logits_break_ties_toward_low_indices() {
    let g = derive_genotype(&[values(vec![0.0; NUM_EDGES * NUM_OPS], [1.0, 1.0])], 0.2).unwrap();
    for pair in &g.cells[0].nodes {
        assert_eq!(pair.map(|c| (c.op, c.from)), [(OpKind::SkipConnect, 0), (OpKind::SkipConnect, 1)]);
    }
}

#[test]
fn weak_gate_prunes_its_input() {
    let zeros = vec![0.0; NUM_EDGES * NUM_OPS];
    let g = derive_genotype(&[values(zeros.clone(), [1.85, 0.15])], 0.2).unwrap();
    assert_eq!(g.cells[0].gates.pruned, [false, true]);
    let err = derive_genotype(&[values(zeros.clone(), [0.1, 0.15])], 0.2).unwrap_err();
    assert!(matches!(err, Error::DegenerateCell { cell: 0 }));
    assert!(derive_genotype(&[values(zeros.clone(), [1.0, 1.0])], 1.5).is_err());
    let (g0, g1) = gate_coefficients([9f64.ln(), 0.0], 2.0);
    let g = derive_genotype(&[values(zeros.clone(), [g0, g1])], 0.2).unwrap();
    assert_eq!(g.cells[0].gates.pruned, [false, false]);
    let (g0, g1) = gate_coefficients([3.0, 0.0], 2.0);
    let g = derive_genotype(&[values(zeros, [g0, g1])], 0.2).unwrap();
    assert_eq!(g.cells[0].gates.pruned, [false, true]);
}

#[test]
fn gate_coefficient_examples() {
    let (a, b) = gate_coefficients([0.0, 0.0], 2.0);
    assert!(close(a, 1.0, 0.0, 1e-12) && close(b, 1.0, 0.0, 1e-12));
    let (a, b) = gate_coefficients([9f64.ln(), 0.0], 2.0);
    assert!((a - 1.8).abs() < 1e-12 && (b - 0.2).abs() < 1e-12);
    let (a, b) = gate_coefficients([3.0, 0.0], 2.0);
    assert!((a - 1.9052).abs() < 1e-4 && (b - 0.0949).abs() < 1e-4);
    assert!(b < 0.2);
    let (a, b) = gate_coefficients([0.3, -1.1], 1.0);
    assert!((a + b - 1.0).abs() < 1e-12);
}

fn six_cell_genotype(seed: u64) -> Genotype {
    let mut r = rng(seed);
    let cells: Vec<CellArchValues> = (0..6)
        .map(|i| CellArchValues {
            kind: if i % 2 == 0 { CellKind::Normal } else { CellKind::Reduction },
            alpha: random_tensor(&mut r, &[NUM_EDGES * NUM_OPS]).to_f64_vec(),
            gates: if i == 2 { [1.9, 0.1] } else { [1.0, 1.0] },
        })
        .collect();
    derive_genotype(&cells, 0.2).unwrap()
}

#[test]
fn derivation_is_pure() {
    let a = six_cell_genotype(14).to_json().unwrap();
    let b = six_cell_genotype(14).to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn dot_export_has_one_graph_per_cell() {
    let g = six_cell_genotype(15);
    let dot = g.to_dot();
    assert_eq!(dot.matches("digraph ").count(), 6);
    let block = dot.split("digraph ").nth(3).unwrap();
    assert!(block.starts_with("cell_2"));
    assert!(!block.contains("s1 ->") && !block.contains("  s1 ["));
    assert!(block.contains("s0 ["));
    assert_eq!(dot.matches('{').count(), dot.matches('}').count());
}

#[test]
fn genotype_validation_rejects_bad_files() {
    let g = six_cell_genotype(16);
    let mut bad = g.clone();
    bad.cells[0].nodes[1][0].op = OpKind::None;
    assert!(Genotype::from_json(&bad.to_json().unwrap()).is_err());
    let mut bad = g.clone();
    bad.vocab.swap(1, 2);
    assert!(Genotype::from_json(&bad.to_json().unwrap()).is_err());
    let mut bad = g.clone();
    bad.cells[0].nodes[0][1].from = 3;
    assert!(Genotype::from_json(&bad.to_json().unwrap()).is_err());
    let err = Genotype::from_json("{\"cells\": 3}").unwrap_err();
    assert!(matches!(err, Error::Genotype(_)), "{err}");
    let text = g.to_json().unwrap().replace("sep_conv_3", "conv_9");
    if text != g.to_json().unwrap() {
        assert!(Genotype::from_json(&text).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn genotype_json_round_trips(seed in any::<u64>()) {
        let g = six_cell_genotype(seed);
        prop_assert_eq!(Genotype::from_json(&g.to_json().unwrap()).unwrap(), g);
    }

    #[test]
    fn derivation_ignores_per_row_shifts(
        seed in any::<u64>(),
        shifts in proptest::collection::vec(-30.0f64..30.0, NUM_EDGES),
    ) {
        let alpha = random_tensor(&mut rng(seed), &[NUM_EDGES * NUM_OPS]).to_f64_vec();
        let shifted: Vec<f64> = alpha.iter().enumerate().map(|(i, v)| v + shifts[i / NUM_OPS]).collect();
        let a = derive_genotype(&[values(alpha, [1.2, 0.8])], 0.2).unwrap();
        let b = derive_genotype(&[values(shifted, [1.2, 0.8])], 0.2).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn three_reductions_leave_an_eighth_of_the_length() {
    let cfg = tiny_config();
    let mut store = ParamStore::<f64>::new();
    let mut running = RunningStats::default();
    let mut r = rng(17);
    let cells: Vec<Cell> = {
        let mut b = Builder {
            store: &mut store,
            running: &mut running,
            rng: &mut r,
            affine: false,
        };
        cfg.channel_plan()
            .iter()
            .zip(&cfg.layout)
            .enumerate()
            .map(|(i, (p, &k))| Cell::build_search(&mut b, &format!("c{i}"), k, p.c_prev_prev, p.c_prev, p.channels, p.reduction_prev))
            .collect()
    };
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, NormMode::Batch);
    let stem = ctx.tape.constant(random_tensor(&mut r, &[2, cfg.init_channels, 64]));
    let logits = ctx.tape.constant(Tensor::zeros(&[NUM_EDGES, NUM_OPS]));
    let weights = ctx.tape.softmax(logits, 1).unwrap();
    let (mut s0, mut s1) = (stem, stem);
    for cell in &cells {
        let out = cell.forward(&mut ctx, s0, s1, CellInputs::default(), CellMode::Search { weights }).unwrap();
        s0 = s1;
        s1 = out;
    }
    assert_eq!(ctx.tape.shape(s1), &[2, cfg.embedding_dim(), 8]);
}

#[test]
fn short_inputs_report_the_underflowing_cell() {
    let net = Supernet::<f64>::new(tiny_config(), 18).unwrap();
    let mut tape = Tape::new();
    let err = net.forward(&mut tape, &Tensor::zeros(&[2, 2, 4])).unwrap_err();
    assert!(matches!(err, Error::TemporalUnderflow { cell: 5, length: 1 }), "{err}");
    let mut tape = Tape::new();
    assert!(net.forward(&mut tape, &Tensor::zeros(&[2, 3, 16])).is_err());
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &random_tensor(&mut rng(1), &[2, 2, 8])).unwrap();
    assert_eq!(tape.shape(out.logits), &[2, 3]);
    assert_eq!(tape.shape(out.embedding), &[2, tiny_config().embedding_dim()]);
}

#[test]
fn disabled_gates_equal_symmetric_gates() {
    let on = Supernet::<f64>::new(tiny_config(), 19).unwrap();
    let off = Supernet::<f64>::new(SupernetConfig { use_gates: false, ..tiny_config() }, 19).unwrap();
    assert_eq!(on.gate_coefficients(3), (1.0, 1.0));
    assert_eq!(off.gate_coefficients(3), (1.0, 1.0));
    let x = random_tensor(&mut rng(20), &[2, 2, 16]);
    let (mut t1, mut t2) = (Tape::new(), Tape::new());
    let a = on.forward(&mut t1, &x).unwrap();
    let b = off.forward(&mut t2, &x).unwrap();
    for (u, v) in t1.value(a.logits).data().iter().zip(t2.value(b.logits).data()) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn gate_gradients_match_finite_differences() {
    let cfg = SupernetConfig {
        num_cells: 2,
        layout: vec![CellKind::Normal, CellKind::Reduction],
        init_channels: 2,
        num_classes: 2,
        ..SupernetConfig::default()
    };
    let mut net = Supernet::<f64>::new(cfg, 21).unwrap();
    let betas: Vec<_> = net.store().ids(ParamGroup::Beta);
    for (k, &id) in betas.iter().enumerate() {
        net.store_mut().tensor_mut(id).data_mut().copy_from_slice(&[0.3 * k as f64, -0.4]);
    }
    let x = random_tensor(&mut rng(22), &[4, 2, 16]);
    let labels = [0, 1, 1, 0];
    let mut store = net.store().clone();
    let report = gradcheck(&mut store, &betas, 1e-5, 1e-4, 1e-7, |s, tape| {
        let out = net.forward_with(s, tape, &x).unwrap();
        tape.cross_entropy(out.logits, &labels).unwrap()
    });
    assert_eq!(report.checked, 4);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
}

#[test]
fn architecture_tensor_counts_follow_sharing_mode() {
    let relax = Supernet::<f32>::new(SupernetConfig::default(), 0).unwrap();
    assert_eq!(relax.arch().len(), 6);
    assert_eq!(relax.store().ids(ParamGroup::Alpha).len(), 6);
    assert_eq!(relax.gates().len(), 6);
    let shared = Supernet::<f32>::new(
        SupernetConfig {
            independent_alpha: false,
            use_gates: false,
            ..SupernetConfig::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(shared.arch().len(), 2);
    assert_eq!(shared.cell_alpha(0), shared.cell_alpha(4));
    assert_eq!(shared.cell_alpha(1), shared.cell_alpha(5));
    assert_ne!(shared.cell_alpha(0), shared.cell_alpha(1));
    assert!(shared.gates().is_empty());
}

#[test]
fn masked_arch_step_moves_only_the_unmasked_cell() {
    let mut net = Supernet::<f64>::new(tiny_config(), 23).unwrap();
    let x = random_tensor(&mut rng(24), &[3, 2, 16]);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &x).unwrap();
    let loss = tape.cross_entropy(out.logits, &[0, 1, 2]).unwrap();
    let before: Vec<Vec<f64>> = (0..6).map(|i| net.store().tensor(net.cell_alpha(i)).to_f64_vec()).collect();
    let k = 3;
    {
        let store = net.store_mut();
        store.clear_grads();
        tape.backward(loss, store).unwrap();
    }
    for i in (0..6).filter(|&i| i != k) {
        let id = net.cell_alpha(i);
        let n = net.store().tensor(id).numel();
        net.store_mut().tensor_mut(id).set_grad(Some(vec![0.0; n]));
    }
    let hp = AdamParams {
        lr: 0.1,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    adam_step(net.store_mut(), ParamGroup::Alpha, &mut AdamState::default(), hp).unwrap();
    for (i, b) in before.iter().enumerate() {
        let after = net.store().tensor(net.cell_alpha(i)).to_f64_vec();
        assert_eq!(&after != b, i == k, "cell {i}");
    }
}

fn edge_signature(names: impl Iterator<Item = String>, cell: usize) -> BTreeSet<String> {
    let prefix = format!("cells.{cell}.edges.");
    names.filter_map(|n| n.strip_prefix(&prefix).map(str::to_string)).collect()
}

#[test]
fn distinct_logits_give_structurally_distinct_cells() {
    let mut net = Supernet::<f32>::new(SupernetConfig::default(), 25).unwrap();
    for i in 0..6 {
        let values: Vec<f32> = saturated_alpha(&design(i)).into_iter().map(|v| v as f32).collect();
        let id = net.cell_alpha(i);
        net.store_mut().tensor_mut(id).data_mut().copy_from_slice(&values);
    }
    let g = net.derive().unwrap();
    let d = instantiate_discrete::<f32>(&g, net.config(), 1).unwrap();
    let sigs: Vec<_> = (0..6)
        .map(|i| edge_signature(d.store().iter().map(|(_, p)| p.name.clone()), i))
        .collect();
    for i in 0..6 {
        for j in i + 1..6 {
            assert_ne!(g.cells[i].nodes, g.cells[j].nodes);
            if g.cells[i].kind == g.cells[j].kind {
                assert_ne!(sigs[i], sigs[j], "cells {i} and {j}");
            }
        }
    }
}

fn all_skip(config: &SupernetConfig) -> Genotype {
    let cells = config
        .layout
        .iter()
        .map(|&kind| CellGenotype {
            kind,
            nodes: (0..4)
                .map(|j| {
                    [0, 1 + j].map(|from| EdgeChoice {
                        op: OpKind::SkipConnect,
                        from,
                    })
                })
                .collect(),
            gates: GateDecision {
                s0: 1.0,
                s1: 1.0,
                pruned: [false, false],
            },
        })
        .collect();
    let g = Genotype {
        cells,
        vocab: cellsearch::ops::vocab_names(),
        meta: Default::default(),
    };
    g.validate().unwrap();
    g
}

#[test]
fn all_skip_network_has_only_plumbing_parameters() {
    let cfg = SupernetConfig::default();
    let g = all_skip(&cfg);
    let net = instantiate_discrete::<f32>(&g, &cfg, 0).unwrap();
    // conv weights plus affine norm scale and shift
    let conv_bn = |c_in: usize, c_out: usize, k: usize| c_in * c_out * k + 2 * c_out;
    let mut expect = conv_bn(cfg.input_channels, cfg.init_channels, 3);
    for (p, cell) in cfg.channel_plan().iter().zip(&g.cells) {
        expect += conv_bn(p.c_prev_prev, p.channels, 1) + conv_bn(p.c_prev, p.channels, 1);
        if cell.kind == CellKind::Reduction {
            let from_inputs = cell.nodes.iter().flatten().filter(|c| c.from < 2).count();
            expect += from_inputs * conv_bn(p.channels, p.channels, 1);
        }
        expect += 2; // gate logits
    }
    expect += cfg.num_classes * cfg.embedding_dim() + cfg.num_classes;
    assert_eq!(net.num_params(), expect);
}

#[test]
fn discrete_initialization_is_seeded() {
    let cfg = SupernetConfig::default();
    let g = six_cell_genotype(26);
    let a = instantiate_discrete::<f32>(&g, &cfg, 5).unwrap();
    let b = instantiate_discrete::<f32>(&g, &cfg, 5).unwrap();
    let c = instantiate_discrete::<f32>(&g, &cfg, 6).unwrap();
    let flat = |n: &cellsearch::discrete::DiscreteNet<f32>| {
        n.store().iter().flat_map(|(_, p)| p.tensor.data().to_vec()).map(f32::to_bits).collect::<Vec<_>>()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn mismatched_genotypes_are_rejected() {
    let cfg = SupernetConfig::default();
    let g = six_cell_genotype(27);
    let four = SupernetConfig {
        num_cells: 4,
        layout: cellsearch::supernet::default_layout(4),
        ..cfg.clone()
    };
    assert!(matches!(instantiate_discrete::<f32>(&g, &four, 0), Err(Error::Genotype(_))));
    let mut flipped = cfg.clone();
    flipped.layout.swap(0, 1);
    assert!(instantiate_discrete::<f32>(&g, &flipped, 0).is_err());
    let mut bad = g.clone();
    bad.vocab[7] = "conv_7".into();
    assert!(instantiate_discrete::<f32>(&bad, &cfg, 0).is_err());
}
