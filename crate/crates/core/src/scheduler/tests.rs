use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;
use crate::fusion::{fuse, FusionLimits};
use crate::graph::{ComputationGraph, EdgeKind, OpKind, Phase};
use crate::hda::{edge_tpu_baseline, Dataflow};
use crate::testutil::{core, machine, random_dag, small_machine, steps};
use crate::workloads::{build_resnet, ResnetConfig};

fn singletons(g: &ComputationGraph) -> Vec<Vec<NodeId>> {
    g.nodes.keys().map(|n| vec![*n]).collect()
}

fn gemm(m: usize, k: usize, n: usize) -> (ComputationGraph, NodeId) {
    let mut g = ComputationGraph::default();
    let x = g.add_input(&[m, k], 1, EdgeKind::Input);
    let w = g.add_input(&[k, n], 1, EdgeKind::Weight);
    let y = g
        .add_node(OpKind::Gemm, &[x, w], EdgeKind::Activation, Phase::Forward)
        .unwrap();
    g.graph_outputs.push(y);
    let id = g.edge(y).producer.unwrap();
    (g, id)
}

#[test]
fn one_mac_on_one_pe_takes_one_cycle() {
    let (g, n) = gemm(1, 1, 1);
    let c = core(0, Dataflow::WeightStationary, 1, 1 << 20, 1e9);
    let cost = node_cost(&g, n, &c, 1).unwrap();
    assert_eq!(cost.compute_cycles, 1);
    assert_eq!(cost.cycles, 1);
}

#[test]
fn compute_bound_gemm_takes_macs_over_parallelism() {
    let (g, n) = gemm(2, 2, 2);
    assert_eq!(g.node(n).macs, 8);
    let c = core(0, Dataflow::WeightStationary, 4, 1 << 20, 1e9);
    assert_eq!(node_cost(&g, n, &c, 1).unwrap().cycles, 2);
}

#[test]
fn bandwidth_starved_elementwise_is_memory_bound() {
    let mut g = ComputationGraph::default();
    let x = g.add_input(&[4, 8], 4, EdgeKind::Input);
    let y = g
        .add_node(OpKind::ReLU, &[x], EdgeKind::Activation, Phase::Forward)
        .unwrap();
    let n = g.edge(y).producer.unwrap();
    let c = core(0, Dataflow::SimdVector, 64, 1 << 20, 1.0);
    let cost = node_cost(&g, n, &c, 1).unwrap();
    assert!(cost.memory_cycles > cost.compute_cycles);
    assert_eq!(cost.memory_cycles, 128);
    assert_eq!(cost.cycles, cost.memory_cycles);
    let level = &cost.traffic[0];
    assert_eq!((level.read_bytes, level.write_bytes), (128, 128));
    assert_eq!(cost.energy_pj(), 32.0 + 256.0);
}

#[test]
fn weights_are_reloaded_per_tile_unless_weight_stationary() {
    let (g, n) = gemm(8, 4, 4);
    let ws = core(0, Dataflow::WeightStationary, 4, 1 << 20, 1e9);
    let os = core(0, Dataflow::OutputStationary, 4, 1 << 20, 1e9);
    let read = |c, t| node_cost(&g, n, c, t).unwrap().traffic[0].read_bytes;
    assert_eq!(read(&ws, 4), 32 + 16);
    assert_eq!(read(&os, 4), 32 + 4 * 16);
}

#[test]
fn array_operator_on_vector_core_is_rejected() {
    let (g, n) = gemm(2, 2, 2);
    let c = core(3, Dataflow::SimdVector, 4, 1 << 20, 1e9);
    assert_eq!(
        node_cost(&g, n, &c, 1),
        Err(ScheduleError::IncompatibleCore { node: n, core: 3 })
    );
    let hda = small_machine();
    let mapping = MappingConfig {
        assignment: BTreeMap::from([(n, 2)]),
        ..MappingConfig::auto()
    };
    assert_eq!(
        schedule(&g, &singletons(&g), &hda, &mapping),
        Err(ScheduleError::IncompatibleCore { node: n, core: 2 })
    );
}

#[test]
fn machine_without_array_core_cannot_run_gemm() {
    let (g, n) = gemm(2, 2, 2);
    let hda = machine(vec![core(0, Dataflow::SimdVector, 4, 1 << 20, 64.0)], 16.0);
    assert_eq!(
        schedule(&g, &singletons(&g), &hda, &MappingConfig::auto()),
        Err(ScheduleError::UnmappableNode(n))
    );
}

#[test]
fn independent_equal_nodes_overlap_perfectly() {
    let hda = machine(
        vec![
            core(0, Dataflow::WeightStationary, 4, 1 << 20, 64.0),
            core(1, Dataflow::WeightStationary, 4, 1 << 20, 64.0),
        ],
        16.0,
    );
    let mapping = MappingConfig {
        parallelism: Parallelism::None,
        ..MappingConfig::auto()
    };
    let (one, _) = gemm(8, 8, 8);
    let mut two = ComputationGraph::default();
    for _ in 0..2 {
        let x = two.add_input(&[8, 8], 1, EdgeKind::Input);
        let w = two.add_input(&[8, 8], 1, EdgeKind::Weight);
        let y = two
            .add_node(OpKind::Gemm, &[x, w], EdgeKind::Activation, Phase::Forward)
            .unwrap();
        two.graph_outputs.push(y);
    }
    let a = schedule(&one, &singletons(&one), &hda, &mapping).unwrap();
    let b = schedule(&two, &singletons(&two), &hda, &mapping).unwrap();
    assert_eq!(a.latency_cycles, b.latency_cycles);
    assert_eq!(b.nodes[0].cores, vec![0]);
    assert_eq!(b.nodes[1].cores, vec![1]);
}

fn chain() -> ComputationGraph {
    let mut g = ComputationGraph::default();
    let x = g.add_input(&[16, 16], 4, EdgeKind::Input);
    let w = g.add_input(&[16, 16], 4, EdgeKind::Weight);
    let a = g
        .add_node(OpKind::Gemm, &[x, w], EdgeKind::Activation, Phase::Forward)
        .unwrap();
    let b = g
        .add_node(OpKind::ReLU, &[a], EdgeKind::Activation, Phase::Forward)
        .unwrap();
    g.graph_outputs.push(b);
    g
}

#[test]
fn fusing_a_chain_on_one_core_removes_the_round_trip() {
    let g = chain();
    let hda = machine(
        vec![core(0, Dataflow::WeightStationary, 16, 1 << 20, 64.0)],
        2.0,
    );
    let m = MappingConfig::auto();
    let fused = schedule(&g, &[g.nodes.keys().copied().collect()], &hda, &m).unwrap();
    let split = schedule(&g, &singletons(&g), &hda, &m).unwrap();
    assert!(fused.latency_cycles <= split.latency_cycles);
    assert!(fused.energy_pj < split.energy_pj);
    // The intermediate is neither stored nor reloaded.
    assert_eq!(split.offchip_bytes - fused.offchip_bytes, 2 * 16 * 16 * 4);
}

#[test]
fn fused_subgraph_over_capacity_is_rejected() {
    let g = chain();
    let hda = machine(
        vec![core(0, Dataflow::WeightStationary, 16, 512, 64.0)],
        2.0,
    );
    let r = schedule(
        &g,
        &[g.nodes.keys().copied().collect()],
        &hda,
        &MappingConfig::auto(),
    );
    assert!(matches!(
        r,
        Err(ScheduleError::MemoryExceeded { core: 0, .. })
    ));
    // Singletons are never rejected for size.
    assert!(schedule(&g, &singletons(&g), &hda, &MappingConfig::auto()).is_ok());
}

#[test]
fn partition_must_be_an_exact_cover() {
    let g = chain();
    let hda = small_machine();
    let m = MappingConfig::auto();
    let ids: Vec<NodeId> = g.nodes.keys().copied().collect();
    for bad in [
        vec![vec![ids[0]]],
        vec![vec![ids[0]], ids.clone()],
        vec![vec![], ids.clone()],
    ] {
        assert!(matches!(
            schedule(&g, &bad, &hda, &m),
            Err(ScheduleError::InvalidPartition(_))
        ));
    }
}

#[test]
fn invalid_tiling_is_rejected() {
    let g = chain();
    let n = *g.nodes.keys().next().unwrap();
    let m = MappingConfig {
        intra_core_tiling: BTreeMap::from([(n, 3)]),
        ..MappingConfig::auto()
    };
    assert!(matches!(
        schedule(&g, &singletons(&g), &small_machine(), &m),
        Err(ScheduleError::InvalidMapping(_))
    ));
}

#[test]
fn tensor_parallel_splits_channels_over_array_cores() {
    let (g, n) = gemm(64, 64, 64);
    let hda = small_machine();
    let tp = schedule(&g, &singletons(&g), &hda, &MappingConfig::auto()).unwrap();
    let none = schedule(
        &g,
        &singletons(&g),
        &hda,
        &MappingConfig {
            parallelism: Parallelism::None,
            ..MappingConfig::auto()
        },
    )
    .unwrap();
    assert_eq!(tp.nodes[0].cores, vec![0, 1]);
    assert_eq!(tp.nodes[0].node, n);
    assert!(tp.latency_cycles < none.latency_cycles);
    // The gather costs link energy.
    assert!(tp.energy.link_pj > none.energy.link_pj);
}

#[test]
fn data_parallel_pays_weight_broadcast() {
    let (g, _) = gemm(64, 64, 64);
    let hda = small_machine();
    let dp = MappingConfig {
        parallelism: Parallelism::DataParallel { splits: 2 },
        ..MappingConfig::auto()
    };
    let r = schedule(&g, &singletons(&g), &hda, &dp).unwrap();
    assert_eq!(r.nodes[0].cores, vec![0, 1]);
}

#[test]
fn pipeline_stages_rotate_over_array_cores() {
    let mut g = ComputationGraph::default();
    let mut x = g.add_input(&[8, 8], 1, EdgeKind::Input);
    for _ in 0..3 {
        let w = g.add_input(&[8, 8], 1, EdgeKind::Weight);
        x = g
            .add_node(OpKind::Gemm, &[x, w], EdgeKind::Activation, Phase::Forward)
            .unwrap();
    }
    g.graph_outputs.push(x);
    let m = MappingConfig {
        parallelism: Parallelism::Pipeline {
            boundaries: vec![1, 2],
        },
        ..MappingConfig::auto()
    };
    let r = schedule(&g, &singletons(&g), &small_machine(), &m).unwrap();
    let cores: Vec<u32> = r.nodes.iter().map(|t| t.cores[0]).collect();
    assert_eq!(cores, vec![0, 1, 0]);
}

#[test]
fn timeline_csv_has_one_row_per_node() {
    let g = chain();
    let r = schedule(
        &g,
        &singletons(&g),
        &small_machine(),
        &MappingConfig::auto(),
    )
    .unwrap();
    let csv = r.timeline_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "node_id,core,start,end,energy_pJ");
    assert_eq!(lines.len(), 1 + g.nodes.len());
}

#[test]
fn evaluation_is_deterministic() {
    let g = build_resnet(&ResnetConfig::desk()).unwrap();
    let hda = edge_tpu_baseline();
    let f = FusionSetting::Auto(FusionLimits::default());
    let a = evaluate(&g, &hda, &MappingConfig::auto(), &f).unwrap();
    let b = evaluate(&g, &hda, &MappingConfig::auto(), &f).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn fusion_lowers_desk_resnet_inference_energy_on_baseline() {
    let g = build_resnet(&ResnetConfig::desk()).unwrap();
    let hda = edge_tpu_baseline();
    let m = MappingConfig::auto();
    let off = evaluate(&g, &hda, &m, &FusionSetting::Off).unwrap();
    let on = evaluate(&g, &hda, &m, &FusionSetting::Auto(FusionLimits::default())).unwrap();
    assert!(on.energy_pj < off.energy_pj);
    assert!(on.latency_cycles <= off.latency_cycles);
}

#[test]
fn more_compute_never_raises_compute_cycles() {
    let g = build_resnet(&ResnetConfig::desk()).unwrap();
    let small = crate::hda::edge_tpu_config(2, 2, 16, 1, 2.0, 64.0).unwrap();
    let big = crate::hda::edge_tpu_config(4, 4, 32, 2, 2.0, 64.0).unwrap();
    for n in g.nodes.keys() {
        let a = node_cost(&g, *n, &small.cores[0], 1).unwrap();
        let b = node_cost(&g, *n, &big.cores[0], 1).unwrap();
        assert!(b.compute_cycles <= a.compute_cycles);
    }
}

fn check_invariants(g: &ComputationGraph, parts: &[Vec<NodeId>], r: &ScheduleResult) {
    let timing: BTreeMap<NodeId, &NodeTiming> = r.nodes.iter().map(|t| (t.node, t)).collect();
    assert!(r.latency_cycles >= r.nodes.iter().map(|t| t.end).max().unwrap());
    // Exclusivity: distinct subgraphs on one core never overlap.
    let mut per_core: BTreeMap<u32, BTreeSet<(u64, u64, usize)>> = BTreeMap::new();
    for t in &r.nodes {
        assert!(t.end >= t.start);
        for c in &t.cores {
            per_core
                .entry(*c)
                .or_default()
                .insert((t.start, t.end, t.subgraph));
        }
    }
    for spans in per_core.values() {
        let v: Vec<_> = spans.iter().collect();
        for w in v.windows(2) {
            if w[0].2 != w[1].2 {
                assert!(w[0].1 <= w[1].0, "overlap {w:?}");
            }
        }
    }
    // Dependencies across subgraphs include an off-chip round trip.
    for e in g.edges.values() {
        let Some(p) = e.producer else { continue };
        for c in &e.consumers {
            if timing[&p].subgraph != timing[c].subgraph {
                assert!(timing[c].start >= timing[&p].end + 2);
            }
        }
    }
    // Energy additivity.
    let b = r.energy;
    for x in [b.compute_pj, b.on_chip_pj, b.off_chip_pj, b.link_pj] {
        assert!(x >= 0.0);
    }
    assert!((b.total() - r.energy_pj).abs() <= 1e-9 * r.energy_pj);
    let by_node: f64 = r.nodes.iter().map(|t| t.energy_pj).sum();
    assert!((by_node - r.energy_pj).abs() <= 1e-9 * r.energy_pj.max(1.0));
    assert_eq!(r.subgraph_count, parts.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedules_respect_resources_dependencies_and_energy(s in steps(10), fused in any::<bool>(), tp in any::<bool>()) {
        let g = random_dag(&s);
        let hda = small_machine();
        let m = MappingConfig {
            parallelism: if tp { Parallelism::default() } else { Parallelism::None },
            ..MappingConfig::auto()
        };
        let parts = if fused {
            fuse(&g, &hda, &m, &FusionLimits::default()).unwrap().subgraphs
        } else {
            singletons(&g)
        };
        let r = schedule(&g, &parts, &hda, &m).unwrap();
        check_invariants(&g, &parts, &r);
    }

    #[test]
    fn fusion_never_adds_offchip_bytes(s in steps(10), max_len in 2usize..6) {
        let g = random_dag(&s);
        let hda = small_machine();
        let m = MappingConfig::auto();
        let parts = fuse(&g, &hda, &m, &FusionLimits::with_max_len(max_len)).unwrap().subgraphs;
        let fused = schedule(&g, &parts, &hda, &m).unwrap();
        let base = schedule(&g, &singletons(&g), &hda, &m).unwrap();
        prop_assert!(fused.offchip_bytes <= base.offchip_bytes);
    }

    #[test]
    fn singleton_span_is_the_roofline(s in steps(8)) {
        let g = random_dag(&s);
        let hda = small_machine();
        let m = MappingConfig { parallelism: Parallelism::None, ..MappingConfig::auto() };
        let r = schedule(&g, &singletons(&g), &hda, &m).unwrap();
        for t in &r.nodes {
            let c = node_cost(&g, t.node, hda.core(t.cores[0]).unwrap(), m.tiles(&g, t.node)).unwrap();
            prop_assert_eq!(t.end - t.start, c.compute_cycles.max(c.memory_cycles));
        }
    }
}
