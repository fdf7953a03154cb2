//! Random graphs and small accelerators shared by unit tests.

use proptest::prelude::*;

use crate::graph::{ComputationGraph, EdgeId, EdgeKind, OpKind, Phase};
use crate::hda::{CoreSpec, Dataflow, Endpoint, HdaSpec, Link, MemoryLevel, OFFCHIP};

/// One random node: operator selector and two predecessor selectors.
pub type Step = (u8, u16, u16);

/// A DAG of `[4, 8]` tensors built from Gemm, ReLU, Gelu and Add nodes.
/// Every unconsumed tensor is a graph output.
pub fn random_dag(steps: &[Step]) -> ComputationGraph {
    let mut g = ComputationGraph::default();
    let x = g.add_input(&[4, 8], 4, EdgeKind::Input);
    let mut avail: Vec<EdgeId> = vec![x];
    for &(k, a, b) in steps {
        let a = avail[a as usize % avail.len()];
        let b = avail[b as usize % avail.len()];
        let y = match k % 4 {
            0 => {
                let w = g.add_input(&[8, 8], 4, EdgeKind::Weight);
                g.add_node(OpKind::Gemm, &[a, w], EdgeKind::Activation, Phase::Forward)
            }
            1 => g.add_node(OpKind::ReLU, &[a], EdgeKind::Activation, Phase::Forward),
            2 => g.add_node(OpKind::Gelu, &[a], EdgeKind::Activation, Phase::Forward),
            _ => g.add_node(OpKind::Add, &[a, b], EdgeKind::Activation, Phase::Forward),
        }
        .expect("shapes agree");
        avail.push(y);
    }
    g.graph_outputs = g
        .edges
        .values()
        .filter(|e| e.producer.is_some() && e.consumers.is_empty())
        .map(|e| e.id)
        .collect();
    g
}

pub fn steps(max: usize) -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec((any::<u8>(), any::<u16>(), any::<u16>()), 1..=max)
}

pub fn level(capacity: u64, bandwidth: f64) -> MemoryLevel {
    MemoryLevel::uniform("local", Some(capacity), bandwidth, 1.0)
}

pub fn core(id: u32, dataflow: Dataflow, pes: u32, capacity: u64, bandwidth: f64) -> CoreSpec {
    CoreSpec {
        id,
        dataflow,
        pe_dims: vec![pes],
        ops_per_pe_per_cycle: 1,
        mac_energy_pj: 1.0,
        memory_levels: vec![level(capacity, bandwidth)],
    }
}

/// Cores fully connected to each other and each linked to off-chip memory.
pub fn machine(cores: Vec<CoreSpec>, offchip_bw: f64) -> HdaSpec {
    let mut links = vec![];
    for (i, a) in cores.iter().enumerate() {
        links.push(Link {
            a: a.id,
            b: OFFCHIP,
            bandwidth_bytes_per_cycle: offchip_bw,
            energy_pj_per_byte: 1.0,
        });
        for b in &cores[i + 1..] {
            links.push(Link {
                a: a.id,
                b: Endpoint::Core(b.id),
                bandwidth_bytes_per_cycle: 64.0,
                energy_pj_per_byte: 1.0,
            });
        }
    }
    let spec = HdaSpec {
        name: "test".into(),
        cores,
        links,
        offchip: MemoryLevel::uniform("offchip", None, offchip_bw, 20.0),
    };
    spec.validate().expect("test machine is valid");
    spec
}

/// Two weight-stationary cores and one vector core, 1 MiB each.
pub fn small_machine() -> HdaSpec {
    machine(
        vec![
            core(0, Dataflow::WeightStationary, 16, 1 << 20, 64.0),
            core(1, Dataflow::WeightStationary, 16, 1 << 20, 64.0),
            core(2, Dataflow::SimdVector, 16, 1 << 20, 64.0),
        ],
        16.0,
    )
}
