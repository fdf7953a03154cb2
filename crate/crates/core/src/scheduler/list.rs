use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use super::cost::{batch_axis, channel_axis, compatible, split_cost, NodeCost, Split};
use super::mapping::{MappingConfig, Parallelism};
use super::{EnergyBreakdown, NodeTiming, ScheduleError, ScheduleResult};
use crate::graph::{
    tensor_bytes, topological_order, ComputationGraph, EdgeId, EdgeKind, NodeId, OperatorNode,
};
use crate::hda::{CoreId, CoreSpec, Endpoint, HdaSpec, OFFCHIP};

struct Placement {
    cores: Vec<CoreId>,
    cost: NodeCost,
    /// Extra cycles and link bytes for splitting the node.
    sync_cycles: u64,
    sync_bytes: u64,
}

/// Links are the only serialized transfer resource.
struct Fabric<'a> {
    hda: &'a HdaSpec,
    link_free: Vec<u64>,
    routes: BTreeMap<(Endpoint, Endpoint), Vec<usize>>,
}

#[derive(Default)]
struct TransferEnergy {
    link: f64,
    off_chip: f64,
}

impl<'a> Fabric<'a> {
    fn new(hda: &'a HdaSpec) -> Self {
        Fabric {
            hda,
            link_free: vec![0; hda.links.len()],
            routes: BTreeMap::new(),
        }
    }

    /// Fewest-hop path of link indices, ties broken by link order.
    fn route(&mut self, from: Endpoint, to: Endpoint) -> Vec<usize> {
        if let Some(r) = self.routes.get(&(from, to)) {
            return r.clone();
        }
        let mut prev: BTreeMap<Endpoint, (Endpoint, usize)> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(x) = queue.pop_front() {
            if x == to {
                break;
            }
            for (i, l) in self.hda.links.iter().enumerate() {
                let a = Endpoint::Core(l.a);
                let y = if a == x {
                    l.b
                } else if l.b == x {
                    a
                } else {
                    continue;
                };
                if seen.insert(y) {
                    prev.insert(y, (x, i));
                    queue.push_back(y);
                }
            }
        }
        let mut path = vec![];
        let mut cur = to;
        while cur != from {
            let (p, i) = prev[&cur];
            path.push(i);
            cur = p;
        }
        path.reverse();
        self.routes.insert((from, to), path.clone());
        path
    }

    /// Moves `bytes` store-and-forward along the route, starting no earlier
    /// than `ready`. Returns the arrival time.
    fn transfer(
        &mut self,
        from: Endpoint,
        to: Endpoint,
        bytes: u64,
        ready: u64,
        energy: &mut TransferEnergy,
    ) -> u64 {
        if bytes == 0 || from == to {
            return ready;
        }
        let off = &self.hda.offchip;
        let mut t = ready;
        let mut at = from;
        for i in self.route(from, to) {
            let l = &self.hda.links[i];
            let next = if Endpoint::Core(l.a) == at {
                l.b
            } else {
                Endpoint::Core(l.a)
            };
            let mut dur = (bytes as f64 / l.bandwidth_bytes_per_cycle).ceil() as u64;
            if at == OFFCHIP || next == OFFCHIP {
                let bw = if at == OFFCHIP {
                    off.read_bandwidth_bytes_per_cycle
                } else {
                    off.write_bandwidth_bytes_per_cycle
                };
                dur = dur.max((bytes as f64 / bw).ceil() as u64);
            }
            t = t.max(self.link_free[i]) + dur;
            self.link_free[i] = t;
            energy.link += bytes as f64 * l.energy_pj_per_byte;
            at = next;
        }
        if from == OFFCHIP {
            energy.off_chip += bytes as f64 * off.read_energy_pj_per_byte;
        }
        if to == OFFCHIP {
            energy.off_chip += bytes as f64 * off.write_energy_pj_per_byte;
        }
        t
    }

    fn slowest_offchip_link(&self, cores: &[CoreId]) -> f64 {
        cores
            .iter()
            .filter_map(|c| self.hda.link_between(Endpoint::Core(*c), OFFCHIP))
            .map(|i| self.hda.links[i].bandwidth_bytes_per_cycle)
            .fold(f64::INFINITY, f64::min)
            .min(self.hda.offchip.write_bandwidth_bytes_per_cycle)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

fn divisors_up_to(n: u64, cap: u64) -> Vec<u64> {
    (1..=cap.min(n)).filter(|d| n.is_multiple_of(*d)).collect()
}

struct Scheduler<'a> {
    g: &'a ComputationGraph,
    hda: &'a HdaSpec,
    mapping: &'a MappingConfig,
    topo_pos: BTreeMap<NodeId, usize>,
    /// Busy cycles accumulated per core, for least-loaded placement.
    load: BTreeMap<CoreId, u64>,
    core_free: BTreeMap<CoreId, u64>,
    array: Vec<CoreId>,
    simd: Vec<CoreId>,
}

impl Scheduler<'_> {
    fn least_loaded(&self, pool: &[CoreId], k: usize) -> Vec<CoreId> {
        let mut v = pool.to_vec();
        v.sort_by_key(|c| (self.load[c], *c));
        v.truncate(k);
        v.sort_unstable();
        v
    }

    fn core(&self, id: CoreId) -> &CoreSpec {
        self.hda.core(id).expect("validated core id")
    }

    fn place(&self, n: &OperatorNode, fabric: &Fabric) -> Result<Placement, ScheduleError> {
        let tiles = self.mapping.tiles(self.g, n.id);
        let single = |c: CoreId| -> Result<Placement, ScheduleError> {
            Ok(Placement {
                cores: vec![c],
                cost: split_cost(self.g, n, self.core(c), tiles, Split::None)?,
                sync_cycles: 0,
                sync_bytes: 0,
            })
        };
        if let Some(&c) = self.mapping.assignment.get(&n.id) {
            return single(c);
        }
        if !n.kind.needs_array() {
            let pool = if self.simd.is_empty() {
                &self.array
            } else {
                &self.simd
            };
            return single(self.least_loaded(pool, 1)[0]);
        }
        if self.array.is_empty() {
            return Err(ScheduleError::UnmappableNode(n.id));
        }
        let out_shape = &self.g.edge(n.outputs[0]).shape;
        let out_bytes = tensor_bytes(self.g.edge(n.outputs[0]));
        let splits: Vec<(Split, u64)> = match &self.mapping.parallelism {
            Parallelism::TensorParallel { max_splits } => {
                let cap = max_splits.map_or(self.array.len() as u64, |m| {
                    (m as u64).min(self.array.len() as u64)
                });
                let extent =
                    channel_axis(&n.kind, out_shape.len()).map_or(1, |a| out_shape[a] as u64);
                divisors_up_to(extent, cap)
                    .into_iter()
                    .map(|d| (Split::Channels(d as u32), out_bytes / d * (d - 1)))
                    .collect()
            }
            Parallelism::DataParallel { splits } => {
                let cap = (*splits as u64).min(self.array.len() as u64);
                let extent = batch_axis(&n.kind).map_or(1, |a| out_shape[a] as u64);
                let d = divisors_up_to(extent, cap).pop().unwrap_or(1);
                let w: u64 = n.inputs[1..]
                    .iter()
                    .map(|e| tensor_bytes(self.g.edge(*e)))
                    .sum();
                vec![(Split::Batch(d as u32), w * (d - 1))]
            }
            Parallelism::Pipeline { boundaries } => {
                let stage = boundaries.partition_point(|b| *b <= self.topo_pos[&n.id]);
                return single(self.array[stage % self.array.len()]);
            }
            Parallelism::None => vec![(Split::None, 0)],
        };
        let mut best: Option<Placement> = None;
        for (split, sync_bytes) in splits {
            let ways = split.ways() as usize;
            if ways == 1 {
                let c = self.least_loaded(&self.array, 1)[0];
                let p = single(c)?;
                if best
                    .as_ref()
                    .is_none_or(|b| p.cost.cycles < b.cost.cycles + b.sync_cycles)
                {
                    best = Some(p);
                }
                continue;
            }
            let cores = self.least_loaded(&self.array, ways);
            let cost = split_cost(self.g, n, self.core(cores[0]), tiles, split)?;
            let sync_cycles =
                (sync_bytes as f64 / fabric.slowest_offchip_link(&cores)).ceil() as u64;
            let total = cost.cycles + sync_cycles;
            if best
                .as_ref()
                .is_none_or(|b| total < b.cost.cycles + b.sync_cycles)
            {
                best = Some(Placement {
                    cores,
                    cost,
                    sync_cycles,
                    sync_bytes,
                });
            }
        }
        Ok(best.expect("at least one split is considered"))
    }
}

/// Orders subgraphs topologically, preferring the one whose earliest member
/// comes first in the node order.
fn order_subgraphs(
    g: &ComputationGraph,
    parts: &[Vec<NodeId>],
    owner: &BTreeMap<NodeId, usize>,
    topo_pos: &BTreeMap<NodeId, usize>,
) -> Result<Vec<usize>, ScheduleError> {
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); parts.len()];
    let mut indeg = vec![0usize; parts.len()];
    for n in g.nodes.values() {
        let a = owner[&n.id];
        for s in g.successors(n.id) {
            let b = owner[&s];
            if a != b && succ[a].insert(b) {
                indeg[b] += 1;
            }
        }
    }
    let key = |i: usize| parts[i].iter().map(|n| topo_pos[n]).min().unwrap_or(0);
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..parts.len())
        .filter(|i| indeg[*i] == 0)
        .map(|i| Reverse((key(i), i)))
        .collect();
    let mut order = Vec::with_capacity(parts.len());
    while let Some(Reverse((_, i))) = heap.pop() {
        order.push(i);
        for &j in &succ[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                heap.push(Reverse((key(j), j)));
            }
        }
    }
    if order.len() != parts.len() {
        return Err(ScheduleError::InvalidPartition(
            "subgraphs depend on each other cyclically".into(),
        ));
    }
    Ok(order)
}

/// Validates that `parts` is an exact cover of the graph's nodes and returns
/// the owning subgraph of each node.
pub(crate) fn cover_map(
    g: &ComputationGraph,
    parts: &[Vec<NodeId>],
) -> Result<BTreeMap<NodeId, usize>, ScheduleError> {
    let mut owner = BTreeMap::new();
    for (i, p) in parts.iter().enumerate() {
        if p.is_empty() {
            return Err(ScheduleError::InvalidPartition(format!(
                "subgraph {i} is empty"
            )));
        }
        for n in p {
            if !g.nodes.contains_key(n) {
                return Err(ScheduleError::InvalidPartition(format!("unknown node {n}")));
            }
            if owner.insert(*n, i).is_some() {
                return Err(ScheduleError::InvalidPartition(format!(
                    "node {n} is covered twice"
                )));
            }
        }
    }
    if let Some(n) = g.nodes.keys().find(|n| !owner.contains_key(n)) {
        return Err(ScheduleError::InvalidPartition(format!(
            "node {n} is not covered"
        )));
    }
    Ok(owner)
}

/// Bytes a subgraph keeps on chip: its internal tensors divided into tiles
/// plus the weights its members read.
pub fn working_set(g: &ComputationGraph, members: &BTreeSet<NodeId>, tiles: u64) -> u64 {
    let mut bytes = 0;
    let mut seen = BTreeSet::new();
    for n in members {
        let node = g.node(*n);
        for e in node.inputs.iter().chain(&node.outputs) {
            if !seen.insert(*e) {
                continue;
            }
            let edge = g.edge(*e);
            let internal = edge.producer.is_some_and(|p| members.contains(&p))
                && edge.consumers.iter().any(|c| members.contains(c));
            if internal {
                bytes += tensor_bytes(edge).div_ceil(tiles);
            } else if matches!(edge.kind, EdgeKind::Weight | EdgeKind::OptimizerState)
                && edge.producer.is_none()
            {
                bytes += tensor_bytes(edge);
            }
        }
    }
    bytes
}

/// Fails with [`ScheduleError::MemoryExceeded`] unless some core compatible
/// with every member holds the working set.
pub fn check_fits(
    g: &ComputationGraph,
    members: &BTreeSet<NodeId>,
    tiles: u64,
    hda: &HdaSpec,
) -> Result<(), ScheduleError> {
    let ws = working_set(g, members, tiles);
    let best = hda
        .cores
        .iter()
        .filter(|c| members.iter().all(|m| compatible(&g.node(*m).kind, c)))
        .max_by_key(|c| (c.on_chip_capacity(), Reverse(c.id)));
    match best {
        Some(c) if ws <= c.on_chip_capacity() => Ok(()),
        Some(c) => Err(ScheduleError::MemoryExceeded {
            core: c.id,
            subgraph: members.iter().copied().collect(),
            bytes: ws,
            capacity: c.on_chip_capacity(),
        }),
        None => Err(ScheduleError::UnmappableNode(
            *members.iter().next().expect("non-empty"),
        )),
    }
}

pub fn schedule(
    g: &ComputationGraph,
    parts: &[Vec<NodeId>],
    hda: &HdaSpec,
    mapping: &MappingConfig,
) -> Result<ScheduleResult, ScheduleError> {
    mapping.validate(g, hda)?;
    let owner = cover_map(g, parts)?;
    let topo = topological_order(g)?;
    let topo_pos: BTreeMap<NodeId, usize> = topo.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let order = order_subgraphs(g, parts, &owner, &topo_pos)?;
    for (n, c) in &mapping.assignment {
        if !compatible(&g.node(*n).kind, hda.core(*c).expect("validated")) {
            return Err(ScheduleError::IncompatibleCore { node: *n, core: *c });
        }
    }
    let mut s = Scheduler {
        g,
        hda,
        mapping,
        topo_pos,
        load: hda.cores.iter().map(|c| (c.id, 0)).collect(),
        core_free: hda.cores.iter().map(|c| (c.id, 0)).collect(),
        array: hda.array_cores().map(|c| c.id).collect(),
        simd: hda.simd_cores().map(|c| c.id).collect(),
    };
    let mut fabric = Fabric::new(hda);
    let mut energy = EnergyBreakdown::default();
    let mut edge_ready: BTreeMap<EdgeId, u64> = BTreeMap::new();
    let mut node_energy: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut timings: BTreeMap<NodeId, NodeTiming> = BTreeMap::new();
    let mut sg_end: Vec<u64> = vec![0; parts.len()];
    let mut peak_core: BTreeMap<CoreId, u64> = hda.cores.iter().map(|c| (c.id, 0)).collect();
    let mut offchip_bytes = 0u64;
    let outputs: BTreeSet<EdgeId> = g.graph_outputs.iter().copied().collect();

    for &sg in &order {
        let mut members = parts[sg].clone();
        members.sort_by_key(|n| s.topo_pos[n]);
        let member_set: BTreeSet<NodeId> = members.iter().copied().collect();
        let mut placed: BTreeMap<NodeId, Placement> = BTreeMap::new();
        for &m in &members {
            let p = s.place(g.node(m), &fabric)?;
            for c in &p.cores {
                *s.load.get_mut(c).expect("known core") += p.cost.cycles + p.sync_cycles;
            }
            placed.insert(m, p);
        }
        let tiles = members
            .iter()
            .map(|m| mapping.tiles(g, *m) as u64)
            .fold(1, lcm)
            .max(1);

        // Inputs from outside the subgraph come from off-chip memory.
        let mut ready = 0u64;
        let mut loaded = BTreeSet::new();
        for &m in &members {
            for &e in &g.node(m).inputs {
                let edge = g.edge(e);
                if edge.producer.is_some_and(|p| member_set.contains(&p)) || !loaded.insert(e) {
                    continue;
                }
                let mut te = TransferEnergy::default();
                let dest = Endpoint::Core(placed[&m].cores[0]);
                let bytes = tensor_bytes(edge);
                let at = fabric.transfer(
                    OFFCHIP,
                    dest,
                    bytes,
                    edge_ready.get(&e).copied().unwrap_or(0),
                    &mut te,
                );
                offchip_bytes += bytes;
                ready = ready.max(at);
                energy.link_pj += te.link;
                energy.off_chip_pj += te.off_chip;
                *node_energy.entry(m).or_default() += te.link + te.off_chip;
            }
        }

        // Pipelined tile model: each core's per-tile load is the sum of its
        // members' per-tile cycles; the slowest core sets the steady state.
        let mut stage: BTreeMap<CoreId, f64> = BTreeMap::new();
        let mut fill = 0.0;
        for &m in &members {
            let p = &placed[&m];
            let per_tile = (p.cost.cycles + p.sync_cycles) as f64 / tiles as f64;
            let mut xfer = 0.0;
            for &e in &g.node(m).inputs {
                let Some(prod) = g.edge(e).producer.filter(|p| member_set.contains(p)) else {
                    continue;
                };
                let src = placed[&prod].cores[0];
                let dst = p.cores[0];
                if src != dst {
                    let bytes = tensor_bytes(g.edge(e));
                    let route = fabric.route(Endpoint::Core(src), Endpoint::Core(dst));
                    for i in route {
                        let l = &hda.links[i];
                        xfer += bytes as f64 / tiles as f64 / l.bandwidth_bytes_per_cycle;
                        let e = bytes as f64 * l.energy_pj_per_byte;
                        energy.link_pj += e;
                        *node_energy.entry(m).or_default() += e;
                    }
                }
            }
            for c in &p.cores {
                *stage.entry(*c).or_default() += per_tile + xfer;
            }
            fill += per_tile + xfer;
        }
        let steady = stage.values().copied().fold(0.0, f64::max);
        let span = if members.len() == 1 {
            let p = &placed[&members[0]];
            p.cost.cycles + p.sync_cycles
        } else {
            (tiles as f64 * steady + fill - steady - 1e-9).ceil() as u64
        };

        let used: BTreeSet<CoreId> = stage.keys().copied().collect();
        let start = used.iter().map(|c| s.core_free[c]).fold(ready, u64::max);
        let end = start + span;
        for c in &used {
            s.core_free.insert(*c, end);
        }

        // A fused subgraph must fit in the on-chip memory of one core able to
        // run all of its members.
        if members.len() > 1 {
            check_fits(g, &member_set, tiles, hda)?;
        }
        for &c in &used {
            let on_core: BTreeSet<NodeId> = members
                .iter()
                .copied()
                .filter(|m| placed[m].cores.contains(&c))
                .collect();
            let ws = working_set(g, &on_core, tiles).min(s.core(c).on_chip_capacity());
            let peak = peak_core.get_mut(&c).expect("known core");
            *peak = (*peak).max(ws);
        }

        // Outputs used outside the subgraph are written back to off-chip.
        let mut finish = end;
        for &m in &members {
            let p = &placed[&m];
            let mut e_node = p.cost.energy_pj() + p.sync_bytes as f64 * crate::hda::energy::LINK;
            energy.compute_pj += p.cost.compute_energy_pj;
            energy.on_chip_pj += p.cost.on_chip_energy_pj;
            energy.link_pj += p.sync_bytes as f64 * crate::hda::energy::LINK;
            for &o in &g.node(m).outputs {
                let edge = g.edge(o);
                let leaves =
                    outputs.contains(&o) || edge.consumers.iter().any(|c| !member_set.contains(c));
                if !leaves {
                    edge_ready.insert(o, end);
                    continue;
                }
                let mut te = TransferEnergy::default();
                let bytes = tensor_bytes(edge);
                let at = fabric.transfer(Endpoint::Core(p.cores[0]), OFFCHIP, bytes, end, &mut te);
                offchip_bytes += bytes;
                edge_ready.insert(o, at);
                finish = finish.max(at);
                energy.link_pj += te.link;
                energy.off_chip_pj += te.off_chip;
                e_node += te.link + te.off_chip;
            }
            *node_energy.entry(m).or_default() += e_node;
            timings.insert(
                m,
                NodeTiming {
                    node: m,
                    cores: p.cores.clone(),
                    start,
                    end,
                    energy_pj: 0.0,
                    subgraph: sg,
                },
            );
        }
        sg_end[sg] = finish;
    }
    let latency = sg_end.iter().copied().max().unwrap_or(0);
    let mut nodes: Vec<NodeTiming> = timings.into_values().collect();
    for t in &mut nodes {
        t.energy_pj = node_energy[&t.node];
    }
    let peak_activation_bytes = peak_activation(g, &nodes, &edge_ready, latency);
    let total = energy.total();
    Ok(ScheduleResult {
        nodes,
        latency_cycles: latency,
        energy_pj: total,
        energy,
        peak_core_memory_bytes: peak_core,
        peak_activation_bytes,
        offchip_bytes,
        subgraph_count: parts.len(),
    })
}

/// Largest total size of simultaneously live activation tensors: a tensor is
/// live from when it is available until its last consumer finishes.
fn peak_activation(
    g: &ComputationGraph,
    nodes: &[NodeTiming],
    ready: &BTreeMap<EdgeId, u64>,
    latency: u64,
) -> u64 {
    let end: BTreeMap<NodeId, u64> = nodes.iter().map(|t| (t.node, t.end)).collect();
    let outputs: BTreeSet<EdgeId> = g.graph_outputs.iter().copied().collect();
    let mut events: Vec<(u64, i8, u64)> = vec![];
    for e in g.edges.values() {
        if !matches!(
            e.kind,
            EdgeKind::Activation | EdgeKind::Input | EdgeKind::Label
        ) {
            continue;
        }
        let from = ready.get(&e.id).copied().unwrap_or(0);
        let mut to = e.consumers.iter().map(|c| end[c]).max().unwrap_or(from);
        if outputs.contains(&e.id) {
            to = latency;
        }
        let b = tensor_bytes(e);
        events.push((from, 1, b));
        // Half-open, at least one cycle long.
        events.push((to.max(from + 1), -1, b));
    }
    // Frees at a time step happen before allocations.
    events.sort_by_key(|&(t, d, _)| (t, d));
    let (mut live, mut peak) = (0u64, 0u64);
    for (_, d, b) in events {
        if d > 0 {
            live += b;
            peak = peak.max(live);
        } else {
            live -= b;
        }
    }
    peak
}
