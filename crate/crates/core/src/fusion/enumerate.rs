use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{CandidateSubgraph, FusionLimits};
use crate::graph::{
    tensor_bytes, topological_order, ComputationGraph, EdgeId, EdgeKind, NodeId, OpClass,
};
use crate::hda::HdaSpec;
use crate::scheduler::{MappingConfig, ScheduleError};

/// Undirected neighbourhoods indexed by position in ascending node-id order.
pub struct Adjacency {
    pub ids: Vec<NodeId>,
    pub index: BTreeMap<NodeId, usize>,
    pub neighbours: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(g: &ComputationGraph) -> Self {
        let ids: Vec<NodeId> = g.nodes.keys().copied().collect();
        let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let neighbours = ids
            .iter()
            .map(|n| {
                let mut v: Vec<usize> = g
                    .successors(*n)
                    .union(&g.predecessors(*n))
                    .map(|m| index[m])
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        Adjacency {
            ids,
            index,
            neighbours,
        }
    }

    pub fn is_connected(&self, set: &BTreeSet<NodeId>) -> bool {
        let Some(first) = set.iter().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([self.index[first]]);
        let mut queue = VecDeque::from([self.index[first]]);
        while let Some(x) = queue.pop_front() {
            for &y in &self.neighbours[x] {
                if set.contains(&self.ids[y]) && seen.insert(y) {
                    queue.push_back(y);
                }
            }
        }
        seen.len() == set.len()
    }
}

/// No directed path leaves the set and comes back.
pub fn is_convex(g: &ComputationGraph, set: &BTreeSet<NodeId>) -> bool {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<NodeId> = set
        .iter()
        .flat_map(|n| g.successors(*n))
        .filter(|s| !set.contains(s))
        .collect();
    while let Some(x) = queue.pop_front() {
        if !seen.insert(x) {
            continue;
        }
        for s in g.successors(x) {
            if set.contains(&s) {
                return false;
            }
            queue.push_back(s);
        }
    }
    true
}

/// Members whose outputs are read outside the set or are graph outputs.
pub(crate) fn exiting_members(g: &ComputationGraph, set: &BTreeSet<NodeId>) -> usize {
    set.iter()
        .filter(|n| {
            g.node(**n).outputs.iter().any(|o| {
                g.graph_outputs.contains(o) || g.edge(*o).consumers.iter().any(|c| !set.contains(c))
            })
        })
        .count()
}

/// Index-based view of the graph for fast growth.
struct Dense {
    ids: Vec<NodeId>,
    neighbours: Vec<Vec<usize>>,
    succ: Vec<Vec<usize>>,
    topo: Vec<usize>,
    class: Vec<OpClass>,
    tiles: Vec<u32>,
    /// Edge indices touched by each node, deduplicated.
    touches: Vec<Vec<usize>>,
    edge_bytes: Vec<u64>,
    edge_producer: Vec<Option<usize>>,
    edge_consumers: Vec<Vec<usize>>,
    edge_resident: Vec<bool>,
    edge_exits: Vec<bool>,
    cap_any: Option<u64>,
    cap_array: Option<u64>,
}

impl Dense {
    fn new(
        g: &ComputationGraph,
        hda: &HdaSpec,
        mapping: &MappingConfig,
        adj: &Adjacency,
    ) -> Result<Self, ScheduleError> {
        let eidx: BTreeMap<EdgeId, usize> =
            g.edges.keys().enumerate().map(|(i, e)| (*e, i)).collect();
        let topo_order = topological_order(g)?;
        let mut topo = vec![0; adj.ids.len()];
        for (i, n) in topo_order.iter().enumerate() {
            topo[adj.index[n]] = i;
        }
        let outputs: BTreeSet<EdgeId> = g.graph_outputs.iter().copied().collect();
        let nodes = adj.ids.iter().map(|n| g.node(*n));
        Ok(Dense {
            ids: adj.ids.clone(),
            neighbours: adj.neighbours.clone(),
            succ: adj
                .ids
                .iter()
                .map(|n| g.successors(*n).iter().map(|s| adj.index[s]).collect())
                .collect(),
            topo,
            class: nodes.clone().map(|n| n.kind.class()).collect(),
            tiles: adj.ids.iter().map(|n| mapping.tiles(g, *n)).collect(),
            touches: nodes
                .map(|n| {
                    let mut v: Vec<usize> =
                        n.inputs.iter().chain(&n.outputs).map(|e| eidx[e]).collect();
                    v.sort_unstable();
                    v.dedup();
                    v
                })
                .collect(),
            edge_bytes: g.edges.values().map(tensor_bytes).collect(),
            edge_producer: g
                .edges
                .values()
                .map(|e| e.producer.map(|p| adj.index[&p]))
                .collect(),
            edge_consumers: g
                .edges
                .values()
                .map(|e| e.consumers.iter().map(|c| adj.index[c]).collect())
                .collect(),
            edge_resident: g
                .edges
                .values()
                .map(|e| {
                    e.producer.is_none()
                        && matches!(e.kind, EdgeKind::Weight | EdgeKind::OptimizerState)
                })
                .collect(),
            edge_exits: g.edges.keys().map(|e| outputs.contains(e)).collect(),
            cap_any: hda.cores.iter().map(|c| c.on_chip_capacity()).max(),
            cap_array: hda.array_cores().map(|c| c.on_chip_capacity()).max(),
        })
    }

    /// Same quantity as [`working_set`] on index sets.
    fn working_set(&self, set: &[usize], tiles: u64) -> u64 {
        let mut seen: Vec<usize> = Vec::with_capacity(set.len() * 4);
        let mut bytes = 0;
        for &n in set {
            for &e in &self.touches[n] {
                if seen.contains(&e) {
                    continue;
                }
                seen.push(e);
                let internal = self.edge_producer[e].is_some_and(|p| set.contains(&p))
                    && self.edge_consumers[e].iter().any(|c| set.contains(c));
                if internal {
                    bytes += self.edge_bytes[e].div_ceil(tiles);
                } else if self.edge_resident[e] {
                    bytes += self.edge_bytes[e];
                }
            }
        }
        bytes
    }

    fn capacity(&self, set: &[usize]) -> Option<u64> {
        if set
            .iter()
            .any(|n| matches!(self.class[*n], OpClass::Convolution | OpClass::Matrix))
        {
            self.cap_array
        } else {
            self.cap_any
        }
    }

    /// Outside nodes ordered after every member cannot lead back in.
    fn is_convex(&self, set: &[usize], stamp: &mut [u32], gen: u32) -> bool {
        let last = set.iter().map(|n| self.topo[*n]).max().unwrap_or(0);
        let mut stack: Vec<usize> = vec![];
        for &n in set {
            for &s in &self.succ[n] {
                if !set.contains(&s) && self.topo[s] < last && stamp[s] != gen {
                    stamp[s] = gen;
                    stack.push(s);
                }
            }
        }
        while let Some(x) = stack.pop() {
            for &s in &self.succ[x] {
                if set.contains(&s) {
                    return false;
                }
                if self.topo[s] < last && stamp[s] != gen {
                    stamp[s] = gen;
                    stack.push(s);
                }
            }
        }
        true
    }

    fn exiting(&self, set: &[usize]) -> usize {
        set.iter()
            .filter(|&&n| {
                self.touches[n].iter().any(|&e| {
                    self.edge_producer[e] == Some(n)
                        && (self.edge_exits[e]
                            || self.edge_consumers[e].iter().any(|c| !set.contains(c)))
                })
            })
            .count()
    }

    fn cut_bytes(&self, set: &[usize]) -> u64 {
        let mut b = 0;
        for &n in set {
            for &e in &self.touches[n] {
                if self.edge_producer[e] == Some(n)
                    && (self.edge_exits[e]
                        || self.edge_consumers[e].iter().any(|c| !set.contains(c)))
                {
                    b += self.edge_bytes[e];
                }
            }
        }
        b
    }
}

struct Grower<'a> {
    d: Dense,
    hda: &'a HdaSpec,
    limits: &'a FusionLimits,
    /// Members, in insertion order.
    set: Vec<usize>,
    /// How many members' closed neighbourhoods contain each node.
    near: Vec<u16>,
    stamp: Vec<u32>,
    gen: u32,
    conv: usize,
    gemm: usize,
    out: Vec<CandidateSubgraph>,
}

impl Grower<'_> {
    fn candidate(&self, sorted: &[usize], tiles: u64) -> CandidateSubgraph {
        let mut tiling: Vec<u32> = sorted.iter().map(|&i| self.d.tiles[i]).collect();
        tiling.sort_unstable();
        tiling.dedup();
        let array = sorted
            .iter()
            .any(|n| matches!(self.d.class[*n], OpClass::Convolution | OpClass::Matrix));
        let core = self
            .hda
            .cores
            .iter()
            .filter(|c| !array || c.dataflow.is_array())
            .max_by_key(|c| (c.on_chip_capacity(), std::cmp::Reverse(c.id)))
            .expect("a compatible core exists")
            .id;
        CandidateSubgraph {
            nodes: sorted.iter().map(|&i| self.d.ids[i]).collect(),
            working_set_bytes: self.d.working_set(sorted, tiles),
            core,
            tiling_set: tiling,
            conv_count: self.conv,
            gemm_count: self.gemm,
            multi_output_nodes: self.d.exiting(sorted),
            cut_bytes: self.d.cut_bytes(sorted),
        }
    }

    fn push(&mut self, w: usize) {
        self.set.push(w);
        self.near[w] += 1;
        for &u in &self.d.neighbours[w] {
            self.near[u] += 1;
        }
        match self.d.class[w] {
            OpClass::Convolution => self.conv += 1,
            OpClass::Matrix => self.gemm += 1,
            _ => {}
        }
    }

    fn pop(&mut self) {
        let w = self.set.pop().expect("non-empty");
        self.near[w] -= 1;
        for &u in &self.d.neighbours[w] {
            self.near[u] -= 1;
        }
        match self.d.class[w] {
            OpClass::Convolution => self.conv -= 1,
            OpClass::Matrix => self.gemm -= 1,
            _ => {}
        }
    }

    /// Tile count of the grown set if `w` may join, `None` when it breaks
    /// the operator-count, tiling or memory constraints.
    fn admits(&self, w: usize) -> Option<u64> {
        match self.d.class[w] {
            OpClass::Convolution if self.conv + 1 > self.limits.max_conv => return None,
            OpClass::Matrix if self.gemm + 1 > self.limits.max_gemm => return None,
            _ => {}
        }
        let t = self.d.tiles[w];
        let mut max_t = t;
        for &m in &self.set {
            let tm = self.d.tiles[m];
            if !t.is_multiple_of(tm) && !tm.is_multiple_of(t) {
                return None;
            }
            max_t = max_t.max(tm);
        }
        Some(max_t as u64)
    }

    /// Grows connected sets whose smallest member is `seed`; each set is
    /// reached along exactly one path. A set violating a constraint is not
    /// grown further.
    fn extend(&mut self, mut ext: Vec<usize>, seed: usize) {
        if self.set.len() == self.limits.max_len {
            return;
        }
        while !ext.is_empty() {
            let w = ext.remove(0);
            let Some(tiles) = self.admits(w) else {
                continue;
            };
            let mut next_ext = ext.clone();
            for &u in &self.d.neighbours[w] {
                if u > seed && self.near[u] == 0 {
                    next_ext.push(u);
                }
            }
            next_ext.sort_unstable();
            self.push(w);
            let mut sorted = self.set.clone();
            sorted.sort_unstable();
            let fits = self
                .d
                .capacity(&sorted)
                .is_some_and(|cap| self.d.working_set(&sorted, tiles) <= cap);
            if fits {
                self.gen += 1;
                if self.d.is_convex(&sorted, &mut self.stamp, self.gen) {
                    let c = self.candidate(&sorted, tiles);
                    self.out.push(c);
                }
                self.extend(next_ext, seed);
            }
            self.pop();
        }
    }
}

/// All singletons plus every connected subgraph of up to `max_len` nodes
/// reachable by growth from a seed node (in id order, adding neighbours in
/// ascending id order) without violating the memory, tiling or operator
/// count constraints. Non-convex sets are grown through but not emitted.
/// Output is sorted by node set.
pub fn enumerate_candidates(
    g: &ComputationGraph,
    hda: &HdaSpec,
    mapping: &MappingConfig,
    limits: &FusionLimits,
) -> Result<Vec<CandidateSubgraph>, ScheduleError> {
    let adj = Adjacency::new(g);
    let d = Dense::new(g, hda, mapping, &adj)?;
    let n = d.ids.len();
    for i in 0..n {
        let needs_array = matches!(d.class[i], OpClass::Convolution | OpClass::Matrix);
        if hda
            .cores
            .iter()
            .all(|c| needs_array && !c.dataflow.is_array())
        {
            return Err(ScheduleError::UnmappableNode(d.ids[i]));
        }
    }
    let mut grower = Grower {
        d,
        hda,
        limits,
        set: vec![],
        near: vec![0; n],
        stamp: vec![0; n],
        gen: 0,
        conv: 0,
        gemm: 0,
        out: vec![],
    };
    for seed in 0..n {
        grower.push(seed);
        let single = grower.candidate(&[seed], grower.d.tiles[seed] as u64);
        grower.out.push(single);
        let ext: Vec<usize> = grower.d.neighbours[seed]
            .iter()
            .copied()
            .filter(|u| *u > seed)
            .collect();
        grower.extend(ext, seed);
        grower.pop();
    }
    let mut out = grower.out;
    out.sort_by(|a, b| a.nodes.cmp(&b.nodes));
    Ok(out)
}

/// Keeps candidates with at most one exiting member; singletons always stay.
pub fn filter_single_output(
    cands: Vec<CandidateSubgraph>,
    _g: &ComputationGraph,
) -> Vec<CandidateSubgraph> {
    cands
        .into_iter()
        .filter(|c| c.len() == 1 || c.multi_output_nodes <= 1)
        .collect()
}
