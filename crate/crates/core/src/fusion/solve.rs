use std::collections::{BTreeMap, HashMap};

use super::{CandidateSubgraph, FusedPartition};
use crate::graph::{topological_order, ComputationGraph, NodeId};

/// Candidate count above which the solver goes straight to the heuristic.
pub const DEFAULT_CANDIDATE_LIMIT: usize = 50_000;

/// Memo entries after which the exact search gives up on the heuristic.
pub const DEFAULT_STATE_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveOptions {
    pub candidate_limit: usize,
    pub state_limit: usize,
    /// Break count ties by the bytes crossing subgraph boundaries.
    pub minimize_cut_bytes: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            candidate_limit: DEFAULT_CANDIDATE_LIMIT,
            state_limit: DEFAULT_STATE_LIMIT,
            minimize_cut_bytes: false,
        }
    }
}

type Bits = Vec<u64>;

fn set(bits: &mut Bits, i: usize) {
    bits[i / 64] |= 1 << (i % 64);
}

fn get(bits: &Bits, i: usize) -> bool {
    bits[i / 64] >> (i % 64) & 1 == 1
}

struct Problem<'a> {
    cands: &'a [CandidateSubgraph],
    masks: Vec<Bits>,
    /// Per topological position, candidates containing that node, largest
    /// first.
    covering: Vec<Vec<usize>>,
    n: usize,
    cut: bool,
}

impl Problem<'_> {
    fn cost(&self, c: usize) -> (u32, u64) {
        (1, if self.cut { self.cands[c].cut_bytes } else { 0 })
    }

    fn disjoint(&self, covered: &Bits, c: usize) -> bool {
        covered.iter().zip(&self.masks[c]).all(|(a, b)| a & b == 0)
    }

    fn first_uncovered(&self, covered: &Bits) -> Option<usize> {
        (0..self.n).find(|i| !get(covered, *i))
    }
}

struct Exact<'p, 'a> {
    p: &'p Problem<'a>,
    memo: HashMap<Bits, ((u32, u64), usize)>,
    limit: usize,
}

impl Exact<'_, '_> {
    /// Best cost of covering the rest and the candidate chosen first, or
    /// `None` when the state budget runs out.
    fn solve(&mut self, covered: &Bits) -> Option<(u32, u64)> {
        let Some(first) = self.p.first_uncovered(covered) else {
            return Some((0, 0));
        };
        if let Some((c, _)) = self.memo.get(covered) {
            return Some(*c);
        }
        if self.memo.len() >= self.limit {
            return None;
        }
        let mut best: Option<((u32, u64), usize)> = None;
        for &c in &self.p.covering[first] {
            if !self.p.disjoint(covered, c) {
                continue;
            }
            let next: Bits = covered
                .iter()
                .zip(&self.p.masks[c])
                .map(|(a, b)| a | b)
                .collect();
            let rest = self.solve(&next)?;
            let own = self.p.cost(c);
            let total = (rest.0 + own.0, rest.1 + own.1);
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, c));
            }
        }
        let best = best.expect("the singleton always fits");
        self.memo.insert(covered.clone(), best);
        Some(best.0)
    }

    fn reconstruct(&self) -> Vec<usize> {
        let mut covered = vec![0; self.p.n.div_ceil(64)];
        let mut out = vec![];
        while self.p.first_uncovered(&covered).is_some() {
            let c = self.memo[&covered].1;
            for (a, b) in covered.iter_mut().zip(&self.p.masks[c]) {
                *a |= b;
            }
            out.push(c);
        }
        out
    }
}

/// Largest-first cover in topological order, then merges of two selected
/// subgraphs whose union is itself a candidate.
fn greedy(p: &Problem) -> Vec<usize> {
    let mut covered = vec![0; p.n.div_ceil(64)];
    let mut chosen = vec![];
    while let Some(first) = p.first_uncovered(&covered) {
        let c = *p.covering[first]
            .iter()
            .find(|c| p.disjoint(&covered, **c))
            .expect("the singleton always fits");
        for (a, b) in covered.iter_mut().zip(&p.masks[c]) {
            *a |= b;
        }
        chosen.push(c);
    }
    let by_set: HashMap<&Bits, usize> = p.masks.iter().enumerate().map(|(i, m)| (m, i)).collect();
    loop {
        let mut merged = None;
        'pairs: for i in 0..chosen.len() {
            for j in i + 1..chosen.len() {
                let u: Bits = p.masks[chosen[i]]
                    .iter()
                    .zip(&p.masks[chosen[j]])
                    .map(|(a, b)| a | b)
                    .collect();
                if let Some(&c) = by_set.get(&u) {
                    merged = Some((i, j, c));
                    break 'pairs;
                }
            }
        }
        let Some((i, j, c)) = merged else { break };
        chosen.remove(j);
        chosen[i] = c;
    }
    chosen
}

/// Groups candidates into independent subproblems: nodes sharing a
/// candidate belong to the same group.
fn components(
    n: usize,
    cands: &[CandidateSubgraph],
    pos: &BTreeMap<NodeId, usize>,
) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for c in cands {
        let first = find(&mut parent, pos[&c.nodes[0]]);
        for v in &c.nodes[1..] {
            let r = find(&mut parent, pos[v]);
            parent[r] = first;
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in cands.iter().enumerate() {
        let r = find(&mut parent, pos[&c.nodes[0]]);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Solves one group of candidates; returns chosen indices into `cands`.
fn solve_group(
    cands: &[CandidateSubgraph],
    group: &[usize],
    pos: &BTreeMap<NodeId, usize>,
    opts: &SolveOptions,
    budget: &mut usize,
) -> (Vec<usize>, bool) {
    // Local topological positions of the group's nodes.
    let mut nodes: Vec<usize> = group
        .iter()
        .flat_map(|c| cands[*c].nodes.iter().map(|v| pos[v]))
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let n = nodes.len();
    let words = n.div_ceil(64);
    let mut masks = Vec::with_capacity(group.len());
    let mut covering = vec![vec![]; n];
    let sub: Vec<CandidateSubgraph> = group.iter().map(|c| cands[*c].clone()).collect();
    for (i, c) in sub.iter().enumerate() {
        let mut m = vec![0; words];
        for v in &c.nodes {
            let l = local[&pos[v]];
            set(&mut m, l);
            covering[l].push(i);
        }
        masks.push(m);
    }
    for list in &mut covering {
        list.sort_by(|a, b| {
            sub[*b]
                .len()
                .cmp(&sub[*a].len())
                .then(sub[*a].cut_bytes.cmp(&sub[*b].cut_bytes))
                .then(sub[*a].nodes.cmp(&sub[*b].nodes))
        });
    }
    let p = Problem {
        cands: &sub,
        masks,
        covering,
        n,
        cut: opts.minimize_cut_bytes,
    };
    let (chosen, exact) = if n == 1 {
        (vec![0], true)
    } else {
        let mut ex = Exact {
            p: &p,
            memo: HashMap::new(),
            limit: *budget,
        };
        let r = ex.solve(&vec![0; words]);
        *budget = budget.saturating_sub(ex.memo.len());
        match r {
            Some(_) => (ex.reconstruct(), true),
            None => (greedy(&p), false),
        }
    };
    (chosen.into_iter().map(|i| group[i]).collect(), exact)
}

/// Exact cover of the graph's nodes by candidates with the fewest subgraphs
/// (optionally then the fewest boundary bytes). Groups of nodes that share
/// no candidate are solved independently. Within a group the exact search
/// branches on the first uncovered node in topological order, trying
/// covering candidates largest first, and memoizes on the covered set. Past
/// the candidate limit, or once the search has used `state_limit` memo
/// entries, the heuristic result is used and `exact` is false.
pub fn solve_partition(
    cands: &[CandidateSubgraph],
    g: &ComputationGraph,
    opts: &SolveOptions,
) -> FusedPartition {
    let topo = topological_order(g).expect("candidates come from an acyclic graph");
    let pos: BTreeMap<NodeId, usize> = topo.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut chosen = vec![];
    let mut exact = true;
    let mut budget = if cands.len() > opts.candidate_limit {
        0
    } else {
        opts.state_limit
    };
    for group in components(topo.len(), cands, &pos) {
        let (c, e) = solve_group(cands, &group, &pos, opts, &mut budget);
        chosen.extend(c);
        exact &= e;
    }
    let mut subgraphs: Vec<Vec<NodeId>> =
        chosen.into_iter().map(|c| cands[c].nodes.clone()).collect();
    subgraphs.sort();
    FusedPartition { subgraphs, exact }
}
