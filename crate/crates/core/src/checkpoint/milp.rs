use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CheckpointError, CheckpointPlan};
use crate::autodiff::Activation;
use crate::graph::EdgeId;

/// Largest scaled budget grid solved by dynamic programming.
pub const DP_GRID_LIMIT: u64 = 10_000_000;
/// Cap on the DP decision table, in bits.
const DP_TABLE_BITS: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilpItem {
    pub id: EdgeId,
    pub bytes: u64,
    pub recompute_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilpInstance {
    pub items: Vec<MilpItem>,
    pub budget: u64,
}

impl MilpInstance {
    pub fn from_activations(acts: &[Activation], budget: u64) -> Self {
        MilpInstance {
            items: acts
                .iter()
                .map(|a| MilpItem {
                    id: a.edge,
                    bytes: a.bytes,
                    recompute_macs: a.recompute_macs,
                })
                .collect(),
            budget,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.items.iter().map(|i| i.bytes).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Auto,
    DynamicProgramming,
    BranchAndBound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilpSolution {
    pub plan: CheckpointPlan,
    /// Total recompute cost of the discarded activations.
    pub objective: u64,
    pub saved_bytes: u64,
    pub solver: Solver,
}

/// Minimizes the recompute cost of the discarded activations subject to the
/// saved bytes fitting in the budget. Among optimal plans the one saving the
/// earliest ids is returned (the largest decision vector in id order).
pub fn solve_checkpoint_milp(inst: &MilpInstance) -> Result<MilpSolution, CheckpointError> {
    solve_with(inst, Solver::Auto)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn solve_with(inst: &MilpInstance, solver: Solver) -> Result<MilpSolution, CheckpointError> {
    let mut items = inst.items.clone();
    items.sort_by_key(|i| i.id);
    if let Some(w) = items.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(CheckpointError::InvalidInstance(format!(
            "duplicate item {}",
            w[0].id
        )));
    }
    let total: u64 = items.iter().map(|i| i.bytes).sum();
    let grid = items.iter().fold(0, |g, i| gcd(g, i.bytes)).max(1);
    let cap = inst.budget.min(total) / grid;
    let table_bits = (items.len() as u64).saturating_mul(cap + 1);
    let solver = match solver {
        Solver::Auto if total / grid <= DP_GRID_LIMIT && table_bits <= DP_TABLE_BITS => {
            Solver::DynamicProgramming
        }
        Solver::Auto => Solver::BranchAndBound,
        s => s,
    };
    let take = match solver {
        Solver::DynamicProgramming => dp(&items, grid, cap),
        _ => branch_and_bound(&items, inst.budget.min(total)),
    };
    let decisions: BTreeMap<EdgeId, bool> =
        items.iter().zip(&take).map(|(i, &t)| (i.id, t)).collect();
    let objective = items
        .iter()
        .zip(&take)
        .filter(|(_, t)| !**t)
        .map(|(i, _)| i.recompute_macs)
        .sum();
    let saved_bytes = items
        .iter()
        .zip(&take)
        .filter(|(_, t)| **t)
        .map(|(i, _)| i.bytes)
        .sum();
    Ok(MilpSolution {
        plan: CheckpointPlan { decisions },
        objective,
        saved_bytes,
        solver,
    })
}

/// Suffix knapsack over capacities `0..=cap` in units of `grid` bytes. Bit
/// `(i, w)` records that taking item `i` is optimal for items `i..` at
/// capacity `w`; ties favour taking, which yields the largest decision vector.
fn dp(items: &[MilpItem], grid: u64, cap: u64) -> Vec<bool> {
    let width = cap as usize + 1;
    let mut best = vec![0u64; width];
    let mut bits = vec![0u64; (items.len() * width).div_ceil(64)];
    for (i, it) in items.iter().enumerate().rev() {
        let m = (it.bytes / grid) as usize;
        for w in (m..width).rev() {
            let cand = best[w - m] + it.recompute_macs;
            if cand >= best[w] {
                best[w] = cand;
                let b = i * width + w;
                bits[b / 64] |= 1 << (b % 64);
            }
        }
    }
    let mut w = cap as usize;
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let b = i * width + w;
            let t = bits[b / 64] >> (b % 64) & 1 == 1;
            if t {
                w -= (it.bytes / grid) as usize;
            }
            t
        })
        .collect()
}

/// Depth-first search in id order, taking before skipping, with a fractional
/// relaxation bound. Only strict improvements replace the incumbent, so the
/// first optimum found is the largest decision vector.
fn branch_and_bound(items: &[MilpItem], budget: u64) -> Vec<bool> {
    let n = items.len();
    let mut by_ratio: Vec<usize> = (0..n).collect();
    // r_i / m_i descending, compared by cross-multiplication; free items first.
    by_ratio.sort_by(|&a, &b| {
        let (ia, ib) = (&items[a], &items[b]);
        let lhs = ib.recompute_macs as u128 * ia.bytes as u128;
        let rhs = ia.recompute_macs as u128 * ib.bytes as u128;
        lhs.cmp(&rhs).then(a.cmp(&b))
    });
    let bound = |from: usize, room: u64| -> f64 {
        let mut room = room as f64;
        let mut v = 0.0;
        for &k in &by_ratio {
            if k < from {
                continue;
            }
            let it = &items[k];
            if (it.bytes as f64) <= room {
                room -= it.bytes as f64;
                v += it.recompute_macs as f64;
            } else {
                v += it.recompute_macs as f64 * room / it.bytes as f64;
                break;
            }
        }
        v
    };
    struct Search {
        best: Option<(u64, Vec<bool>)>,
        cur: Vec<bool>,
    }
    fn go(
        s: &mut Search,
        items: &[MilpItem],
        bound: &dyn Fn(usize, u64) -> f64,
        i: usize,
        room: u64,
        value: u64,
    ) {
        if i == items.len() {
            if s.best.as_ref().is_none_or(|(b, _)| value > *b) {
                s.best = Some((value, s.cur.clone()));
            }
            return;
        }
        if let Some((b, _)) = &s.best {
            // Rounding slack keeps the bound admissible.
            if (value as f64 + bound(i, room)) * (1.0 + 1e-12) + 1e-6 < (*b + 1) as f64 {
                return;
            }
        }
        if items[i].bytes <= room {
            s.cur[i] = true;
            go(
                s,
                items,
                bound,
                i + 1,
                room - items[i].bytes,
                value + items[i].recompute_macs,
            );
            s.cur[i] = false;
        }
        go(s, items, bound, i + 1, room, value);
    }
    let mut s = Search {
        best: None,
        cur: vec![false; n],
    };
    go(&mut s, items, &bound, 0, budget, 0);
    s.best.map(|(_, v)| v).unwrap_or_else(|| vec![false; n])
}

/// Exhaustive reference over all subsets, with the same tie-breaking.
#[cfg(test)]
pub(crate) fn brute_force(inst: &MilpInstance) -> (u64, std::collections::BTreeSet<EdgeId>) {
    let mut items = inst.items.clone();
    items.sort_by_key(|i| i.id);
    let n = items.len();
    let mut best: Option<(u64, Vec<bool>)> = None;
    for mask in 0u64..(1 << n) {
        let x: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let bytes: u64 = items
            .iter()
            .zip(&x)
            .filter(|(_, t)| **t)
            .map(|(i, _)| i.bytes)
            .sum();
        if bytes > inst.budget {
            continue;
        }
        let obj: u64 = items
            .iter()
            .zip(&x)
            .filter(|(_, t)| !**t)
            .map(|(i, _)| i.recompute_macs)
            .sum();
        let better = match &best {
            None => true,
            Some((b, bx)) => obj < *b || (obj == *b && x > *bx),
        };
        if better {
            best = Some((obj, x));
        }
    }
    let (obj, x) = best.expect("the empty plan is always feasible");
    (
        obj,
        items
            .iter()
            .zip(&x)
            .filter(|(_, t)| **t)
            .map(|(i, _)| i.id)
            .collect(),
    )
}
