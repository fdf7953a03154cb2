use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{hypervolume, GaError, GaParams};
use crate::scheduler::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Individual {
    pub genome: Vec<bool>,
    pub objectives: Vec<f64>,
    pub rank: usize,
    /// `None` stands for an infinite distance (front boundary).
    pub crowding: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub generation: usize,
    pub population: Vec<Individual>,
    pub archive_size: usize,
    /// Of the archive, with objectives scaled by the reference point.
    pub hypervolume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaOutcome {
    /// Every non-dominated point evaluated during the run, sorted by
    /// objectives.
    pub archive: Vec<Individual>,
    pub snapshots: Vec<Snapshot>,
    /// 1.1 times the worst generation-0 value of each objective.
    pub reference: Vec<f64>,
    pub evaluations: usize,
}

/// No worse on every objective and better on at least one.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Pareto fronts as index lists, front 0 first, each ascending.
pub fn fast_nondominated_sort(objs: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = objs.len();
    let mut dominated: Vec<Vec<usize>> = vec![vec![]; n];
    let mut count = vec![0usize; n];
    let mut front = vec![];
    for p in 0..n {
        for q in 0..n {
            if dominates(&objs[p], &objs[q]) {
                dominated[p].push(q);
            } else if dominates(&objs[q], &objs[p]) {
                count[p] += 1;
            }
        }
        if count[p] == 0 {
            front.push(p);
        }
    }
    let mut fronts = vec![];
    while !front.is_empty() {
        let mut next = vec![];
        for &p in &front {
            for &q in &dominated[p] {
                count[q] -= 1;
                if count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(front);
        front = next;
    }
    fronts
}

/// Crowding distance of each member of `front`, in front order; `None` is
/// infinite.
pub fn crowding_distance(objs: &[Vec<f64>], front: &[usize]) -> Vec<Option<f64>> {
    let mut dist: Vec<Option<f64>> = vec![Some(0.0); front.len()];
    let Some(first) = front.first() else {
        return dist;
    };
    for k in 0..objs[*first].len() {
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|a, b| {
            objs[front[*a]][k]
                .total_cmp(&objs[front[*b]][k])
                .then(a.cmp(b))
        });
        let lo = objs[front[order[0]]][k];
        let hi = objs[front[*order.last().expect("non-empty")]][k];
        dist[order[0]] = None;
        dist[*order.last().expect("non-empty")] = None;
        if hi <= lo {
            continue;
        }
        for w in order.windows(3) {
            if let Some(d) = dist[w[1]].as_mut() {
                *d += (objs[front[w[2]]][k] - objs[front[w[0]]][k]) / (hi - lo);
            }
        }
    }
    dist
}

/// Larger is better; infinite beats everything.
fn crowd_cmp(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Greater,
        (Some(_), None) => Ordering::Less,
        (Some(x), Some(y)) => x.total_cmp(&y),
    }
}

/// Ranks and crowding for `pop`, and the indices of the best `keep`.
fn select(pop: &[(Vec<bool>, Vec<f64>)], keep: usize) -> Vec<Individual> {
    let objs: Vec<Vec<f64>> = pop.iter().map(|p| p.1.clone()).collect();
    let mut out = vec![];
    for (rank, front) in fast_nondominated_sort(&objs).into_iter().enumerate() {
        if out.len() >= keep {
            break;
        }
        let crowd = crowding_distance(&objs, &front);
        let mut members: Vec<(usize, Option<f64>)> = front.into_iter().zip(crowd).collect();
        if out.len() + members.len() > keep {
            members.sort_by(|a, b| crowd_cmp(b.1, a.1).then(a.0.cmp(&b.0)));
            members.truncate(keep - out.len());
            members.sort_by_key(|m| m.0);
        }
        out.extend(members.into_iter().map(|(i, crowding)| Individual {
            genome: pop[i].0.clone(),
            objectives: pop[i].1.clone(),
            rank,
            crowding,
        }));
    }
    out
}

fn better(a: &Individual, b: &Individual) -> bool {
    a.rank < b.rank || (a.rank == b.rank && crowd_cmp(a.crowding, b.crowding) == Ordering::Greater)
}

struct Archive {
    points: Vec<(Vec<bool>, Vec<f64>)>,
}

impl Archive {
    fn offer(&mut self, genome: &[bool], objs: &[f64]) {
        if self
            .points
            .iter()
            .any(|(g, o)| g == genome || dominates(o, objs))
        {
            return;
        }
        self.points.retain(|(_, o)| !dominates(objs, o));
        self.points.push((genome.to_vec(), objs.to_vec()));
    }

    fn scaled_hypervolume(&self, reference: &[f64]) -> f64 {
        let pts: Vec<Vec<f64>> = self
            .points
            .iter()
            .map(|(_, o)| o.iter().zip(reference).map(|(x, r)| x / r).collect())
            .collect();
        hypervolume(&pts, &vec![1.0; reference.len()])
    }

    fn members(&self) -> Vec<Individual> {
        let mut v: Vec<Individual> = self
            .points
            .iter()
            .map(|(g, o)| Individual {
                genome: g.clone(),
                objectives: o.clone(),
                rank: 0,
                crowding: None,
            })
            .collect();
        v.sort_by(|a, b| {
            a.objectives
                .iter()
                .zip(&b.objectives)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
                .then(a.genome.cmp(&b.genome))
        });
        v
    }
}

/// Elitist NSGA-II over genomes of `len` bits. `eval` maps a batch of
/// genomes to objective vectors (all minimized). Generation 0 is `seeds`
/// filled up with random genomes; each later generation breeds a child
/// population by binary tournament, uniform crossover and per-bit mutation,
/// then keeps the best of parents and children. Every evaluated point is
/// offered to an external archive of non-dominated points, so the archive's
/// hypervolume never decreases.
pub fn nsga2(
    len: usize,
    seeds: &[Vec<bool>],
    params: &GaParams,
    mut eval: impl FnMut(&[Vec<bool>]) -> Result<Vec<Vec<f64>>, EvalError>,
) -> Result<GaOutcome, GaError> {
    params.validate()?;
    if len == 0 {
        return Err(GaError::EmptyGenome);
    }
    let n = params.population;
    let pm = params.mutation_prob.unwrap_or(1.0 / len as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut genomes: Vec<Vec<bool>> = seeds.iter().take(n).cloned().collect();
    while genomes.len() < n {
        genomes.push((0..len).map(|_| rng.gen_bool(0.5)).collect());
    }
    let mut snapshots = vec![];
    let mut evaluations = 0;
    let mut run = |gs: &[Vec<bool>], snapshots: &Vec<Snapshot>| -> Result<Vec<Vec<f64>>, GaError> {
        evaluations += gs.len();
        eval(gs).map_err(|source| GaError::Evaluation {
            source,
            snapshots: snapshots.clone(),
        })
    };
    let objs = run(&genomes, &snapshots)?;
    let reference: Vec<f64> = (0..objs[0].len())
        .map(|k| {
            let worst = objs.iter().map(|o| o[k]).fold(f64::NEG_INFINITY, f64::max);
            if worst > 0.0 {
                1.1 * worst
            } else {
                1.0
            }
        })
        .collect();
    let mut archive = Archive { points: vec![] };
    for (g, o) in genomes.iter().zip(&objs) {
        archive.offer(g, o);
    }
    let pairs: Vec<(Vec<bool>, Vec<f64>)> = genomes.into_iter().zip(objs).collect();
    let mut pop = select(&pairs, n);
    snapshots.push(Snapshot {
        generation: 0,
        population: pop.clone(),
        archive_size: archive.points.len(),
        hypervolume: archive.scaled_hypervolume(&reference),
    });
    for generation in 1..=params.generations {
        let mut children: Vec<Vec<bool>> = Vec::with_capacity(n);
        while children.len() < n {
            let pick = |rng: &mut ChaCha8Rng| {
                let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
                if better(&pop[j], &pop[i]) || (!better(&pop[i], &pop[j]) && j < i) {
                    j
                } else {
                    i
                }
            };
            let (a, b) = (pick(&mut rng), pick(&mut rng));
            let mut c1 = pop[a].genome.clone();
            let mut c2 = pop[b].genome.clone();
            if rng.gen_bool(params.crossover_prob) {
                for k in 0..len {
                    if rng.gen_bool(0.5) {
                        std::mem::swap(&mut c1[k], &mut c2[k]);
                    }
                }
            }
            for c in [&mut c1, &mut c2] {
                for bit in c.iter_mut() {
                    if rng.gen_bool(pm) {
                        *bit = !*bit;
                    }
                }
            }
            children.push(c1);
            children.push(c2);
        }
        let objs = run(&children, &snapshots)?;
        for (g, o) in children.iter().zip(&objs) {
            archive.offer(g, o);
        }
        let mut combined: Vec<(Vec<bool>, Vec<f64>)> = pop
            .iter()
            .map(|i| (i.genome.clone(), i.objectives.clone()))
            .collect();
        combined.extend(children.into_iter().zip(objs));
        pop = select(&combined, n);
        snapshots.push(Snapshot {
            generation,
            population: pop.clone(),
            archive_size: archive.points.len(),
            hypervolume: archive.scaled_hypervolume(&reference),
        });
    }
    Ok(GaOutcome {
        archive: archive.members(),
        snapshots,
        reference,
        evaluations,
    })
}
