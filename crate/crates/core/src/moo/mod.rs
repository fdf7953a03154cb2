//! NSGA-II over bitstring genomes, and its use for choosing which
//! activations to checkpoint.

mod hypervolume;
mod nsga2;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, TrainingGraph};
use crate::checkpoint::CheckpointPlan;
use crate::hda::HdaSpec;
use crate::scheduler::{evaluate_with_plan, EvalError, FusionSetting, MappingConfig};

pub use hypervolume::hypervolume;
pub use nsga2::{
    crowding_distance, dominates, fast_nondominated_sort, nsga2, GaOutcome, Individual, Snapshot,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    /// Per-bit flip probability; `1 / genome length` when absent.
    pub mutation_prob: Option<f64>,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams {
            population: 32,
            generations: 4,
            crossover_prob: 0.9,
            mutation_prob: None,
            seed: 0,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), GaError> {
        let bad = |m: &str| Err(GaError::InvalidParams(m.into()));
        if self.population < 4 || !self.population.is_multiple_of(2) {
            return bad("population must be even and at least 4");
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return bad("crossover probability must lie in [0, 1]");
        }
        if self
            .mutation_prob
            .is_some_and(|p| !(0.0..=1.0).contains(&p))
        {
            return bad("mutation probability must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("genome length must be positive")]
    EmptyGenome,
    /// Evaluation failed; the snapshots completed so far are kept.
    #[error("evaluation failed after {} generations: {source}", snapshots.len())]
    Evaluation {
        source: EvalError,
        snapshots: Vec<Snapshot>,
    },
}

/// Objectives of a checkpoint plan, all minimized.
pub const OBJECTIVES: [&str; 3] = ["latency_cycles", "energy_pJ", "saved_bytes"];

/// Bits packed most-significant first, as lowercase hex.
pub fn genome_hex(genome: &[bool]) -> String {
    genome
        .chunks(4)
        .map(|c| {
            let v = c
                .iter()
                .enumerate()
                .fold(0u32, |v, (i, b)| v | (u32::from(*b) << (3 - i)));
            char::from_digit(v, 16).expect("nibble")
        })
        .collect()
}

/// Checkpoint search result: the plan of every archive member, in
/// activation-set order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSearch {
    pub activations: Vec<Activation>,
    pub outcome: GaOutcome,
    pub baseline: Vec<f64>,
}

impl CheckpointSearch {
    pub fn plan(&self, genome: &[bool]) -> CheckpointPlan {
        CheckpointPlan::from_bits(&self.activations, genome)
    }

    /// `generation,genome_hex,latency_cycles,energy_pJ,saved_bytes,rank`.
    pub fn generations_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record([
            "generation",
            "genome_hex",
            "latency_cycles",
            "energy_pJ",
            "saved_bytes",
            "rank",
        ])
        .expect("in-memory write");
        for s in &self.outcome.snapshots {
            for ind in &s.population {
                w.write_record([
                    s.generation.to_string(),
                    genome_hex(&ind.genome),
                    format!("{}", ind.objectives[0]),
                    format!("{:.6}", ind.objectives[1]),
                    format!("{}", ind.objectives[2]),
                    ind.rank.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }
}

/// Searches checkpoint plans for `tg`. Each genome is applied as a rewrite,
/// fused under `fusion`, and scheduled; objectives are latency, energy and
/// the bytes of saved activations. Generation 0 holds the all-save and
/// all-recompute genomes plus random ones. Population members are evaluated
/// in parallel and each distinct genome once.
pub fn nsga2_checkpoint_search(
    tg: &TrainingGraph,
    hda: &HdaSpec,
    mapping: &MappingConfig,
    fusion: &FusionSetting,
    params: &GaParams,
) -> Result<CheckpointSearch, GaError> {
    let acts = tg.activation_set();
    if acts.is_empty() {
        return Err(GaError::EmptyGenome);
    }
    let eval = |genome: &[bool]| -> Result<Vec<f64>, EvalError> {
        let plan = CheckpointPlan::from_bits(&acts, genome);
        let e = evaluate_with_plan(tg, &plan, hda, mapping, fusion)?;
        Ok(vec![
            e.latency_cycles as f64,
            e.energy_pj,
            plan.saved_bytes(&acts) as f64,
        ])
    };
    let seeds = vec![vec![true; acts.len()], vec![false; acts.len()]];
    let baseline = eval(&seeds[0]).map_err(|source| GaError::Evaluation {
        source,
        snapshots: vec![],
    })?;
    let mut memo: BTreeMap<Vec<bool>, Vec<f64>> = BTreeMap::new();
    let batch_eval = |genomes: &[Vec<bool>]| -> Result<Vec<Vec<f64>>, EvalError> {
        let mut todo: Vec<&Vec<bool>> = genomes.iter().filter(|g| !memo.contains_key(*g)).collect();
        todo.sort();
        todo.dedup();
        let fresh: Vec<Result<Vec<f64>, EvalError>> = todo.par_iter().map(|g| eval(g)).collect();
        for (g, r) in todo.into_iter().zip(fresh) {
            memo.insert(g.clone(), r?);
        }
        Ok(genomes.iter().map(|g| memo[g].clone()).collect())
    };
    let outcome = nsga2(acts.len(), &seeds, params, batch_eval)?;
    Ok(CheckpointSearch {
        activations: acts,
        outcome,
        baseline,
    })
}
