//! End-to-end acceptance checks, one line per criterion.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trainsim_core::autodiff::{
    build_training_graph, training_memory_breakdown, LossSpec, OptimizerSpec,
};
use trainsim_core::checkpoint::{
    apply_checkpoint_plan, chain_workload, nonadditivity_probe, solve_checkpoint_milp,
    CheckpointPlan, MilpInstance, MilpItem,
};
use trainsim_core::fusion::{check_partition, fuse, FusionLimits};
use trainsim_core::graph::{ComputationGraph, EdgeId, EdgeKind, NodeId, OpKind, Phase};
use trainsim_core::hda::{
    edge_tpu_baseline, CoreSpec, Dataflow, Endpoint, HdaSpec, Link, MemoryLevel, OFFCHIP,
};
use trainsim_core::interpreter::{check_training_graph, execute, random_bindings};
use trainsim_core::moo::{dominates, fast_nondominated_sort, nsga2_checkpoint_search, GaParams};
use trainsim_core::scheduler::{evaluate, FusionSetting, MappingConfig};
use trainsim_core::sweep::{run_sweep, Grid, SweepOptions};
use trainsim_core::workloads::{build_gpt, build_resnet, GptConfig, ResnetConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn desk_resnet() -> ComputationGraph {
    build_resnet(&ResnetConfig::desk()).unwrap()
}

fn gradient_oracle() -> Outcome {
    let mut details = vec![];
    let mut pass = true;
    for (name, fwd, opt) in [
        ("resnet", desk_resnet(), OptimizerSpec::sgd()),
        (
            "gpt",
            build_gpt(&GptConfig::desk()).unwrap(),
            OptimizerSpec::adam(),
        ),
    ] {
        let start = Instant::now();
        let tg = build_training_graph(&fwd, LossSpec::default(), Some(opt)).unwrap();
        let report = check_training_graph(&tg, 3, 7).unwrap();
        let t = start.elapsed();
        let ok = report.passed(1e-4) && t < Duration::from_secs(60);
        pass &= ok;
        details.push(format!(
            "{name}: {} params, max rel err {:.2e}, {:.1}s",
            report.params.len(),
            report.max_rel_err(),
            t.as_secs_f64()
        ));
    }
    outcome(pass, details.join("; "))
}

/// Minimum recompute cost over all save sets that fit the budget.
fn brute_force_milp(inst: &MilpInstance) -> u64 {
    let n = inst.items.len();
    (0u32..1 << n)
        .filter_map(|mask| {
            let (mut bytes, mut cost) = (0, 0);
            for (i, it) in inst.items.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    bytes += it.bytes;
                } else {
                    cost += it.recompute_macs;
                }
            }
            (bytes <= inst.budget).then_some(cost)
        })
        .min()
        .expect("saving nothing always fits")
}

fn milp_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=15);
        let items: Vec<MilpItem> = (0..n)
            .map(|i| MilpItem {
                id: EdgeId(i),
                bytes: rng.gen_range(1..=1000),
                recompute_macs: rng.gen_range(0..=1000),
            })
            .collect();
        let total: u64 = items.iter().map(|i| i.bytes).sum();
        let inst = MilpInstance {
            items,
            budget: rng.gen_range(0..=total),
        };
        let sol = solve_checkpoint_milp(&inst).unwrap();
        let saved: u64 = inst
            .items
            .iter()
            .filter(|i| sol.plan.decisions[&i.id])
            .map(|i| i.bytes)
            .sum();
        let cost: u64 = inst
            .items
            .iter()
            .filter(|i| !sol.plan.decisions[&i.id])
            .map(|i| i.recompute_macs)
            .sum();
        if saved > inst.budget || cost != sol.objective || sol.objective != brute_force_milp(&inst)
        {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    let tg = build_training_graph(
        &desk_resnet(),
        LossSpec::default(),
        Some(OptimizerSpec::sgd()),
    )
    .unwrap();
    let acts = tg.activation_set();
    let none = solve_checkpoint_milp(&MilpInstance::from_activations(&acts, 0)).unwrap();
    let total: u64 = acts.iter().map(|a| a.bytes).sum();
    let all = solve_checkpoint_milp(&MilpInstance::from_activations(&acts, total)).unwrap();
    let ends = none.plan == CheckpointPlan::uniform(&acts, false)
        && all.plan == CheckpointPlan::uniform(&acts, true);
    outcome(
        mismatches == 0 && t < Duration::from_secs(5) && ends,
        format!(
            "500 instances, {mismatches} mismatches, {:.2}s; M=0 all-recompute and M=total all-save: {ends}",
            t.as_secs_f64()
        ),
    )
}

fn rewrite_equivalence() -> Outcome {
    let tg = build_training_graph(
        &desk_resnet(),
        LossSpec::default(),
        Some(OptimizerSpec::adam()),
    )
    .unwrap();
    let acts = tg.activation_set();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = random_bindings::<f64, _>(&tg.graph, &mut rng);
    let base = execute(&tg.graph, &b).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let bits: Vec<bool> = acts.iter().map(|_| rng.gen_bool(0.5)).collect();
        let g = apply_checkpoint_plan(&tg, &CheckpointPlan::from_bits(&acts, &bits)).unwrap();
        let v = execute(&g, &b).unwrap();
        for o in &tg.graph.graph_outputs {
            for (x, y) in v[o].data.iter().zip(&base[o].data) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("50 plans, max |update difference| {worst:.1e}"),
    )
}

/// A DAG of `[4, 8]` tensors built from Gemm, ReLU, Gelu and Add nodes.
fn random_dag(rng: &mut ChaCha8Rng, nodes: usize) -> ComputationGraph {
    let mut g = ComputationGraph::default();
    let x = g.add_input(&[4, 8], 4, EdgeKind::Input);
    let mut avail = vec![x];
    for _ in 0..nodes {
        let a = avail[rng.gen_range(0..avail.len())];
        let b = avail[rng.gen_range(0..avail.len())];
        let y = match rng.gen_range(0..4) {
            0 => {
                let w = g.add_input(&[8, 8], 4, EdgeKind::Weight);
                g.add_node(OpKind::Gemm, &[a, w], EdgeKind::Activation, Phase::Forward)
            }
            1 => g.add_node(OpKind::ReLU, &[a], EdgeKind::Activation, Phase::Forward),
            2 => g.add_node(OpKind::Gelu, &[a], EdgeKind::Activation, Phase::Forward),
            _ => g.add_node(OpKind::Add, &[a, b], EdgeKind::Activation, Phase::Forward),
        }
        .unwrap();
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

/// Two weight-stationary cores and a vector core, all with `capacity` bytes.
fn small_machine(capacity: u64) -> HdaSpec {
    let core = |id, dataflow| CoreSpec {
        id,
        dataflow,
        pe_dims: vec![8],
        ops_per_pe_per_cycle: 1,
        mac_energy_pj: 1.0,
        memory_levels: vec![MemoryLevel::uniform("local", Some(capacity), 32.0, 1.0)],
    };
    let cores = vec![
        core(0, Dataflow::WeightStationary),
        core(1, Dataflow::WeightStationary),
        core(2, Dataflow::SimdVector),
    ];
    let mut links = vec![];
    for a in 0..3 {
        links.push(Link {
            a,
            b: OFFCHIP,
            bandwidth_bytes_per_cycle: 16.0,
            energy_pj_per_byte: 1.0,
        });
        for b in a + 1..3 {
            links.push(Link {
                a,
                b: Endpoint::Core(b),
                bandwidth_bytes_per_cycle: 64.0,
                energy_pj_per_byte: 1.0,
            });
        }
    }
    HdaSpec {
        name: "small".into(),
        cores,
        links,
        offchip: MemoryLevel::uniform("offchip", None, 16.0, 20.0),
    }
}

/// Fewest subgraphs over every exact cover by valid subgraphs, where
/// validity of each node subset is decided by the from-scratch checker.
fn exhaustive_fusion_optimum(g: &ComputationGraph, hda: &HdaSpec, limits: &FusionLimits) -> usize {
    let ids: Vec<NodeId> = g.nodes.keys().copied().collect();
    let n = ids.len();
    let index = |id: NodeId| ids.iter().position(|x| *x == id).unwrap();
    let mut adj = vec![0u32; n];
    for (i, id) in ids.iter().enumerate() {
        for e in &g.node(*id).outputs {
            for c in &g.edge(*e).consumers {
                let j = index(*c);
                adj[i] |= 1 << j;
                adj[j] |= 1 << i;
            }
        }
    }
    let connected = |mask: u32| {
        let mut seen = mask & mask.wrapping_neg();
        loop {
            let mut next = seen;
            for i in 0..n {
                if seen >> i & 1 == 1 {
                    next |= adj[i] & mask;
                }
            }
            if next == seen {
                return seen == mask;
            }
            seen = next;
        }
    };
    let mapping = MappingConfig::default();
    let valid = |mask: u32| {
        let set: Vec<NodeId> = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ids[i])
            .collect();
        let mut partition = vec![set];
        partition.extend((0..n).filter(|i| mask >> i & 1 == 0).map(|i| vec![ids[i]]));
        check_partition(g, hda, &mapping, limits, &partition).is_empty()
    };
    let mut by_first: Vec<Vec<u32>> = vec![vec![]; n];
    fn subsets(n: usize, k: usize, start: usize, mask: u32, out: &mut Vec<u32>) {
        if mask != 0 {
            out.push(mask);
        }
        if k == 0 {
            return;
        }
        for i in start..n {
            subsets(n, k - 1, i + 1, mask | 1 << i, out);
        }
    }
    let mut all = vec![];
    subsets(n, limits.max_len, 0, 0, &mut all);
    for mask in all {
        if connected(mask) && valid(mask) {
            by_first[mask.trailing_zeros() as usize].push(mask);
        }
    }
    let full: u32 = if n == 32 { u32::MAX } else { (1 << n) - 1 };
    let mut best = vec![u8::MAX; 1 << n];
    best[full as usize] = 0;
    // Covered sets in decreasing order, so every successor is already solved.
    for covered in (0..full).rev() {
        let free = !covered & full;
        let first = free.trailing_zeros() as usize;
        // Masks containing `first` cannot reach below it, so lower bits of
        // `covered` must already be complete.
        if covered & ((1 << first) - 1) != (1 << first) - 1 {
            continue;
        }
        let mut b = u8::MAX;
        for &c in &by_first[first] {
            if c & covered == 0 {
                let nxt = best[(covered | c) as usize];
                if nxt != u8::MAX {
                    b = b.min(nxt + 1);
                }
            }
        }
        best[covered as usize] = b;
    }
    best[0] as usize
}

fn fusion_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let limits = FusionLimits::default();
    let mapping = MappingConfig::default();
    let start = Instant::now();
    let (mut mismatch, mut violations) = (0, 0);
    for _ in 0..100 {
        let nodes = rng.gen_range(2..=20);
        let g = random_dag(&mut rng, nodes);
        let hda = small_machine([600, 1500, 1 << 20][rng.gen_range(0..3)]);
        let p = fuse(&g, &hda, &mapping, &limits).unwrap();
        violations += check_partition(&g, &hda, &mapping, &limits, &p.subgraphs).len();
        if !p.exact || p.count() != exhaustive_fusion_optimum(&g, &hda, &limits) {
            mismatch += 1;
        }
    }
    let random_time = start.elapsed();
    let g = desk_resnet();
    let hda = edge_tpu_baseline();
    let base = evaluate(&g, &hda, &mapping, &FusionSetting::Off).unwrap();
    let mut desk = vec![];
    let mut desk_ok = true;
    for ml in [4, 6, 8] {
        let l = FusionLimits::with_max_len(ml);
        let e = evaluate(&g, &hda, &mapping, &FusionSetting::Auto(l)).unwrap();
        violations += check_partition(&g, &hda, &mapping, &l, &e.partition).len();
        desk_ok &= e.latency_cycles <= base.latency_cycles && e.energy_pj <= base.energy_pj;
        desk.push(format!("ml{ml} {}cyc", e.latency_cycles));
    }
    outcome(
        mismatch == 0 && violations == 0 && desk_ok,
        format!(
            "100 random graphs: {mismatch} mismatches ({:.1}s); {violations} post-hoc violations; desk resnet layer-by-layer {}cyc, {}",
            random_time.as_secs_f64(),
            base.latency_cycles,
            desk.join(", ")
        ),
    )
}

fn nonadditivity() -> Outcome {
    let start = Instant::now();
    let r = nonadditivity_probe(
        &chain_workload(),
        &edge_tpu_baseline(),
        &MappingConfig::default(),
        &FusionLimits::default(),
        None,
    )
    .unwrap();
    let t = start.elapsed();
    let rel = r.relative_latency_interaction();
    outcome(
        rel > 0.01 && t < Duration::from_secs(30),
        format!(
            "interaction {} cycles = {:.2}% of {} baseline cycles, {:.2}s",
            r.interaction().latency_cycles,
            100.0 * rel,
            r.baseline_latency_cycles,
            t.as_secs_f64()
        ),
    )
}

fn brute_force_ranks(objs: &[Vec<f64>]) -> Vec<usize> {
    let mut rank = vec![usize::MAX; objs.len()];
    let mut level = 0;
    while rank.contains(&usize::MAX) {
        let left: Vec<usize> = (0..objs.len()).filter(|i| rank[*i] == usize::MAX).collect();
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&i| !left.iter().any(|&j| dominates(&objs[j], &objs[i])))
            .collect();
        for i in front {
            rank[i] = level;
        }
        level += 1;
    }
    rank
}

fn nsga2_behaviour() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sort_mismatch = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=64);
        let m = rng.gen_range(2..=3);
        let objs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(0..6) as f64).collect())
            .collect();
        let mut rank = vec![usize::MAX; n];
        for (k, f) in fast_nondominated_sort(&objs).iter().enumerate() {
            for &i in f {
                rank[i] = k;
            }
        }
        sort_mismatch += usize::from(rank != brute_force_ranks(&objs));
    }
    let start = Instant::now();
    let tg = build_training_graph(
        &desk_resnet(),
        LossSpec::default(),
        Some(OptimizerSpec::adam()),
    )
    .unwrap();
    let r = nsga2_checkpoint_search(
        &tg,
        &edge_tpu_baseline(),
        &MappingConfig::default(),
        &FusionSetting::Auto(FusionLimits::default()),
        &GaParams::default(),
    )
    .unwrap();
    let t = start.elapsed();
    let arch = &r.outcome.archive;
    let mutual = arch.iter().all(|a| {
        arch.iter()
            .all(|b| !dominates(&a.objectives, &b.objectives))
    });
    let hv: Vec<f64> = r.outcome.snapshots.iter().map(|s| s.hypervolume).collect();
    let monotone = hv.windows(2).all(|w| w[1] >= w[0]);
    let (lat0, bytes0) = (r.baseline[0], r.baseline[2]);
    let good = arch
        .iter()
        .filter(|i| i.objectives[2] <= 0.9 * bytes0 && i.objectives[0] <= 1.05 * lat0)
        .max_by(|a, b| (bytes0 - a.objectives[2]).total_cmp(&(bytes0 - b.objectives[2])));
    let found = match good {
        Some(i) => format!(
            "saves {:.1}% of activation bytes at {:+.1}% latency",
            100.0 * (1.0 - i.objectives[2] / bytes0),
            100.0 * (i.objectives[0] / lat0 - 1.0)
        ),
        None => "no point saves 10% within 5% latency".into(),
    };
    outcome(
        sort_mismatch == 0 && mutual && monotone && good.is_some() && t < Duration::from_secs(600),
        format!(
            "sort mismatches {sort_mismatch}/200; archive {} mutually non-dominated: {mutual}; hypervolume {hv:.4?}; {found}; {:.1}s",
            arch.len(),
            t.as_secs_f64()
        ),
    )
}

fn sweep_structure() -> Outcome {
    let grid = Grid::named("table1-sub").unwrap();
    let start = Instant::now();
    let out = run_sweep(&grid, &desk_resnet(), &SweepOptions::default()).unwrap();
    let t = start.elapsed();
    let mut dominated = 0;
    let mut by_compute: std::collections::BTreeMap<u64, u64> = Default::default();
    for r in &out.rows {
        let Ok(m) = &r.result else { continue };
        let (f, fb) = (m.f.unwrap(), m.fb.unwrap());
        if !(fb.latency_cycles > f.latency_cycles && fb.energy_pj > f.energy_pj) {
            dominated += 1;
        }
        let c = r.config;
        let compute = (c[0] * c[1] * c[2] * c[3]) as u64;
        let e = by_compute.entry(compute).or_insert(u64::MAX);
        *e = (*e).min(f.latency_cycles);
    }
    let mins: Vec<u64> = by_compute.values().copied().collect();
    let monotone = mins.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        out.rows.len() == 64 && out.failed() == 0 && dominated == 0 && monotone && t < Duration::from_secs(600),
        format!(
            "{} rows, {} failed, {dominated} rows without fb > f, min latency over {} compute levels non-increasing: {monotone}, {:.1}s",
            out.rows.len(),
            out.failed(),
            mins.len(),
            t.as_secs_f64()
        ),
    )
}

fn memory_ratios() -> Outcome {
    let fwd = desk_resnet();
    let adam = training_memory_breakdown(
        &build_training_graph(&fwd, LossSpec::default(), Some(OptimizerSpec::adam())).unwrap(),
    );
    let sgd = training_memory_breakdown(
        &build_training_graph(&fwd, LossSpec::default(), Some(OptimizerSpec::sgd())).unwrap(),
    );
    let fwd8 = build_resnet(&ResnetConfig::desk().with_batch(8)).unwrap();
    let b8 = training_memory_breakdown(
        &build_training_graph(&fwd8, LossSpec::default(), Some(OptimizerSpec::sgd())).unwrap(),
    );
    let pass = adam.optimizer_states == 2 * adam.parameters
        && sgd.optimizer_states == sgd.parameters
        && b8.activations == 8 * sgd.activations;
    outcome(
        pass,
        format!(
            "params {} B, adam states {} B, sgd states {} B, activations {} B at batch 1 and {} B at batch 8",
            adam.parameters, adam.optimizer_states, sgd.optimizer_states, sgd.activations, b8.activations
        ),
    )
}

/// Every subcommand, run in a fresh directory.
const RUNS: &[&[&str]] = &[
    &["build", "--workload", "resnet-desk", "--out", "fwd.json"],
    &[
        "transform",
        "--workload",
        "fwd.json",
        "--optimizer",
        "adam",
        "--out",
        "train.json",
    ],
    &[
        "evaluate",
        "--workload",
        "train.json",
        "--out",
        "eval.json",
        "--timeline",
        "timeline.csv",
    ],
    &[
        "fuse",
        "--workload",
        "fwd.json",
        "--fusion",
        "auto:8",
        "--out",
        "fuse.json",
    ],
    &[
        "checkpoint-milp",
        "--workload",
        "train.json",
        "--budget",
        "200000",
        "--out",
        "plan.json",
    ],
    &[
        "checkpoint-ga",
        "--workload",
        "train.json",
        "--pop",
        "8",
        "--gens",
        "1",
        "--seed",
        "5",
        "--out",
        "ga.csv",
    ],
    &[
        "probe-nonadditivity",
        "--workload",
        "probe-chain",
        "--out",
        "probe.json",
    ],
    &[
        "sweep",
        "--template",
        "edge-tpu",
        "--grid",
        "table1-sub",
        "--workload",
        "resnet-desk",
        "--mode",
        "both",
        "--out",
        "sweep.csv",
    ],
    &["plot", "sweep.csv", "--color", "U", "--out", "sweep.svg"],
];

fn run_all(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    for args in RUNS {
        let st = Command::new(env!("CARGO_BIN_EXE_trainsim"))
            .args(*args)
            .current_dir(dir)
            .env_remove("MONET_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        if !st.status.success() {
            return Err(format!(
                "{}: {}",
                args[0],
                String::from_utf8_lossy(&st.stderr)
            ));
        }
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = match (run_all(a.path()), run_all(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e),
    };
    let differing: BTreeSet<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = fa.len() == fb.len() && differing.is_empty();
    outcome(
        pass,
        format!(
            "{} subcommands, {} files compared, differing: {differing:?}",
            RUNS.len(),
            fa.len()
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 gradient oracle", gradient_oracle),
        ("2 checkpoint MILP optimality", milp_optimality),
        ("3 rewrite equivalence", rewrite_equivalence),
        ("4 fusion optimality and feasibility", fusion_optimality),
        ("5 nonadditivity", nonadditivity),
        ("6 NSGA-II behaviour", nsga2_behaviour),
        ("7 DSE structure", sweep_structure),
        ("8 memory breakdown", memory_ratios),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        println!(
            "criterion {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
