use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use trainsim_core::autodiff::TrainingGraph;
use trainsim_core::checkpoint::{
    apply_checkpoint_plan, apply_to_training_graph, nonadditivity_probe, solve_checkpoint_milp,
    MilpInstance, Solver,
};
use trainsim_core::fusion::{check_partition, fuse, FusedPartition, FusionLimits};
use trainsim_core::graph::{ComputationGraph, EdgeId};
use trainsim_core::hda::{CoreId, HdaSpec};
use trainsim_core::moo::{genome_hex, nsga2_checkpoint_search, GaParams};
use trainsim_core::plot::{csv_header, scatter_svg, PlotSpec};
use trainsim_core::scheduler::{
    evaluate, EnergyBreakdown, Evaluation, FusionSetting, MappingConfig,
};
use trainsim_core::sweep::{run_sweep, Grid, Mode, SweepOptions, Template, GRID_NAMES};
use trainsim_core::workloads::{build_gpt, build_resnet, export_workload, GptConfig, ResnetConfig};

use crate::inputs::{self, Workload};
use crate::manifest::{sibling, Manifest};
use crate::{CliError, CliResult, Command, Common};

const DEFAULT_TEMPLATE: &str = "edge-tpu";

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    s
}

fn init_jobs(jobs: usize) {
    if jobs > 0 {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

pub fn run(cmd: Command, args: &[String]) -> CliResult<()> {
    let name = args.first().map(String::as_str).unwrap_or("");
    let mut m = Manifest::new(name, args);
    let out = match cmd {
        Command::Build {
            workload,
            config,
            batch,
            out,
        } => {
            build(&workload, config.as_deref(), batch, &out, &mut m)?;
            out
        }
        Command::Transform { common, plan } => {
            transform(&common, plan.as_deref(), &mut m)?;
            common.out
        }
        Command::Evaluate {
            common,
            mode,
            plan,
            timeline,
        } => {
            evaluate_cmd(
                &common,
                mode.as_deref(),
                plan.as_deref(),
                timeline.as_deref(),
                &mut m,
            )?;
            common.out
        }
        Command::Fuse { common, mode } => {
            fuse_cmd(&common, mode.as_deref(), &mut m)?;
            common.out
        }
        Command::CheckpointMilp { common, budget } => {
            milp(&common, budget, &mut m)?;
            common.out
        }
        Command::CheckpointGa {
            common,
            pop,
            gens,
            seed,
        } => {
            m.seed = Some(seed);
            ga(&common, pop, gens, seed, &mut m)?;
            common.out
        }
        Command::ProbeNonadditivity { common, pair } => {
            probe(&common, pair.as_deref(), &mut m)?;
            common.out
        }
        Command::Sweep { common, grid, mode } => {
            sweep(&common, &grid, &mode, &mut m)?;
            common.out
        }
        Command::Plot {
            input,
            x,
            y,
            color,
            out,
        } => {
            plot(&input, x, y, color, &out, &mut m)?;
            out
        }
    };
    m.finish(&out)
}

fn build(
    name: &str,
    config: Option<&Path>,
    batch: Option<usize>,
    out: &Path,
    m: &mut Manifest,
) -> CliResult<()> {
    let text = config.map(|p| inputs::read(p, m)).transpose()?;
    let parse_err = |e: serde_json::Error| CliError::Input(format!("config: {e}"));
    let g = match name {
        "resnet-desk" => {
            let mut cfg = match &text {
                Some(t) => serde_json::from_str(t).map_err(parse_err)?,
                None => ResnetConfig::desk(),
            };
            if let Some(b) = batch {
                cfg = cfg.with_batch(b);
            }
            build_resnet(&cfg).map_err(CliError::input)?
        }
        "gpt-desk" => {
            let mut cfg: GptConfig = match &text {
                Some(t) => serde_json::from_str(t).map_err(parse_err)?,
                None => GptConfig::desk(),
            };
            if let Some(b) = batch {
                cfg.batch = b;
            }
            build_gpt(&cfg).map_err(CliError::input)?
        }
        _ => {
            return Err(CliError::Usage(format!(
                "build knows resnet-desk and gpt-desk, got {name:?}"
            )))
        }
    };
    m.input_builtin(name);
    m.write(out, &export_workload(&g))
}

fn transform(c: &Common, plan: Option<&Path>, m: &mut Manifest) -> CliResult<()> {
    let w = inputs::workload(&c.workload, m)?;
    let tg = inputs::training(w, c)?;
    let tg = match plan {
        Some(p) => {
            let plan = inputs::plan(p, m)?;
            apply_to_training_graph(&tg, &plan).map_err(CliError::input)?
        }
        None => tg,
    };
    m.write(&c.out, &export_workload(&tg.graph))
}

fn parse_mode(s: &str) -> CliResult<Mode> {
    Mode::parse(s).ok_or_else(|| {
        CliError::Usage(format!(
            "--mode must be inference, training or both, got {s:?}"
        ))
    })
}

struct Setup {
    hda: HdaSpec,
    mapping: MappingConfig,
    fusion: FusionSetting,
}

fn setup(c: &Common, m: &mut Manifest) -> CliResult<Setup> {
    init_jobs(c.jobs);
    Ok(Setup {
        hda: inputs::hardware(c.hardware.as_deref().unwrap_or(DEFAULT_TEMPLATE), m)?,
        mapping: inputs::mapping(&c.mapping, m)?,
        fusion: inputs::fusion(&c.fusion, m)?,
    })
}

/// The graphs to evaluate, keyed by mode name.
fn graphs(
    c: &Common,
    w: Workload,
    mode: Option<&str>,
    plan: Option<&Path>,
    m: &mut Manifest,
) -> CliResult<Vec<(&'static str, ComputationGraph)>> {
    let is_training = matches!(w, Workload::Training(_));
    let mode = match mode {
        Some(s) => parse_mode(s)?,
        None if is_training => Mode::Training,
        None => Mode::Inference,
    };
    if is_training && mode != Mode::Training {
        return Err(CliError::Usage(
            "a training-graph workload only supports --mode training".into(),
        ));
    }
    if plan.is_some() && mode == Mode::Inference {
        return Err(CliError::Usage(
            "--plan needs --mode training or both".into(),
        ));
    }
    let mut out = vec![];
    if mode != Mode::Training {
        out.push(("inference", w.graph().clone()));
    }
    if mode != Mode::Inference {
        let tg = inputs::training(w, c)?;
        let g = match plan {
            Some(p) => apply_checkpoint_plan(&tg, &inputs::plan(p, m)?).map_err(CliError::input)?,
            None => tg.graph,
        };
        out.push(("training", g));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Summary {
    latency_cycles: u64,
    #[serde(rename = "energy_pJ")]
    energy_pj: f64,
    energy: EnergyBreakdown,
    peak_activation_bytes: u64,
    peak_core_memory_bytes: BTreeMap<CoreId, u64>,
    offchip_bytes: u64,
    subgraph_count: usize,
    exact: bool,
    nodes: usize,
}

impl Summary {
    fn of(g: &ComputationGraph, e: &Evaluation) -> Self {
        Summary {
            latency_cycles: e.latency_cycles,
            energy_pj: e.energy_pj,
            energy: e.schedule.energy,
            peak_activation_bytes: e.peak_activation_bytes,
            peak_core_memory_bytes: e.schedule.peak_core_memory_bytes.clone(),
            offchip_bytes: e.schedule.offchip_bytes,
            subgraph_count: e.partition.len(),
            exact: e.exact,
            nodes: g.nodes.len(),
        }
    }
}

fn evaluate_cmd(
    c: &Common,
    mode: Option<&str>,
    plan: Option<&Path>,
    timeline: Option<&Path>,
    m: &mut Manifest,
) -> CliResult<()> {
    let s = setup(c, m)?;
    let w = inputs::workload(&c.workload, m)?;
    let gs = graphs(c, w, mode, plan, m)?;
    if timeline.is_some() && gs.len() > 1 {
        return Err(CliError::Usage("--timeline needs a single mode".into()));
    }
    let mut report = BTreeMap::new();
    for (name, g) in &gs {
        let e = evaluate(g, &s.hda, &s.mapping, &s.fusion).map_err(CliError::input)?;
        if let Some(t) = timeline {
            m.write(t, &e.schedule.timeline_csv())?;
        }
        report.insert(*name, Summary::of(g, &e));
    }
    m.write(&c.out, &json(&report))
}

#[derive(Serialize)]
struct FuseReport {
    count: usize,
    exact: bool,
    subgraphs: Vec<Vec<trainsim_core::NodeId>>,
    /// Constraint violations found by re-checking the partition.
    violations: Vec<String>,
}

fn fuse_cmd(c: &Common, mode: Option<&str>, m: &mut Manifest) -> CliResult<()> {
    let s = setup(c, m)?;
    let w = inputs::workload(&c.workload, m)?;
    let gs = graphs(c, w, mode, None, m)?;
    let mut report = BTreeMap::new();
    for (name, g) in &gs {
        let (limits, p) = match &s.fusion {
            FusionSetting::Off => (FusionLimits::default(), FusedPartition::layer_by_layer(g)),
            FusionSetting::Auto(l) => {
                (*l, fuse(g, &s.hda, &s.mapping, l).map_err(CliError::input)?)
            }
            FusionSetting::Manual(p) => (
                FusionLimits::default(),
                FusedPartition {
                    subgraphs: p.clone(),
                    exact: true,
                },
            ),
        };
        let violations = check_partition(g, &s.hda, &s.mapping, &limits, &p.subgraphs);
        report.insert(
            *name,
            FuseReport {
                count: p.count(),
                exact: p.exact,
                subgraphs: p.subgraphs,
                violations,
            },
        );
    }
    m.write(&c.out, &json(&report))
}

fn training_workload(c: &Common, m: &mut Manifest) -> CliResult<TrainingGraph> {
    let w = inputs::workload(&c.workload, m)?;
    inputs::training(w, c)
}

#[derive(Serialize)]
struct MilpReport {
    budget: u64,
    activation_bytes: u64,
    saved_bytes: u64,
    recompute_macs: u64,
    solver: Solver,
}

fn milp(c: &Common, budget: u64, m: &mut Manifest) -> CliResult<()> {
    let tg = training_workload(c, m)?;
    let inst = MilpInstance::from_activations(&tg.activation_set(), budget);
    let sol = solve_checkpoint_milp(&inst).map_err(CliError::input)?;
    m.write(&c.out, &json(&sol.plan))?;
    m.write(
        &sibling(&c.out, "summary.json"),
        &json(&MilpReport {
            budget,
            activation_bytes: inst.total_bytes(),
            saved_bytes: sol.saved_bytes,
            recompute_macs: sol.objective,
            solver: sol.solver,
        }),
    )
}

#[derive(Serialize)]
struct ArchiveEntry {
    genome_hex: String,
    latency_cycles: f64,
    #[serde(rename = "energy_pJ")]
    energy_pj: f64,
    saved_bytes: f64,
    plan: trainsim_core::checkpoint::CheckpointPlan,
}

#[derive(Serialize)]
struct GaReport {
    activations: Vec<EdgeId>,
    baseline: Vec<f64>,
    evaluations: usize,
    reference: Vec<f64>,
    hypervolume: Vec<f64>,
    archive: Vec<ArchiveEntry>,
}

fn ga(c: &Common, pop: usize, gens: usize, seed: u64, m: &mut Manifest) -> CliResult<()> {
    let s = setup(c, m)?;
    let tg = training_workload(c, m)?;
    let params = GaParams {
        population: pop,
        generations: gens,
        seed,
        ..GaParams::default()
    };
    params
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let r = nsga2_checkpoint_search(&tg, &s.hda, &s.mapping, &s.fusion, &params)
        .map_err(CliError::input)?;
    m.write(&c.out, &r.generations_csv())?;
    let report = GaReport {
        activations: r.activations.iter().map(|a| a.edge).collect(),
        baseline: r.baseline.clone(),
        evaluations: r.outcome.evaluations,
        reference: r.outcome.reference.clone(),
        hypervolume: r.outcome.snapshots.iter().map(|s| s.hypervolume).collect(),
        archive: r
            .outcome
            .archive
            .iter()
            .map(|i| ArchiveEntry {
                genome_hex: genome_hex(&i.genome),
                latency_cycles: i.objectives[0],
                energy_pj: i.objectives[1],
                saved_bytes: i.objectives[2],
                plan: r.plan(&i.genome),
            })
            .collect(),
    };
    m.write(&sibling(&c.out, "archive.json"), &json(&report))
}

fn probe(c: &Common, pair: Option<&str>, m: &mut Manifest) -> CliResult<()> {
    let s = setup(c, m)?;
    let limits = match &s.fusion {
        FusionSetting::Auto(l) => *l,
        _ => {
            return Err(CliError::Usage(
                "probe-nonadditivity needs --fusion auto:N".into(),
            ))
        }
    };
    let pair = pair
        .map(|p| {
            let ids: Vec<u32> = p.split(',').filter_map(|x| x.trim().parse().ok()).collect();
            match ids[..] {
                [a, b] => Ok((EdgeId(a), EdgeId(b))),
                _ => Err(CliError::Usage(format!(
                    "--pair must be two edge ids A,B, got {p:?}"
                ))),
            }
        })
        .transpose()?;
    let tg = training_workload(c, m)?;
    let r = nonadditivity_probe(&tg, &s.hda, &s.mapping, &limits, pair).map_err(CliError::input)?;
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        report: &'a trainsim_core::checkpoint::ProbeReport,
        interaction: trainsim_core::checkpoint::Delta,
        relative_latency_interaction: f64,
    }
    m.write(
        &c.out,
        &json(&Out {
            report: &r,
            interaction: r.interaction(),
            relative_latency_interaction: r.relative_latency_interaction(),
        }),
    )
}

fn sweep(c: &Common, grid: &str, mode: &str, m: &mut Manifest) -> CliResult<()> {
    let mode = parse_mode(mode)?;
    let grid = if GRID_NAMES.contains(&grid) {
        m.input_builtin(grid);
        Grid::named(grid).map_err(CliError::input)?
    } else {
        let text = inputs::read(Path::new(grid), m)?;
        Grid::from_json(&text).map_err(CliError::input)?
    };
    if let Some(h) = &c.hardware {
        match Template::parse(h) {
            Some(t) if t == grid.template => {}
            Some(_) => {
                return Err(CliError::Usage(format!(
                    "grid {} is for {}, not {h}",
                    grid.name,
                    grid.template.name()
                )))
            }
            None => {
                return Err(CliError::Usage(format!(
                    "sweep needs a template name, got {h:?}"
                )))
            }
        }
    }
    for (axis, v) in grid.extensions() {
        eprintln!(
            "note: {axis}={v} is outside the {} search space",
            grid.template.name()
        );
    }
    let w = inputs::workload(&c.workload, m)?;
    let opts = SweepOptions {
        mode,
        fusion: inputs::fusion(&c.fusion, m)?,
        mapping: inputs::mapping(&c.mapping, m)?,
        loss: inputs::loss(&c.loss)?,
        optimizer: inputs::optimizer(&c.optimizer)?,
        jobs: c.jobs,
    };
    let out = run_sweep(&grid, w.graph(), &opts).map_err(CliError::input)?;
    m.write(&c.out, &out.csv())?;
    m.write(&sibling(&c.out, "failed.csv"), &out.failures_csv())?;
    if out.failed() > 0 {
        eprintln!("{} of {} configs failed", out.failed(), out.rows.len());
    }
    Ok(())
}

fn plot(
    input: &Path,
    x: Option<String>,
    y: Option<String>,
    color: Option<String>,
    out: &Path,
    m: &mut Manifest,
) -> CliResult<()> {
    let text = inputs::read(input, m)?;
    let header = csv_header(&text).map_err(CliError::input)?;
    let guess = PlotSpec::guess(&header);
    let pick = |v: Option<String>, f: fn(&PlotSpec) -> &String, flag: &str| -> CliResult<String> {
        v.or_else(|| guess.as_ref().map(|g| f(g).clone()))
            .ok_or_else(|| CliError::Usage(format!("cannot guess --{flag}; pass it explicitly")))
    };
    let spec = PlotSpec {
        x: pick(x, |g| &g.x, "x")?,
        y: pick(y, |g| &g.y, "y")?,
        color: pick(color, |g| &g.color, "color")?,
    };
    m.write(out, &scatter_svg(&text, &spec).map_err(CliError::input)?)
}
