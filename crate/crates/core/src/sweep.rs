//! Hardware design-space sweeps: evaluate a workload for inference and/or
//! training on every point of a template parameter grid.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{build_training_graph, LossSpec, OptimizerSpec};
use crate::fusion::{capacity_key, fuse, FusedPartition, FusionLimits};
use crate::graph::{ComputationGraph, Phase};
use crate::hda::{edge_tpu_config, fusemax_config, table1, table2, HdaError, HdaSpec};
use crate::scheduler::{evaluate, FusionSetting, MappingConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("unknown grid {0:?}")]
    UnknownGrid(String),
    #[error("grid parse error: {0}")]
    Parse(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("workload: {0}")]
    Workload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    EdgeTpu,
    Fusemax,
}

impl Template {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "edge-tpu" => Some(Template::EdgeTpu),
            "fusemax" => Some(Template::Fusemax),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::EdgeTpu => "edge-tpu",
            Template::Fusemax => "fusemax",
        }
    }

    /// Config column names, in constructor argument order.
    pub fn axes(self) -> [&'static str; 6] {
        match self {
            Template::EdgeTpu => ["xPEs", "yPEs", "U", "L", "local_mem_MB", "rf_KB"],
            Template::Fusemax => [
                "xPEs",
                "yPEs",
                "vectorPEs",
                "buf_bw",
                "buf_MB",
                "offchip_bw",
            ],
        }
    }

    /// Accepted values per axis.
    pub fn accepted(self) -> [Vec<f64>; 6] {
        fn f<T: Copy + Into<f64>>(v: &[T]) -> Vec<f64> {
            v.iter().map(|x| (*x).into()).collect()
        }
        match self {
            Template::EdgeTpu => [
                f(&table1::PES),
                f(&table1::PES),
                f(&table1::SIMD_UNITS),
                f(&table1::LANES),
                f(&table1::LOCAL_MEM_MB),
                f(&table1::RF_KB),
            ],
            Template::Fusemax => [
                f(&table2::PES),
                f(&table2::PES),
                f(&table2::VECTOR_PES),
                f(&table2::BUFFER_BW),
                f(&table2::BUFFER_MB),
                f(&table2::OFFCHIP_BW),
            ],
        }
    }

    fn baseline(self) -> [f64; 6] {
        match self {
            Template::EdgeTpu => [4.0, 4.0, 64.0, 4.0, 2.0, 64.0],
            Template::Fusemax => [256.0, 256.0, 128.0, 16384.0, 16.0, 4096.0],
        }
    }

    pub fn build(self, p: &[f64]) -> Result<HdaSpec, HdaError> {
        let count = |i: usize| -> Result<u32, HdaError> {
            let v = p[i];
            if v.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&v) {
                return Err(HdaError::InvalidParam(format!(
                    "{} must be a positive integer",
                    self.axes()[i]
                )));
            }
            Ok(v as u32)
        };
        match self {
            Template::EdgeTpu => {
                edge_tpu_config(count(0)?, count(1)?, count(2)?, count(3)?, p[4], p[5])
            }
            Template::Fusemax => fusemax_config(count(0)?, count(1)?, count(2)?, p[3], p[4], p[5]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub name: String,
    pub template: Template,
    /// One value list per template axis.
    pub values: [Vec<f64>; 6],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    #[serde(default)]
    name: Option<String>,
    template: Template,
    #[serde(default)]
    axes: BTreeMap<String, Vec<f64>>,
}

pub const GRID_NAMES: [&str; 4] = ["table1-sub", "table1-full", "table2-sub", "table2-full"];

impl Grid {
    pub fn named(name: &str) -> Result<Self, SweepError> {
        let (template, values) = match name {
            "table1-sub" => (
                Template::EdgeTpu,
                [
                    vec![1.0, 2.0, 4.0, 8.0],
                    vec![1.0, 2.0, 4.0, 8.0],
                    vec![16.0, 64.0],
                    vec![1.0, 4.0],
                    vec![2.0],
                    vec![64.0],
                ],
            ),
            "table1-full" => (Template::EdgeTpu, Template::EdgeTpu.accepted()),
            "table2-sub" => (
                Template::Fusemax,
                [
                    vec![64.0, 256.0],
                    vec![64.0, 256.0],
                    vec![32.0, 128.0],
                    vec![8192.0, 16384.0],
                    vec![4.0, 16.0],
                    vec![512.0, 4096.0],
                ],
            ),
            "table2-full" => (Template::Fusemax, Template::Fusemax.accepted()),
            _ => return Err(SweepError::UnknownGrid(name.into())),
        };
        Ok(Grid {
            name: name.into(),
            template,
            values,
        })
    }

    /// JSON `{"template": "edge-tpu", "axes": {"U": [16, 32]}}`; axes left
    /// out stay at the template baseline.
    pub fn from_json(text: &str) -> Result<Self, SweepError> {
        let f: GridFile =
            serde_json::from_str(text).map_err(|e| SweepError::Parse(e.to_string()))?;
        let names = f.template.axes();
        for k in f.axes.keys() {
            if !names.contains(&k.as_str()) {
                return Err(SweepError::InvalidGrid(format!(
                    "unknown axis {k:?} for {}",
                    f.template.name()
                )));
            }
        }
        let base = f.template.baseline();
        let values: [Vec<f64>; 6] =
            std::array::from_fn(|i| f.axes.get(names[i]).cloned().unwrap_or(vec![base[i]]));
        for (i, v) in values.iter().enumerate() {
            if v.is_empty() {
                return Err(SweepError::InvalidGrid(format!(
                    "axis {} is empty",
                    names[i]
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SweepError::InvalidGrid(format!(
                    "axis {} has a non-finite value",
                    names[i]
                )));
            }
        }
        Ok(Grid {
            name: f.name.unwrap_or_else(|| "custom".into()),
            template: f.template,
            values,
        })
    }

    /// Named grid, or a grid file when the name is not built in.
    pub fn resolve(name_or_path: &str) -> Result<Self, SweepError> {
        if GRID_NAMES.contains(&name_or_path) {
            return Grid::named(name_or_path);
        }
        match std::fs::read_to_string(name_or_path) {
            Ok(text) => Grid::from_json(&text),
            Err(_) => Err(SweepError::UnknownGrid(name_or_path.into())),
        }
    }

    pub fn len(&self) -> usize {
        self.values.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product, first axis slowest.
    pub fn points(&self) -> Vec<[f64; 6]> {
        let mut out = vec![[0.0; 6]];
        for (i, vals) in self.values.iter().enumerate() {
            out = out
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |v| {
                        let mut q = p;
                        q[i] = *v;
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// `(axis, value)` pairs outside the template's accepted set.
    pub fn extensions(&self) -> Vec<(&'static str, f64)> {
        let acc = self.template.accepted();
        let names = self.template.axes();
        let mut out = vec![];
        for i in 0..6 {
            for v in &self.values[i] {
                if !acc[i].contains(v) {
                    out.push((names[i], *v));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Inference,
    Training,
    Both,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inference" => Some(Mode::Inference),
            "training" => Some(Mode::Training),
            "both" => Some(Mode::Both),
            _ => None,
        }
    }

    fn inference(self) -> bool {
        self != Mode::Training
    }

    fn training(self) -> bool {
        self != Mode::Inference
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub mode: Mode,
    pub fusion: FusionSetting,
    pub mapping: MappingConfig,
    /// Loss and optimizer used to differentiate a forward workload.
    pub loss: LossSpec,
    pub optimizer: Option<OptimizerSpec>,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            mode: Mode::Both,
            fusion: FusionSetting::Auto(FusionLimits::default()),
            mapping: MappingConfig::default(),
            loss: LossSpec::default(),
            optimizer: Some(OptimizerSpec::sgd()),
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cost {
    pub latency_cycles: u64,
    #[serde(rename = "energy_pJ")]
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub f: Option<Cost>,
    pub fb: Option<Cost>,
    /// Peak live activation bytes of the training run, or of inference when
    /// training is not evaluated.
    pub peak_mem_bytes: u64,
    /// Partition size of the training run, or of inference when training is
    /// not evaluated.
    pub fused_subgraph_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config: [f64; 6],
    pub result: Result<Metrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub template: Template,
    /// In grid order.
    pub rows: Vec<SweepRow>,
}

pub const METRIC_COLUMNS: [&str; 6] = [
    "f_latency_cycles",
    "f_energy_pJ",
    "fb_latency_cycles",
    "fb_energy_pJ",
    "peak_mem_bytes",
    "fused_subgraph_count",
];

impl SweepOutput {
    /// Successful rows only. Columns not evaluated in the chosen mode are
    /// left empty.
    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        let mut header: Vec<&str> = self.template.axes().to_vec();
        header.extend(METRIC_COLUMNS);
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let Ok(m) = &r.result else { continue };
            let mut rec: Vec<String> = r.config.iter().map(|v| v.to_string()).collect();
            for c in [m.f, m.fb] {
                match c {
                    Some(c) => rec.extend([c.latency_cycles.to_string(), c.energy_pj.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            rec.push(m.peak_mem_bytes.to_string());
            rec.push(m.fused_subgraph_count.to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Failed rows with the config columns and a `reason` column.
    pub fn failures_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        let mut header: Vec<&str> = self.template.axes().to_vec();
        header.push("reason");
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let Err(reason) = &r.result else { continue };
            let mut rec: Vec<String> = r.config.iter().map(|v| v.to_string()).collect();
            rec.push(reason.clone());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.result.is_err()).count()
    }
}

type PartitionCache =
    Mutex<HashMap<(bool, (Option<u64>, Option<u64>)), Result<FusedPartition, String>>>;

struct Runner<'a> {
    fwd: Option<&'a ComputationGraph>,
    train: Option<ComputationGraph>,
    opts: &'a SweepOptions,
    cache: PartitionCache,
}

impl Runner<'_> {
    fn setting(
        &self,
        training: bool,
        g: &ComputationGraph,
        hda: &HdaSpec,
    ) -> Result<FusionSetting, String> {
        let FusionSetting::Auto(limits) = &self.opts.fusion else {
            return Ok(self.opts.fusion.clone());
        };
        let key = (training, capacity_key(hda));
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return hit.clone().map(|p| FusionSetting::Manual(p.subgraphs));
        }
        let p = fuse(g, hda, &self.opts.mapping, limits).map_err(|e| e.to_string());
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, p.clone());
        p.map(|p| FusionSetting::Manual(p.subgraphs))
    }

    fn run_one(
        &self,
        g: &ComputationGraph,
        training: bool,
        hda: &HdaSpec,
    ) -> Result<(Cost, u64, usize), String> {
        let setting = self.setting(training, g, hda)?;
        let e = evaluate(g, hda, &self.opts.mapping, &setting).map_err(|e| e.to_string())?;
        Ok((
            Cost {
                latency_cycles: e.latency_cycles,
                energy_pj: e.energy_pj,
            },
            e.peak_activation_bytes,
            e.partition.len(),
        ))
    }

    fn point(&self, template: Template, p: &[f64; 6]) -> Result<Metrics, String> {
        let hda = template.build(p).map_err(|e| e.to_string())?;
        let f = self.fwd.map(|g| self.run_one(g, false, &hda)).transpose()?;
        let fb = self
            .train
            .as_ref()
            .map(|g| self.run_one(g, true, &hda))
            .transpose()?;
        let (_, peak, count) = fb.or(f).expect("at least one mode");
        Ok(Metrics {
            f: f.map(|x| x.0),
            fb: fb.map(|x| x.0),
            peak_mem_bytes: peak,
            fused_subgraph_count: count,
        })
    }
}

/// Evaluates every grid point. `workload` is a forward graph, or a training
/// graph when the mode is `Training`. Per-point failures are reported in the
/// row, never as an error; rows come back in grid order whatever the
/// thread count.
pub fn run_sweep(
    grid: &Grid,
    workload: &ComputationGraph,
    opts: &SweepOptions,
) -> Result<SweepOutput, SweepError> {
    let is_training = workload.nodes.values().any(|n| n.phase != Phase::Forward);
    let train = if !opts.mode.training() {
        None
    } else if is_training {
        Some(workload.clone())
    } else {
        let tg = build_training_graph(workload, opts.loss, opts.optimizer)
            .map_err(|e| SweepError::Workload(e.to_string()))?;
        Some(tg.graph)
    };
    if is_training && opts.mode.inference() {
        return Err(SweepError::Workload(
            "inference needs a forward-only workload".into(),
        ));
    }
    let runner = Runner {
        fwd: opts.mode.inference().then_some(workload),
        train,
        opts,
        cache: Mutex::new(HashMap::new()),
    };
    let points = grid.points();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| SweepError::Workload(e.to_string()))?;
    let rows = pool.install(|| {
        points
            .par_iter()
            .map(|p| SweepRow {
                config: *p,
                result: runner.point(grid.template, p),
            })
            .collect()
    });
    Ok(SweepOutput {
        template: grid.template,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::builtin;

    #[test]
    fn named_grids_have_expected_sizes() {
        assert_eq!(Grid::named("table1-sub").unwrap().len(), 64);
        assert_eq!(
            Grid::named("table1-full").unwrap().len(),
            5 * 5 * 4 * 4 * 5 * 5
        );
        assert_eq!(Grid::named("table2-sub").unwrap().len(), 64);
        assert_eq!(
            Grid::named("table2-full").unwrap().len(),
            4 * 4 * 4 * 2 * 4 * 5
        );
        for n in GRID_NAMES {
            assert!(Grid::named(n).unwrap().extensions().is_empty(), "{n}");
        }
        assert!(Grid::named("nope").is_err());
    }

    #[test]
    fn points_are_first_axis_slowest() {
        let g =
            Grid::from_json(r#"{"template":"edge-tpu","axes":{"xPEs":[1,2],"L":[1,4]}}"#).unwrap();
        let p = g.points();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0], [1.0, 4.0, 64.0, 1.0, 2.0, 64.0]);
        assert_eq!(p[1], [1.0, 4.0, 64.0, 4.0, 2.0, 64.0]);
        assert_eq!(p[2][0], 2.0);
    }

    #[test]
    fn grid_file_errors_and_extensions() {
        assert!(matches!(
            Grid::from_json(r#"{"template":"edge-tpu","axes":{"Q":[1]}}"#),
            Err(SweepError::InvalidGrid(_))
        ));
        assert!(matches!(
            Grid::from_json(r#"{"template":"edge-tpu","axes":{"U":[]}}"#),
            Err(SweepError::InvalidGrid(_))
        ));
        assert!(matches!(Grid::from_json("{"), Err(SweepError::Parse(_))));
        let g = Grid::from_json(r#"{"template":"edge-tpu","axes":{"U":[16,24]}}"#).unwrap();
        assert_eq!(g.extensions(), vec![("U", 24.0)]);
    }

    #[test]
    fn invalid_points_become_failed_rows() {
        let g = Grid::from_json(
            r#"{"template":"edge-tpu","axes":{"xPEs":[1,0],"yPEs":[1],"U":[16],"L":[1]}}"#,
        )
        .unwrap();
        let fwd = builtin("resnet-desk").unwrap();
        let opts = SweepOptions {
            mode: Mode::Inference,
            fusion: FusionSetting::Off,
            ..SweepOptions::default()
        };
        let out = run_sweep(&g, &fwd, &opts).unwrap();
        assert_eq!(out.failed(), 1);
        let csv = out.csv();
        assert_eq!(csv.lines().count(), 1 + g.len() - out.failed());
        assert!(csv.starts_with("xPEs,yPEs,U,L,local_mem_MB,rf_KB,f_latency_cycles,f_energy_pJ,"));
        let fail = out.failures_csv();
        assert_eq!(fail.lines().count(), 2);
        assert!(fail.lines().nth(1).unwrap().starts_with("0,1,16,1,2,64,"));
    }

    #[test]
    fn rows_do_not_depend_on_thread_count() {
        let g = Grid::from_json(
            r#"{"template":"edge-tpu","axes":{"xPEs":[1,2],"yPEs":[1,2],"U":[16],"L":[1]}}"#,
        )
        .unwrap();
        let fwd = builtin("resnet-desk").unwrap();
        let run = |jobs| {
            let opts = SweepOptions {
                jobs,
                ..SweepOptions::default()
            };
            run_sweep(&g, &fwd, &opts).unwrap().csv()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn cached_partition_matches_a_fresh_solve() {
        let fwd = builtin("resnet-desk").unwrap();
        let g = Grid::from_json(r#"{"template":"edge-tpu","axes":{"xPEs":[1,2]}}"#).unwrap();
        let opts = SweepOptions {
            mode: Mode::Inference,
            ..SweepOptions::default()
        };
        let out = run_sweep(&g, &fwd, &opts).unwrap();
        for r in &out.rows {
            let hda = g.template.build(&r.config).unwrap();
            let e = evaluate(&fwd, &hda, &opts.mapping, &opts.fusion).unwrap();
            let m = r.result.as_ref().unwrap();
            assert_eq!(m.f.unwrap().latency_cycles, e.latency_cycles);
            assert_eq!(m.fused_subgraph_count, e.partition.len());
        }
    }
}
