//! Heterogeneous dataflow accelerator descriptions: cores with their memory
//! hierarchies, the links between them, and the two shipped templates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIB: f64 = 1024.0 * 1024.0;
pub const KIB: f64 = 1024.0;

/// Default energy constants, in pJ.
pub mod energy {
    pub const MAC: f64 = 1.0;
    pub const REGISTER_FILE: f64 = 0.1;
    pub const LOCAL_MEMORY: f64 = 1.0;
    pub const SHARED_BUFFER: f64 = 2.0;
    pub const OFFCHIP: f64 = 20.0;
    pub const LINK: f64 = 1.0;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HdaError {
    #[error("invalid template parameter: {0}")]
    InvalidParam(String),
    #[error("parse error at line {line}, column {column}: {msg}")]
    ParseError {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Weights,
    Inputs,
    Outputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLevel {
    pub name: String,
    /// `None` means unbounded (off-chip).
    pub capacity_bytes: Option<u64>,
    pub read_bandwidth_bytes_per_cycle: f64,
    pub write_bandwidth_bytes_per_cycle: f64,
    #[serde(rename = "read_energy_pJ_per_byte")]
    pub read_energy_pj_per_byte: f64,
    #[serde(rename = "write_energy_pJ_per_byte")]
    pub write_energy_pj_per_byte: f64,
    pub operands: Vec<Operand>,
}

impl MemoryLevel {
    /// A level serving all operands with symmetric bandwidth and energy.
    pub fn uniform(name: &str, capacity: Option<u64>, bandwidth: f64, energy: f64) -> Self {
        MemoryLevel {
            name: name.into(),
            capacity_bytes: capacity,
            read_bandwidth_bytes_per_cycle: bandwidth,
            write_bandwidth_bytes_per_cycle: bandwidth,
            read_energy_pj_per_byte: energy,
            write_energy_pj_per_byte: energy,
            operands: vec![Operand::Weights, Operand::Inputs, Operand::Outputs],
        }
    }

    pub fn serves(&self, op: Operand) -> bool {
        self.operands.contains(&op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataflow {
    WeightStationary,
    OutputStationary,
    SimdVector,
}

impl Dataflow {
    pub fn is_array(self) -> bool {
        self != Dataflow::SimdVector
    }
}

pub type CoreId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSpec {
    pub id: CoreId,
    pub dataflow: Dataflow,
    /// Spatial array extents, e.g. `[U, L]` or `[xPEs, yPEs]`.
    pub pe_dims: Vec<u32>,
    /// Operations each PE completes per cycle (SIMD width).
    pub ops_per_pe_per_cycle: u32,
    #[serde(rename = "mac_energy_pJ")]
    pub mac_energy_pj: f64,
    /// Innermost first.
    pub memory_levels: Vec<MemoryLevel>,
}

impl CoreSpec {
    /// Operations completed per cycle at full utilisation.
    pub fn parallelism(&self) -> u64 {
        self.pe_dims.iter().map(|&d| d as u64).product::<u64>() * self.ops_per_pe_per_cycle as u64
    }

    /// Capacity of the outermost on-chip level.
    pub fn on_chip_capacity(&self) -> u64 {
        self.memory_levels
            .iter()
            .filter_map(|l| l.capacity_bytes)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Endpoint {
    Core(CoreId),
    Offchip(OffchipTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffchipTag {
    Offchip,
}

pub const OFFCHIP: Endpoint = Endpoint::Offchip(OffchipTag::Offchip);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub a: CoreId,
    pub b: Endpoint,
    pub bandwidth_bytes_per_cycle: f64,
    #[serde(rename = "energy_pJ_per_byte")]
    pub energy_pj_per_byte: f64,
}

impl Link {
    pub fn connects(&self, x: Endpoint, y: Endpoint) -> bool {
        let a = Endpoint::Core(self.a);
        (a == x && self.b == y) || (a == y && self.b == x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HdaSpec {
    pub name: String,
    pub cores: Vec<CoreSpec>,
    pub links: Vec<Link>,
    pub offchip: MemoryLevel,
}

impl HdaSpec {
    pub fn core(&self, id: CoreId) -> Option<&CoreSpec> {
        self.cores.iter().find(|c| c.id == id)
    }

    pub fn array_cores(&self) -> impl Iterator<Item = &CoreSpec> {
        self.cores.iter().filter(|c| c.dataflow.is_array())
    }

    pub fn simd_cores(&self) -> impl Iterator<Item = &CoreSpec> {
        self.cores.iter().filter(|c| !c.dataflow.is_array())
    }

    /// Index of the direct link between two endpoints, if any.
    pub fn link_between(&self, x: Endpoint, y: Endpoint) -> Option<usize> {
        self.links.iter().position(|l| l.connects(x, y))
    }

    pub fn validate(&self) -> Result<(), HdaError> {
        let bad = |m: String| Err(HdaError::SchemaViolation(m));
        if self.cores.is_empty() {
            return bad("no cores".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.cores {
            if !ids.insert(c.id) {
                return bad(format!("duplicate core id {}", c.id));
            }
            if c.pe_dims.is_empty() || c.parallelism() == 0 {
                return bad(format!("core {}: empty PE array", c.id));
            }
            if !(c.mac_energy_pj >= 0.0) {
                return bad(format!("core {}: negative MAC energy", c.id));
            }
            if c.memory_levels.is_empty() {
                return bad(format!("core {}: no memory levels", c.id));
            }
            let mut prev = 0;
            for l in &c.memory_levels {
                check_level(l, false)?;
                let cap = l.capacity_bytes.unwrap_or(u64::MAX);
                if cap < prev {
                    return bad(format!(
                        "core {}: level {} is smaller than the level inside it",
                        c.id, l.name
                    ));
                }
                prev = cap;
            }
        }
        check_level(&self.offchip, true)?;
        for l in &self.links {
            let known = |e: Endpoint| match e {
                Endpoint::Core(id) => ids.contains(&id),
                Endpoint::Offchip(_) => true,
            };
            if !known(Endpoint::Core(l.a)) || !known(l.b) {
                return bad(format!("link {} - {:?} names an unknown core", l.a, l.b));
            }
            if Endpoint::Core(l.a) == l.b {
                return bad(format!("link from core {} to itself", l.a));
            }
            if !(l.bandwidth_bytes_per_cycle > 0.0 && l.bandwidth_bytes_per_cycle.is_finite()) {
                return bad("link bandwidth must be positive".into());
            }
            if !(l.energy_pj_per_byte >= 0.0) {
                return bad("link energy must be non-negative".into());
            }
        }
        // Every core must reach off-chip memory.
        let mut reach: BTreeSet<Endpoint> = BTreeSet::from([OFFCHIP]);
        loop {
            let before = reach.len();
            for l in &self.links {
                let a = Endpoint::Core(l.a);
                if reach.contains(&a) || reach.contains(&l.b) {
                    reach.insert(a);
                    reach.insert(l.b);
                }
            }
            if reach.len() == before {
                break;
            }
        }
        for c in &self.cores {
            if !reach.contains(&Endpoint::Core(c.id)) {
                return bad(format!("core {} is not connected to off-chip memory", c.id));
            }
        }
        Ok(())
    }
}

fn check_level(l: &MemoryLevel, offchip: bool) -> Result<(), HdaError> {
    let bad = |m: String| Err(HdaError::SchemaViolation(format!("level {}: {m}", l.name)));
    match l.capacity_bytes {
        Some(0) => return bad("capacity must be positive".into()),
        None if !offchip => return bad("on-chip levels need a capacity".into()),
        _ => {}
    }
    let bw = [
        l.read_bandwidth_bytes_per_cycle,
        l.write_bandwidth_bytes_per_cycle,
    ];
    if !bw.iter().all(|b| *b > 0.0 && b.is_finite()) {
        return bad("bandwidths must be positive".into());
    }
    let en = [l.read_energy_pj_per_byte, l.write_energy_pj_per_byte];
    if !en.iter().all(|e| *e >= 0.0 && e.is_finite()) {
        return bad("energies must be non-negative".into());
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<(), HdaError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HdaError::InvalidParam(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

/// Edge TPU off-chip and bus bandwidth, bytes per cycle.
pub const EDGE_TPU_BUS_BANDWIDTH: f64 = 64.0;
/// Edge TPU PE-to-SIMD link bandwidth, bytes per cycle.
pub const EDGE_TPU_PE_LINK_BANDWIDTH: f64 = 256.0;
/// Each SIMD unit is 4-way.
pub const EDGE_TPU_SIMD_WAYS: u32 = 4;

/// A grid of `x_pes * y_pes` weight-stationary PEs, each with `simd_units`
/// 4-way SIMD units per lane and `lanes` lanes, a register file and a local
/// memory, plus one SIMD vector core of the same size. Every core has its
/// own link to off-chip memory and each PE a direct link to the vector core.
///
/// Register-file bandwidth is one byte per operation slot per cycle and
/// local-memory bandwidth one byte per `U * L` slot.
pub fn edge_tpu_config(
    x_pes: u32,
    y_pes: u32,
    simd_units: u32,
    lanes: u32,
    local_mem_mb: f64,
    rf_kb: f64,
) -> Result<HdaSpec, HdaError> {
    for (n, v) in [
        ("xPEs", x_pes),
        ("yPEs", y_pes),
        ("U", simd_units),
        ("L", lanes),
    ] {
        if v == 0 {
            return Err(HdaError::InvalidParam(format!("{n} must be positive")));
        }
    }
    positive("local memory", local_mem_mb)?;
    positive("register file", rf_kb)?;
    let rf_bytes = (rf_kb * KIB).round() as u64;
    let mem_bytes = (local_mem_mb * MIB).round() as u64;
    if rf_bytes == 0 || mem_bytes == 0 {
        return Err(HdaError::InvalidParam(
            "memory sizes round to zero bytes".into(),
        ));
    }
    if rf_bytes > mem_bytes {
        return Err(HdaError::InvalidParam(
            "register file larger than local memory".into(),
        ));
    }
    let ul = simd_units as f64 * lanes as f64;
    let levels = vec![
        MemoryLevel::uniform(
            "register_file",
            Some(rf_bytes),
            ul * EDGE_TPU_SIMD_WAYS as f64,
            energy::REGISTER_FILE,
        ),
        MemoryLevel::uniform("local_memory", Some(mem_bytes), ul, energy::LOCAL_MEMORY),
    ];
    let n = x_pes * y_pes;
    let mut cores: Vec<CoreSpec> = (0..n)
        .map(|id| CoreSpec {
            id,
            dataflow: Dataflow::WeightStationary,
            pe_dims: vec![simd_units, lanes],
            ops_per_pe_per_cycle: EDGE_TPU_SIMD_WAYS,
            mac_energy_pj: energy::MAC,
            memory_levels: levels.clone(),
        })
        .collect();
    cores.push(CoreSpec {
        id: n,
        dataflow: Dataflow::SimdVector,
        pe_dims: vec![simd_units, lanes],
        ops_per_pe_per_cycle: EDGE_TPU_SIMD_WAYS,
        mac_energy_pj: energy::MAC,
        memory_levels: levels,
    });
    let mut links: Vec<Link> = (0..=n)
        .map(|id| Link {
            a: id,
            b: OFFCHIP,
            bandwidth_bytes_per_cycle: EDGE_TPU_BUS_BANDWIDTH,
            energy_pj_per_byte: energy::LINK,
        })
        .collect();
    links.extend((0..n).map(|id| Link {
        a: id,
        b: Endpoint::Core(n),
        bandwidth_bytes_per_cycle: EDGE_TPU_PE_LINK_BANDWIDTH,
        energy_pj_per_byte: energy::LINK,
    }));
    let spec = HdaSpec {
        name: format!(
            "edge-tpu x{x_pes} y{y_pes} U{simd_units} L{lanes} mem{local_mem_mb}MB rf{rf_kb}KB"
        ),
        cores,
        links,
        offchip: MemoryLevel::uniform("offchip", None, EDGE_TPU_BUS_BANDWIDTH, energy::OFFCHIP),
    };
    spec.validate()?;
    Ok(spec)
}

/// Register bytes per PE of the FuseMax MAC array.
pub const FUSEMAX_PE_REGISTER_BYTES: u64 = 8;

/// One output-stationary `x_pes * y_pes` MAC array and one vector core with
/// `vector_pes` lanes, both backed by the shared on-chip buffer and linked to
/// each other at buffer bandwidth.
pub fn fusemax_config(
    x_pes: u32,
    y_pes: u32,
    vector_pes: u32,
    buffer_bw: f64,
    buffer_mb: f64,
    offchip_bw: f64,
) -> Result<HdaSpec, HdaError> {
    for (n, v) in [("xPEs", x_pes), ("yPEs", y_pes), ("vector PEs", vector_pes)] {
        if v == 0 {
            return Err(HdaError::InvalidParam(format!("{n} must be positive")));
        }
    }
    positive("buffer bandwidth", buffer_bw)?;
    positive("buffer size", buffer_mb)?;
    positive("off-chip bandwidth", offchip_bw)?;
    let pes = x_pes as u64 * y_pes as u64;
    let buffer = MemoryLevel::uniform(
        "shared_buffer",
        Some((buffer_mb * MIB).round() as u64),
        buffer_bw,
        energy::SHARED_BUFFER,
    );
    let regs = MemoryLevel::uniform(
        "pe_registers",
        Some(pes * FUSEMAX_PE_REGISTER_BYTES),
        2.0 * pes as f64,
        energy::REGISTER_FILE,
    );
    if regs.capacity_bytes > buffer.capacity_bytes {
        return Err(HdaError::InvalidParam(
            "buffer smaller than the PE registers".into(),
        ));
    }
    let cores = vec![
        CoreSpec {
            id: 0,
            dataflow: Dataflow::OutputStationary,
            pe_dims: vec![x_pes, y_pes],
            ops_per_pe_per_cycle: 1,
            mac_energy_pj: energy::MAC,
            memory_levels: vec![regs, buffer.clone()],
        },
        CoreSpec {
            id: 1,
            dataflow: Dataflow::SimdVector,
            pe_dims: vec![vector_pes],
            ops_per_pe_per_cycle: 1,
            mac_energy_pj: energy::MAC,
            memory_levels: vec![buffer],
        },
    ];
    let link = |a, b, bw| Link {
        a,
        b,
        bandwidth_bytes_per_cycle: bw,
        energy_pj_per_byte: energy::LINK,
    };
    let spec = HdaSpec {
        name: format!("fusemax x{x_pes} y{y_pes} vec{vector_pes} bw{buffer_bw} buf{buffer_mb}MB off{offchip_bw}"),
        cores,
        links: vec![
            link(0, Endpoint::Core(1), buffer_bw),
            link(0, OFFCHIP, offchip_bw),
            link(1, OFFCHIP, offchip_bw),
        ],
        offchip: MemoryLevel::uniform("offchip", None, offchip_bw, energy::OFFCHIP),
    };
    spec.validate()?;
    Ok(spec)
}

/// Baseline Edge TPU: 4x4 PEs, U=64, L=4, 2 MB local memory, 64 KB register file.
pub fn edge_tpu_baseline() -> HdaSpec {
    edge_tpu_config(4, 4, 64, 4, 2.0, 64.0).expect("baseline parameters are valid")
}

pub fn fusemax_baseline() -> HdaSpec {
    fusemax_config(256, 256, 128, 16384.0, 16.0, 4096.0).expect("baseline parameters are valid")
}

pub const TEMPLATE_NAMES: [&str; 2] = ["edge-tpu", "fusemax"];

/// Baseline spec of a named template.
pub fn template(name: &str) -> Option<HdaSpec> {
    match name {
        "edge-tpu" => Some(edge_tpu_baseline()),
        "fusemax" => Some(fusemax_baseline()),
        _ => None,
    }
}

pub fn save_hda_spec(spec: &HdaSpec) -> String {
    let mut s = serde_json::to_string_pretty(spec).expect("spec serializes");
    s.push('\n');
    s
}

pub fn load_hda_spec(text: &str) -> Result<HdaSpec, HdaError> {
    let spec: HdaSpec = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => HdaError::SchemaViolation(e.to_string()),
        _ => HdaError::ParseError {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        },
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Edge TPU search-space values.
pub mod table1 {
    pub const PES: [u32; 5] = [1, 2, 4, 6, 8];
    pub const SIMD_UNITS: [u32; 4] = [16, 32, 64, 128];
    pub const LANES: [u32; 4] = [1, 2, 4, 8];
    pub const LOCAL_MEM_MB: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 4.0];
    pub const RF_KB: [f64; 5] = [8.0, 16.0, 32.0, 64.0, 128.0];
}

/// FuseMax search-space values.
pub mod table2 {
    pub const PES: [u32; 4] = [64, 128, 256, 512];
    pub const VECTOR_PES: [u32; 4] = [32, 64, 128, 256];
    pub const BUFFER_BW: [f64; 2] = [8192.0, 16384.0];
    pub const BUFFER_MB: [f64; 4] = [4.0, 8.0, 16.0, 32.0];
    pub const OFFCHIP_BW: [f64; 5] = [512.0, 1024.0, 2048.0, 4096.0, 8192.0];
}
