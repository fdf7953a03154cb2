//! Forward-graph builders and the workload file format.

mod format;
mod gpt;
mod resnet;

pub use format::{export_workload, import_workload, WorkloadError};
pub use gpt::{build_gpt, GptConfig};
pub use resnet::{build_resnet, ResnetConfig};

use thiserror::Error;

use crate::graph::GraphError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Named builtin workloads.
pub fn builtin(name: &str) -> Option<crate::ComputationGraph> {
    match name {
        "resnet-desk" => build_resnet(&ResnetConfig::desk()).ok(),
        "gpt-desk" => build_gpt(&GptConfig::desk()).ok(),
        _ => None,
    }
}

pub const BUILTIN_NAMES: &[&str] = &["resnet-desk", "gpt-desk"];
