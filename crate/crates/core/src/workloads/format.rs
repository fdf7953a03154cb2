//! JSON workload files.
//!
//! ```text
//! { "nodes": [{"id", "kind", "inputs", "outputs", "loop_dims", "attrs", "phase"}],
//!   "edges": [{"id", "shape", "element_bytes", "kind"}],
//!   "graph_inputs": [...], "graph_outputs": [...] }
//! ```
//!
//! Producers, consumers and MAC counts are derived on import.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    macs_of, validate_graph, Attrs, ComputationGraph, Diagnostic, EdgeId, EdgeKind, LoopDims,
    NodeId, OpKind, OperatorNode, Phase, TensorEdge,
};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("parse error at line {line}, column {column}: {msg}")]
    ParseError {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid graph: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    GraphInvalid(Vec<Diagnostic>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: NodeId,
    kind: String,
    inputs: Vec<EdgeId>,
    outputs: Vec<EdgeId>,
    loop_dims: LoopDims,
    attrs: Attrs,
    phase: Phase,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    id: EdgeId,
    shape: Vec<usize>,
    element_bytes: usize,
    kind: EdgeKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadFile {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    graph_inputs: Vec<EdgeId>,
    graph_outputs: Vec<EdgeId>,
}

pub fn export_workload(g: &ComputationGraph) -> String {
    let file = WorkloadFile {
        nodes: g
            .nodes
            .values()
            .map(|n| NodeRecord {
                id: n.id,
                kind: n.kind.name().to_string(),
                inputs: n.inputs.clone(),
                outputs: n.outputs.clone(),
                loop_dims: n.loop_dims.clone(),
                attrs: n.kind.attrs(),
                phase: n.phase,
            })
            .collect(),
        edges: g
            .edges
            .values()
            .map(|e| EdgeRecord {
                id: e.id,
                shape: e.shape.clone(),
                element_bytes: e.element_bytes,
                kind: e.kind,
            })
            .collect(),
        graph_inputs: g.graph_inputs.clone(),
        graph_outputs: g.graph_outputs.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("workload serializes");
    s.push('\n');
    s
}

pub fn import_workload(text: &str) -> Result<ComputationGraph, WorkloadError> {
    let file: WorkloadFile = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => WorkloadError::SchemaViolation(e.to_string()),
        _ => WorkloadError::ParseError {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        },
    })?;
    let mut g = ComputationGraph::default();
    for e in file.edges {
        if g.edges.contains_key(&e.id) {
            return Err(WorkloadError::SchemaViolation(format!(
                "duplicate edge id {}",
                e.id
            )));
        }
        g.edges.insert(
            e.id,
            TensorEdge {
                id: e.id,
                shape: e.shape,
                element_bytes: e.element_bytes,
                producer: None,
                consumers: vec![],
                kind: e.kind,
            },
        );
    }
    for n in file.nodes {
        if g.nodes.contains_key(&n.id) {
            return Err(WorkloadError::SchemaViolation(format!(
                "duplicate node id {}",
                n.id
            )));
        }
        let kind = OpKind::from_parts(&n.kind, &n.attrs)
            .map_err(|m| WorkloadError::SchemaViolation(format!("node {}: {m}", n.id)))?;
        let macs = macs_of(&n.loop_dims);
        g.nodes.insert(
            n.id,
            OperatorNode {
                id: n.id,
                kind,
                inputs: n.inputs,
                outputs: n.outputs,
                loop_dims: n.loop_dims,
                macs,
                phase: n.phase,
            },
        );
    }
    g.graph_inputs = file.graph_inputs;
    g.graph_outputs = file.graph_outputs;
    let mut multi = BTreeSet::new();
    for n in g.nodes.values() {
        for o in &n.outputs {
            if !multi.insert(*o) {
                return Err(WorkloadError::GraphInvalid(vec![
                    Diagnostic::DuplicateProducer(*o),
                ]));
            }
        }
    }
    g.relink();
    let diags = validate_graph(&g);
    if diags.is_empty() {
        Ok(g)
    } else {
        Err(WorkloadError::GraphInvalid(diags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{build_gpt, build_resnet, GptConfig, ResnetConfig};

    fn minimal() -> ComputationGraph {
        build_resnet(&ResnetConfig {
            num_blocks: 1,
            base_channels: 2,
            input_shape: [1, 1, 4, 4],
            include_downsample: false,
            num_classes: 2,
            element_bytes: 2,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_structurally_identical() {
        let g = minimal();
        let text = export_workload(&g);
        let back = import_workload(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(export_workload(&back), text);
    }

    #[test]
    fn gpt_round_trip_preserves_float_attrs() {
        let g = build_gpt(&GptConfig {
            num_layers: 1,
            d_model: 12,
            n_heads: 3,
            seq_len: 4,
            ..GptConfig::desk()
        })
        .unwrap();
        assert_eq!(import_workload(&export_workload(&g)).unwrap(), g);
    }

    #[test]
    fn missing_shape_is_a_schema_violation() {
        let text = export_workload(&minimal()).replacen("\"shape\"", "\"shap\"", 1);
        assert!(matches!(
            import_workload(&text),
            Err(WorkloadError::SchemaViolation(_))
        ));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = export_workload(&minimal());
        assert!(matches!(
            import_workload(&text[..text.len() / 2]),
            Err(WorkloadError::ParseError { .. })
        ));
    }

    #[test]
    fn cycle_is_reported_as_invalid_graph() {
        let text = r#"{
          "nodes": [
            {"id": 0, "kind": "ReLU", "inputs": [1], "outputs": [0], "loop_dims": {"D0": 2}, "attrs": {}, "phase": "forward"},
            {"id": 1, "kind": "ReLU", "inputs": [0], "outputs": [1], "loop_dims": {"D0": 2}, "attrs": {}, "phase": "forward"}
          ],
          "edges": [
            {"id": 0, "shape": [2], "element_bytes": 4, "kind": "activation"},
            {"id": 1, "shape": [2], "element_bytes": 4, "kind": "activation"}
          ],
          "graph_inputs": [],
          "graph_outputs": []
        }"#;
        match import_workload(text) {
            Err(WorkloadError::GraphInvalid(d)) => {
                assert!(d.contains(&Diagnostic::CycleDetected(vec![NodeId(0), NodeId(1)])))
            }
            other => panic!("expected GraphInvalid, got {other:?}"),
        }
    }
}
