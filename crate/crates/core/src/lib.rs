//! Training-graph compiler and analytical cost model for heterogeneous
//! dataflow accelerators.
//!
//! The pipeline is: build a forward graph ([`workloads`]), derive the full
//! training graph ([`autodiff`]), optionally rewrite it with activation
//! checkpointing ([`checkpoint`]), partition it into fused subgraphs
//! ([`fusion`]) and schedule it on a hardware description ([`hda`],
//! [`scheduler`]). [`moo`] searches checkpoint plans with NSGA-II and
//! [`sweep`] runs hardware design-space sweeps. [`interpreter`] is a numeric
//! reference executor used to check the graph transformations.

pub mod autodiff;
pub mod checkpoint;
pub mod fusion;
pub mod graph;
pub mod hda;
pub mod interpreter;
pub mod moo;
pub mod plot;
pub mod scheduler;
pub mod sweep;
#[cfg(test)]
mod testutil;
pub mod workloads;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the numeric reference paths.
pub trait Scalar:
    Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type TensorValueF64 = interpreter::TensorValue<f64>;
pub type TensorValueF32 = interpreter::TensorValue<f32>;
pub type Bindings = interpreter::Bindings<f64>;

pub use graph::{ComputationGraph, EdgeId, EdgeKind, NodeId, OpKind, Phase};
