//! Operator kinds, their attributes, shape rules and loop dimensions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Named loop extents of an operator's iteration space.
pub type LoopDims = BTreeMap<String, u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropyWithSoftmax,
    MeanSquaredError,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropyWithSoftmax => "cross_entropy_with_softmax",
            LossKind::MeanSquaredError => "mean_squared_error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cross_entropy_with_softmax" | "ce" => Some(LossKind::CrossEntropyWithSoftmax),
            "mean_squared_error" | "mse" => Some(LossKind::MeanSquaredError),
            _ => None,
        }
    }
}

/// Primitive operator set of the IR.
///
/// Composite layers (batch norm, layer norm) are built from these primitives.
/// Binary elementwise ops broadcast their second operand onto the first using
/// right-aligned broadcasting; the output always has the first operand's shape.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `x (B,C,H,W)`, `w (K,C,FY,FX)` and optional bias `(K,1,1)`.
    Conv {
        stride: usize,
        pad: usize,
    },
    /// Input gradient of a convolution: `dy (B,K,OY,OX)`, `w (K,C,FY,FX)`.
    ConvTranspose {
        stride: usize,
        pad: usize,
    },
    /// Weight gradient of a convolution: `x (B,C,H,W)`, `dy (B,K,OY,OX)`.
    ConvGradWeight {
        stride: usize,
        pad: usize,
    },
    /// `x (M,K)`, `w (K,N)` and optional bias `(N)`.
    Gemm,
    /// Batched matrix product over identical leading dimensions.
    MatMul,
    Add,
    Sub,
    Mul,
    Scale {
        factor: f64,
    },
    ReLU,
    /// `(y, dy)`: upstream gradient masked by `y > 0`.
    ReLUGrad,
    Gelu,
    /// `(x, dy)`.
    GeluGrad,
    /// Softmax over the last axis.
    Softmax,
    /// Keeps `[..., i, j]` for `j <= i` and writes `fill` elsewhere.
    CausalMask {
        fill: f64,
    },
    /// `1 / sqrt(x + eps)`.
    Rsqrt {
        eps: f64,
    },
    Transpose {
        perm: Vec<usize>,
    },
    Reshape,
    /// Sums the input down to the (broadcast-compatible) output shape.
    ReduceSum,
    /// Broadcasts the input up to the output shape.
    Expand,
    /// Global average pooling `(B,C,H,W) -> (B,C,1,1)`.
    Pool,
    /// `(prediction, target) -> scalar (1)`.
    Loss {
        kind: LossKind,
    },
    /// `(prediction, target) -> d loss / d prediction`.
    LossGrad {
        kind: LossKind,
    },
    /// `(theta, grad, v) -> (theta', v')`.
    SgdUpdate {
        lr: f64,
        momentum: f64,
    },
    /// `(theta, grad, m, v) -> (theta', m', v')`.
    AdamUpdate {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
    },
}

/// Attribute value as stored in workload files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    List(Vec<i64>),
    Text(String),
}

impl AttrValue {
    fn as_f64(&self) -> Option<f64> {
        match self {
            AttrValue::Int(i) => Some(*i as f64),
            AttrValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    fn as_usize(&self) -> Option<usize> {
        match self {
            AttrValue::Int(i) if *i >= 0 => Some(*i as usize),
            _ => None,
        }
    }
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// Coarse class used by the cost model and the fusion constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    Convolution,
    Matrix,
    Elementwise,
    Reduction,
    DataMovement,
    Optimizer,
}

impl OpKind {
    pub const ALL_NAMES: &'static [&'static str] = &[
        "Conv",
        "ConvTranspose",
        "ConvGradWeight",
        "Gemm",
        "MatMul",
        "Add",
        "Sub",
        "Mul",
        "Scale",
        "ReLU",
        "ReLUGrad",
        "Gelu",
        "GeluGrad",
        "Softmax",
        "CausalMask",
        "Rsqrt",
        "Transpose",
        "Reshape",
        "ReduceSum",
        "Expand",
        "Pool",
        "Loss",
        "LossGrad",
        "SgdUpdate",
        "AdamUpdate",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv { .. } => "Conv",
            OpKind::ConvTranspose { .. } => "ConvTranspose",
            OpKind::ConvGradWeight { .. } => "ConvGradWeight",
            OpKind::Gemm => "Gemm",
            OpKind::MatMul => "MatMul",
            OpKind::Add => "Add",
            OpKind::Sub => "Sub",
            OpKind::Mul => "Mul",
            OpKind::Scale { .. } => "Scale",
            OpKind::ReLU => "ReLU",
            OpKind::ReLUGrad => "ReLUGrad",
            OpKind::Gelu => "Gelu",
            OpKind::GeluGrad => "GeluGrad",
            OpKind::Softmax => "Softmax",
            OpKind::CausalMask { .. } => "CausalMask",
            OpKind::Rsqrt { .. } => "Rsqrt",
            OpKind::Transpose { .. } => "Transpose",
            OpKind::Reshape => "Reshape",
            OpKind::ReduceSum => "ReduceSum",
            OpKind::Expand => "Expand",
            OpKind::Pool => "Pool",
            OpKind::Loss { .. } => "Loss",
            OpKind::LossGrad { .. } => "LossGrad",
            OpKind::SgdUpdate { .. } => "SgdUpdate",
            OpKind::AdamUpdate { .. } => "AdamUpdate",
        }
    }

    pub fn class(&self) -> OpClass {
        match self {
            OpKind::Conv { .. } | OpKind::ConvTranspose { .. } | OpKind::ConvGradWeight { .. } => {
                OpClass::Convolution
            }
            OpKind::Gemm | OpKind::MatMul => OpClass::Matrix,
            OpKind::ReduceSum | OpKind::Pool | OpKind::Loss { .. } => OpClass::Reduction,
            OpKind::Transpose { .. } | OpKind::Reshape | OpKind::Expand => OpClass::DataMovement,
            OpKind::SgdUpdate { .. } | OpKind::AdamUpdate { .. } => OpClass::Optimizer,
            _ => OpClass::Elementwise,
        }
    }

    /// Operators that need a MAC array (everything else can run on a vector unit).
    pub fn needs_array(&self) -> bool {
        matches!(self.class(), OpClass::Convolution | OpClass::Matrix)
    }

    /// Allowed input arities and the fixed output arity.
    pub fn arity(&self) -> (&'static [usize], usize) {
        match self {
            OpKind::Conv { .. } | OpKind::Gemm => (&[2, 3], 1),
            OpKind::ConvTranspose { .. }
            | OpKind::ConvGradWeight { .. }
            | OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::ReLUGrad
            | OpKind::GeluGrad
            | OpKind::Loss { .. }
            | OpKind::LossGrad { .. } => (&[2], 1),
            OpKind::SgdUpdate { .. } => (&[3], 2),
            OpKind::AdamUpdate { .. } => (&[4], 3),
            _ => (&[1], 1),
        }
    }

    pub fn attrs(&self) -> Attrs {
        let mut a = Attrs::new();
        match self {
            OpKind::Conv { stride, pad }
            | OpKind::ConvTranspose { stride, pad }
            | OpKind::ConvGradWeight { stride, pad } => {
                a.insert("stride".into(), AttrValue::Int(*stride as i64));
                a.insert("pad".into(), AttrValue::Int(*pad as i64));
            }
            OpKind::Scale { factor } => {
                a.insert("factor".into(), AttrValue::Float(*factor));
            }
            OpKind::CausalMask { fill } => {
                a.insert("fill".into(), AttrValue::Float(*fill));
            }
            OpKind::Rsqrt { eps } => {
                a.insert("eps".into(), AttrValue::Float(*eps));
            }
            OpKind::Transpose { perm } => {
                a.insert(
                    "perm".into(),
                    AttrValue::List(perm.iter().map(|&p| p as i64).collect()),
                );
            }
            OpKind::Loss { kind } | OpKind::LossGrad { kind } => {
                a.insert("loss".into(), AttrValue::Text(kind.name().into()));
            }
            OpKind::SgdUpdate { lr, momentum } => {
                a.insert("lr".into(), AttrValue::Float(*lr));
                a.insert("momentum".into(), AttrValue::Float(*momentum));
            }
            OpKind::AdamUpdate {
                lr,
                beta1,
                beta2,
                eps,
                step,
            } => {
                a.insert("lr".into(), AttrValue::Float(*lr));
                a.insert("beta1".into(), AttrValue::Float(*beta1));
                a.insert("beta2".into(), AttrValue::Float(*beta2));
                a.insert("eps".into(), AttrValue::Float(*eps));
                a.insert("step".into(), AttrValue::Int(*step as i64));
            }
            _ => {}
        }
        a
    }

    /// Rebuilds a kind from its name and attribute map, rejecting unknown or
    /// missing attributes.
    pub fn from_parts(name: &str, attrs: &Attrs) -> Result<OpKind, String> {
        let expected: &[&str] = match name {
            "Conv" | "ConvTranspose" | "ConvGradWeight" => &["pad", "stride"],
            "Scale" => &["factor"],
            "CausalMask" => &["fill"],
            "Rsqrt" => &["eps"],
            "Transpose" => &["perm"],
            "Loss" | "LossGrad" => &["loss"],
            "SgdUpdate" => &["lr", "momentum"],
            "AdamUpdate" => &["beta1", "beta2", "eps", "lr", "step"],
            n if Self::ALL_NAMES.contains(&n) => &[],
            n => return Err(format!("unknown operator kind `{n}`")),
        };
        for key in attrs.keys() {
            if !expected.contains(&key.as_str()) {
                return Err(format!("unknown attribute `{key}` for {name}"));
            }
        }
        let get = |k: &str| {
            attrs
                .get(k)
                .ok_or_else(|| format!("missing attribute `{k}` for {name}"))
        };
        let float = |k: &str| {
            get(k)?
                .as_f64()
                .ok_or_else(|| format!("attribute `{k}` of {name} must be a number"))
        };
        let uint = |k: &str| {
            get(k)?
                .as_usize()
                .ok_or_else(|| format!("attribute `{k}` of {name} must be a non-negative integer"))
        };
        Ok(match name {
            "Conv" => OpKind::Conv {
                stride: uint("stride")?,
                pad: uint("pad")?,
            },
            "ConvTranspose" => OpKind::ConvTranspose {
                stride: uint("stride")?,
                pad: uint("pad")?,
            },
            "ConvGradWeight" => OpKind::ConvGradWeight {
                stride: uint("stride")?,
                pad: uint("pad")?,
            },
            "Gemm" => OpKind::Gemm,
            "MatMul" => OpKind::MatMul,
            "Add" => OpKind::Add,
            "Sub" => OpKind::Sub,
            "Mul" => OpKind::Mul,
            "Scale" => OpKind::Scale {
                factor: float("factor")?,
            },
            "ReLU" => OpKind::ReLU,
            "ReLUGrad" => OpKind::ReLUGrad,
            "Gelu" => OpKind::Gelu,
            "GeluGrad" => OpKind::GeluGrad,
            "Softmax" => OpKind::Softmax,
            "CausalMask" => OpKind::CausalMask {
                fill: float("fill")?,
            },
            "Rsqrt" => OpKind::Rsqrt { eps: float("eps")? },
            "Transpose" => match get("perm")? {
                AttrValue::List(p) if p.iter().all(|&v| v >= 0) => OpKind::Transpose {
                    perm: p.iter().map(|&v| v as usize).collect(),
                },
                _ => return Err("attribute `perm` must be a list of axes".into()),
            },
            "Reshape" => OpKind::Reshape,
            "ReduceSum" => OpKind::ReduceSum,
            "Expand" => OpKind::Expand,
            "Pool" => OpKind::Pool,
            "Loss" | "LossGrad" => {
                let kind = match get("loss")? {
                    AttrValue::Text(t) => {
                        LossKind::parse(t).ok_or_else(|| format!("unknown loss `{t}`"))?
                    }
                    _ => return Err("attribute `loss` must be a string".into()),
                };
                if name == "Loss" {
                    OpKind::Loss { kind }
                } else {
                    OpKind::LossGrad { kind }
                }
            }
            "SgdUpdate" => OpKind::SgdUpdate {
                lr: float("lr")?,
                momentum: float("momentum")?,
            },
            "AdamUpdate" => OpKind::AdamUpdate {
                lr: float("lr")?,
                beta1: float("beta1")?,
                beta2: float("beta2")?,
                eps: float("eps")?,
                step: match get("step")? {
                    AttrValue::Int(s) if *s >= 1 => *s as u64,
                    _ => return Err("attribute `step` must be a positive integer".into()),
                },
            },
            _ => unreachable!(),
        })
    }

    /// Infers output shapes for kinds whose outputs are fully determined by
    /// their inputs. Kinds that need a target shape (`Reshape`, `ReduceSum`,
    /// `Expand`, `ConvTranspose`) return `None`.
    pub fn infer_output_shapes(
        &self,
        inputs: &[&[usize]],
    ) -> Option<Result<Vec<Vec<usize>>, String>> {
        let out = match self {
            OpKind::Reshape
            | OpKind::ReduceSum
            | OpKind::Expand
            | OpKind::ConvTranspose { .. }
            | OpKind::ConvGradWeight { .. } => return None,
            OpKind::Conv { stride, pad } => {
                if inputs.len() < 2 || inputs[0].len() != 4 || inputs[1].len() != 4 {
                    return Some(Err("Conv expects 4-D input and weight".into()));
                }
                let (x, w) = (inputs[0], inputs[1]);
                match conv_out(x[2], w[2], *stride, *pad).zip(conv_out(x[3], w[3], *stride, *pad)) {
                    Some((oy, ox)) => vec![vec![x[0], w[0], oy, ox]],
                    None => return Some(Err("Conv window larger than padded input".into())),
                }
            }
            OpKind::Gemm => {
                if inputs.len() < 2 || inputs[0].len() != 2 || inputs[1].len() != 2 {
                    return Some(Err("Gemm expects 2-D operands".into()));
                }
                vec![vec![inputs[0][0], inputs[1][1]]]
            }
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.len() < 2 || a.len() != b.len() {
                    return Some(Err("MatMul expects operands of equal rank >= 2".into()));
                }
                let r = a.len();
                let mut s = a[..r - 2].to_vec();
                s.push(a[r - 2]);
                s.push(b[r - 1]);
                vec![s]
            }
            OpKind::Transpose { perm } => {
                let x = inputs[0];
                if perm.len() != x.len() {
                    return Some(Err("Transpose perm rank mismatch".into()));
                }
                vec![perm
                    .iter()
                    .map(|&p| x.get(p).copied().unwrap_or(0))
                    .collect()]
            }
            OpKind::Pool => {
                let x = inputs[0];
                if x.len() != 4 {
                    return Some(Err("Pool expects a 4-D input".into()));
                }
                vec![vec![x[0], x[1], 1, 1]]
            }
            OpKind::Loss { .. } => vec![vec![1]],
            OpKind::SgdUpdate { .. } => vec![inputs[0].to_vec(), inputs[0].to_vec()],
            OpKind::AdamUpdate { .. } => vec![inputs[0].to_vec(); 3],
            OpKind::ReLUGrad | OpKind::GeluGrad | OpKind::LossGrad { .. } => {
                vec![inputs[1].to_vec()]
            }
            _ => vec![inputs[0].to_vec()],
        };
        Some(Ok(out))
    }

    /// Checks operand and result shapes against this kind's signature.
    pub fn check_shapes(&self, ins: &[&[usize]], outs: &[&[usize]]) -> Result<(), String> {
        let (in_ar, out_ar) = self.arity();
        if !in_ar.contains(&ins.len()) || outs.len() != out_ar {
            return Err(format!(
                "{} takes {:?} inputs and {} outputs, got {} and {}",
                self.name(),
                in_ar,
                out_ar,
                ins.len(),
                outs.len()
            ));
        }
        let same = |a: &[usize], b: &[usize], what: &str| {
            if a == b {
                Ok(())
            } else {
                Err(format!("{}: {what} shape {a:?} != {b:?}", self.name()))
            }
        };
        match self {
            OpKind::Conv { stride, pad } => {
                let (x, w, y) = (ins[0], ins[1], outs[0]);
                if x.len() != 4 || w.len() != 4 || y.len() != 4 {
                    return Err("Conv operands must be 4-D".into());
                }
                if x[1] != w[1] {
                    return Err("Conv channel mismatch".into());
                }
                let oy = conv_out(x[2], w[2], *stride, *pad);
                let ox = conv_out(x[3], w[3], *stride, *pad);
                same(y, &[x[0], w[0], oy.unwrap_or(0), ox.unwrap_or(0)], "output")?;
                if ins.len() == 3 {
                    same(ins[2], &[w[0], 1, 1], "bias")?;
                }
                Ok(())
            }
            OpKind::ConvTranspose { stride, pad } => {
                let (dy, w, dx) = (ins[0], ins[1], outs[0]);
                if dy.len() != 4 || w.len() != 4 || dx.len() != 4 {
                    return Err("ConvTranspose operands must be 4-D".into());
                }
                if dy[1] != w[0] || dx[1] != w[1] || dx[0] != dy[0] {
                    return Err("ConvTranspose channel mismatch".into());
                }
                same(
                    &[dy[2], dy[3]],
                    &[
                        conv_out(dx[2], w[2], *stride, *pad).unwrap_or(0),
                        conv_out(dx[3], w[3], *stride, *pad).unwrap_or(0),
                    ],
                    "spatial",
                )
            }
            OpKind::ConvGradWeight { stride, pad } => {
                let (x, dy, dw) = (ins[0], ins[1], outs[0]);
                if x.len() != 4 || dy.len() != 4 || dw.len() != 4 {
                    return Err("ConvGradWeight operands must be 4-D".into());
                }
                if x[0] != dy[0] || dw[0] != dy[1] || dw[1] != x[1] {
                    return Err("ConvGradWeight channel mismatch".into());
                }
                same(
                    &[dy[2], dy[3]],
                    &[
                        conv_out(x[2], dw[2], *stride, *pad).unwrap_or(0),
                        conv_out(x[3], dw[3], *stride, *pad).unwrap_or(0),
                    ],
                    "spatial",
                )
            }
            OpKind::Gemm => {
                let (x, w, y) = (ins[0], ins[1], outs[0]);
                if x.len() != 2 || w.len() != 2 || x[1] != w[0] {
                    return Err("Gemm expects (M,K) x (K,N)".into());
                }
                same(y, &[x[0], w[1]], "output")?;
                if ins.len() == 3 {
                    same(ins[2], &[w[1]], "bias")?;
                }
                Ok(())
            }
            OpKind::MatMul => {
                let (a, b, y) = (ins[0], ins[1], outs[0]);
                let r = a.len();
                if r < 2 || b.len() != r || a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
                    return Err("MatMul expects (...,M,K) x (...,K,N)".into());
                }
                let mut s = a[..r - 2].to_vec();
                s.extend([a[r - 2], b[r - 1]]);
                same(y, &s, "output")
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                if !broadcastable(ins[1], ins[0]) {
                    return Err(format!(
                        "{}: {:?} does not broadcast to {:?}",
                        self.name(),
                        ins[1],
                        ins[0]
                    ));
                }
                same(outs[0], ins[0], "output")
            }
            OpKind::ReLUGrad | OpKind::GeluGrad | OpKind::LossGrad { .. } => {
                same(ins[0], ins[1], "operand")?;
                same(outs[0], ins[0], "output")
            }
            OpKind::Softmax | OpKind::CausalMask { .. } => {
                if matches!(self, OpKind::CausalMask { .. }) {
                    let r = ins[0].len();
                    if r < 2 || ins[0][r - 1] != ins[0][r - 2] {
                        return Err("CausalMask expects square trailing dims".into());
                    }
                }
                same(outs[0], ins[0], "output")
            }
            OpKind::Transpose { perm } => {
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if sorted != (0..ins[0].len()).collect::<Vec<_>>() {
                    return Err("Transpose perm is not a permutation".into());
                }
                let s: Vec<usize> = perm.iter().map(|&p| ins[0][p]).collect();
                same(outs[0], &s, "output")
            }
            OpKind::Reshape => {
                if numel(ins[0]) != numel(outs[0]) {
                    return Err("Reshape changes element count".into());
                }
                Ok(())
            }
            OpKind::ReduceSum => {
                if !broadcastable(outs[0], ins[0]) {
                    return Err("ReduceSum output must broadcast to its input".into());
                }
                Ok(())
            }
            OpKind::Expand => {
                if !broadcastable(ins[0], outs[0]) {
                    return Err("Expand input must broadcast to its output".into());
                }
                Ok(())
            }
            OpKind::Pool => {
                let x = ins[0];
                if x.len() != 4 {
                    return Err("Pool expects a 4-D input".into());
                }
                same(outs[0], &[x[0], x[1], 1, 1], "output")
            }
            OpKind::Loss { .. } => {
                same(ins[0], ins[1], "target")?;
                same(outs[0], &[1], "output")
            }
            OpKind::SgdUpdate { .. } | OpKind::AdamUpdate { .. } => {
                for s in ins.iter().chain(outs.iter()) {
                    same(s, ins[0], "state")?;
                }
                Ok(())
            }
            OpKind::Scale { .. } | OpKind::ReLU | OpKind::Gelu | OpKind::Rsqrt { .. } => {
                same(outs[0], ins[0], "output")
            }
        }
    }

    /// Named loop extents; the MAC count is their product.
    pub fn loop_dims(&self, ins: &[&[usize]], outs: &[&[usize]]) -> LoopDims {
        let mut d = LoopDims::new();
        let mut put = |k: &str, v: usize| {
            d.insert(k.to_string(), v as u64);
        };
        match self {
            OpKind::Conv { .. } => {
                let (x, w, y) = (ins[0], ins[1], outs[0]);
                put("B", x[0]);
                put("K", w[0]);
                put("C", w[1]);
                put("OY", y[2]);
                put("OX", y[3]);
                put("FY", w[2]);
                put("FX", w[3]);
            }
            OpKind::ConvTranspose { .. } => {
                let (dy, w) = (ins[0], ins[1]);
                put("B", dy[0]);
                put("K", w[0]);
                put("C", w[1]);
                put("OY", dy[2]);
                put("OX", dy[3]);
                put("FY", w[2]);
                put("FX", w[3]);
            }
            OpKind::ConvGradWeight { .. } => {
                let (x, dy, dw) = (ins[0], ins[1], outs[0]);
                put("B", x[0]);
                put("K", dw[0]);
                put("C", dw[1]);
                put("OY", dy[2]);
                put("OX", dy[3]);
                put("FY", dw[2]);
                put("FX", dw[3]);
            }
            OpKind::Gemm => {
                put("M", ins[0][0]);
                put("K", ins[0][1]);
                put("N", ins[1][1]);
            }
            OpKind::MatMul => {
                let a = ins[0];
                let r = a.len();
                put("B", a[..r - 2].iter().product());
                put("M", a[r - 2]);
                put("K", a[r - 1]);
                put("N", ins[1][r - 1]);
            }
            OpKind::Reshape => {}
            OpKind::ReduceSum | OpKind::Pool | OpKind::Loss { .. } => {
                for (i, &v) in ins[0].iter().enumerate() {
                    put(&format!("D{i}"), v);
                }
            }
            _ => {
                for (i, &v) in outs[0].iter().enumerate() {
                    put(&format!("D{i}"), v);
                }
            }
        }
        d
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Product of loop extents; an empty iteration space performs no MACs.
pub fn macs_of(dims: &LoopDims) -> u64 {
    if dims.is_empty() {
        0
    } else {
        dims.values().product()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn conv_out(input: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < window {
        return None;
    }
    Some((input + 2 * pad - window) / stride + 1)
}

/// Right-aligned broadcasting: every trailing dim of `from` equals the
/// matching dim of `to` or is 1.
pub fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == to[off + i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attrs_round_trip_for_every_parameterised_kind() {
        let kinds = [
            OpKind::Conv { stride: 2, pad: 1 },
            OpKind::Scale { factor: -0.125 },
            OpKind::CausalMask { fill: -1e9 },
            OpKind::Transpose {
                perm: vec![0, 2, 1, 3],
            },
            OpKind::Loss {
                kind: LossKind::MeanSquaredError,
            },
            OpKind::AdamUpdate {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 1,
            },
        ];
        for k in kinds {
            assert_eq!(OpKind::from_parts(k.name(), &k.attrs()).unwrap(), k);
        }
    }

    #[test]
    fn unknown_attribute_is_rejected() {
        let mut a = OpKind::ReLU.attrs();
        a.insert("alpha".into(), AttrValue::Float(0.1));
        assert!(OpKind::from_parts("ReLU", &a).is_err());
        assert!(OpKind::from_parts("Frobnicate", &Attrs::new()).is_err());
    }

    #[test]
    fn conv_loop_dims_give_standard_mac_count() {
        let k = OpKind::Conv { stride: 1, pad: 1 };
        let d = k.loop_dims(&[&[2, 3, 8, 8], &[4, 3, 3, 3]], &[&[2, 4, 8, 8]]);
        assert_eq!(macs_of(&d), 2 * 4 * 3 * 8 * 8 * 3 * 3);
    }

    #[test]
    fn broadcasting_rules() {
        assert!(broadcastable(&[4, 1, 1], &[2, 4, 8, 8]));
        assert!(broadcastable(&[8], &[3, 8]));
        assert!(!broadcastable(&[4], &[2, 4, 8, 8]));
        assert!(!broadcastable(&[1, 2, 3], &[2, 3]));
    }
}
