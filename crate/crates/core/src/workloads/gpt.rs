use serde::{Deserialize, Serialize};

use super::BuildError;
use crate::graph::{ComputationGraph, EdgeId, EdgeKind, OpKind, Phase};

/// Pre-norm decoder stack operating on already-embedded tokens.
///
/// Activations are kept as `(batch * seq_len, d_model)` matrices; attention
/// reshapes them to `(batch, heads, seq_len, head_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub causal: bool,
    pub batch: usize,
    pub vocab: usize,
    pub element_bytes: usize,
}

impl GptConfig {
    pub fn desk() -> Self {
        GptConfig {
            num_layers: 2,
            d_model: 128,
            n_heads: 4,
            seq_len: 64,
            causal: true,
            batch: 1,
            vocab: 256,
            element_bytes: 2,
        }
    }

    fn validate(&self) -> Result<(), BuildError> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(BuildError::InvalidConfig(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.seq_len == 0 || self.batch == 0 || self.vocab == 0 || self.element_bytes == 0 {
            return Err(BuildError::InvalidConfig(
                "all dimensions must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MASK_FILL: f64 = -1e9;

struct Builder {
    g: ComputationGraph,
    eb: usize,
}

impl Builder {
    fn weight(&mut self, shape: &[usize]) -> EdgeId {
        self.g.add_input(shape, self.eb, EdgeKind::Weight)
    }

    fn op(&mut self, kind: OpKind, inputs: &[EdgeId]) -> Result<EdgeId, BuildError> {
        Ok(self
            .g
            .add_node(kind, inputs, EdgeKind::Activation, Phase::Forward)?)
    }

    fn shaped(&mut self, kind: OpKind, x: EdgeId, shape: Vec<usize>) -> Result<EdgeId, BuildError> {
        Ok(self
            .g
            .add_node_shaped(kind, &[x], shape, EdgeKind::Activation, Phase::Forward)?)
    }

    fn linear(&mut self, x: EdgeId, out: usize, bias: bool) -> Result<EdgeId, BuildError> {
        let d = self.g.edge(x).shape[1];
        let w = self.weight(&[d, out]);
        if bias {
            let b = self.weight(&[out]);
            self.op(OpKind::Gemm, &[x, w, b])
        } else {
            self.op(OpKind::Gemm, &[x, w])
        }
    }

    /// Layer norm over the last axis from sum, scale, rsqrt and affine primitives.
    fn layer_norm(&mut self, x: EdgeId) -> Result<EdgeId, BuildError> {
        let shape = self.g.edge(x).shape.clone();
        let (rows, d) = (shape[0], shape[1]);
        let inv_d = 1.0 / d as f64;
        let s = self.shaped(OpKind::ReduceSum, x, vec![rows, 1])?;
        let mu = self.op(OpKind::Scale { factor: inv_d }, &[s])?;
        let xc = self.op(OpKind::Sub, &[x, mu])?;
        let sq = self.op(OpKind::Mul, &[xc, xc])?;
        let ss = self.shaped(OpKind::ReduceSum, sq, vec![rows, 1])?;
        let var = self.op(OpKind::Scale { factor: inv_d }, &[ss])?;
        let r = self.op(
            OpKind::Rsqrt {
                eps: LAYER_NORM_EPS,
            },
            &[var],
        )?;
        let xn = self.op(OpKind::Mul, &[xc, r])?;
        let gamma = self.weight(&[d]);
        let beta = self.weight(&[d]);
        let y = self.op(OpKind::Mul, &[xn, gamma])?;
        self.op(OpKind::Add, &[y, beta])
    }

    /// `(B*S, D)` to `(B, H, S, dh)`, or `(B, H, dh, S)` when `keys` is set.
    fn split_heads(
        &mut self,
        x: EdgeId,
        cfg: &GptConfig,
        keys: bool,
    ) -> Result<EdgeId, BuildError> {
        let dh = cfg.d_model / cfg.n_heads;
        let r = self.shaped(
            OpKind::Reshape,
            x,
            vec![cfg.batch, cfg.seq_len, cfg.n_heads, dh],
        )?;
        let perm = if keys {
            vec![0, 2, 3, 1]
        } else {
            vec![0, 2, 1, 3]
        };
        self.op(OpKind::Transpose { perm }, &[r])
    }

    fn attention(&mut self, x: EdgeId, cfg: &GptConfig) -> Result<EdgeId, BuildError> {
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let q = self.linear(x, d, true)?;
        let k = self.linear(x, d, true)?;
        let v = self.linear(x, d, true)?;
        let q = self.split_heads(q, cfg, false)?;
        let k = self.split_heads(k, cfg, true)?;
        let v = self.split_heads(v, cfg, false)?;
        let mut s = self.op(OpKind::MatMul, &[q, k])?;
        s = self.op(
            OpKind::Scale {
                factor: 1.0 / (dh as f64).sqrt(),
            },
            &[s],
        )?;
        if cfg.causal {
            s = self.op(OpKind::CausalMask { fill: MASK_FILL }, &[s])?;
        }
        let p = self.op(OpKind::Softmax, &[s])?;
        let ctx = self.op(OpKind::MatMul, &[p, v])?;
        let ctx = self.op(
            OpKind::Transpose {
                perm: vec![0, 2, 1, 3],
            },
            &[ctx],
        )?;
        let ctx = self.shaped(OpKind::Reshape, ctx, vec![cfg.batch * cfg.seq_len, d])?;
        self.linear(ctx, d, true)
    }

    fn layer(&mut self, x: EdgeId, cfg: &GptConfig) -> Result<EdgeId, BuildError> {
        let h = self.layer_norm(x)?;
        let a = self.attention(h, cfg)?;
        let x = self.op(OpKind::Add, &[x, a])?;
        let h = self.layer_norm(x)?;
        let h = self.linear(h, 4 * cfg.d_model, true)?;
        let h = self.op(OpKind::Gelu, &[h])?;
        let h = self.linear(h, cfg.d_model, true)?;
        self.op(OpKind::Add, &[x, h])
    }
}

pub fn build_gpt(cfg: &GptConfig) -> Result<ComputationGraph, BuildError> {
    cfg.validate()?;
    let mut b = Builder {
        g: ComputationGraph::default(),
        eb: cfg.element_bytes,
    };
    let (bs, s, d) = (cfg.batch, cfg.seq_len, cfg.d_model);
    let tokens =
        b.g.add_input(&[bs * s, d], cfg.element_bytes, EdgeKind::Input);
    let t3 = b.shaped(OpKind::Reshape, tokens, vec![bs, s, d])?;
    let pos = b.weight(&[s, d]);
    let t3 = b.op(OpKind::Add, &[t3, pos])?;
    let mut x = b.shaped(OpKind::Reshape, t3, vec![bs * s, d])?;
    for _ in 0..cfg.num_layers {
        x = b.layer(x, cfg)?;
    }
    let h = b.layer_norm(x)?;
    let logits = b.linear(h, cfg.vocab, false)?;
    b.g.graph_outputs.push(logits);
    Ok(b.g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;

    fn small(layers: usize) -> GptConfig {
        GptConfig {
            num_layers: layers,
            d_model: 64,
            n_heads: 4,
            seq_len: 16,
            ..GptConfig::desk()
        }
    }

    #[test]
    fn attention_scores_are_batch_heads_seq_seq() {
        let g = build_gpt(&small(1)).unwrap();
        assert!(validate_graph(&g).is_empty());
        let mm = g.nodes.values().find(|n| n.kind == OpKind::MatMul).unwrap();
        assert_eq!(g.edge(mm.outputs[0]).shape, vec![1, 4, 16, 16]);
    }

    #[test]
    fn layers_add_a_constant_node_count() {
        let n: Vec<usize> = (1..=3)
            .map(|l| build_gpt(&small(l)).unwrap().nodes.len())
            .collect();
        assert_eq!(n[2] - n[1], n[1] - n[0]);
        let per_layer = n[1] - n[0];
        assert_eq!(n[1], 2 * per_layer + (n[0] - per_layer));
    }

    #[test]
    fn projection_gemm_macs() {
        let g = build_gpt(&small(1)).unwrap();
        let gemm = g.nodes.values().find(|n| n.kind == OpKind::Gemm).unwrap();
        assert_eq!(gemm.macs, 16 * 64 * 64);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = GptConfig {
            n_heads: 3,
            ..small(1)
        };
        assert!(build_gpt(&cfg).is_err());
    }
}
