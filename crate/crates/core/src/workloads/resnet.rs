use serde::{Deserialize, Serialize};

use super::BuildError;
use crate::graph::{ComputationGraph, EdgeId, EdgeKind, OpKind, Phase};

/// CIFAR-style residual network.
///
/// With `include_downsample`, blocks are grouped in stages of two; every stage
/// after the first halves the spatial size and doubles the channel count, and
/// its first block carries a strided 1x1 projection on the skip path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResnetConfig {
    pub num_blocks: usize,
    pub base_channels: usize,
    pub input_shape: [usize; 4],
    pub include_downsample: bool,
    pub num_classes: usize,
    pub element_bytes: usize,
}

impl ResnetConfig {
    /// Eight blocks on a (1,3,32,32) input with 16 base channels.
    pub fn desk() -> Self {
        ResnetConfig {
            num_blocks: 8,
            base_channels: 16,
            input_shape: [1, 3, 32, 32],
            include_downsample: true,
            num_classes: 10,
            element_bytes: 2,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.input_shape[0] = batch;
        self
    }

    fn validate(&self) -> Result<(), BuildError> {
        if self.num_blocks == 0 {
            return Err(BuildError::InvalidConfig("num_blocks must be >= 1".into()));
        }
        if self.base_channels == 0
            || self.num_classes == 0
            || self.element_bytes == 0
            || self.input_shape.contains(&0)
        {
            return Err(BuildError::InvalidConfig(
                "all dimensions must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

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

    fn conv(
        &mut self,
        x: EdgeId,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Result<EdgeId, BuildError> {
        let in_c = self.g.edge(x).shape[1];
        let w = self.weight(&[out_c, in_c, k, k]);
        self.op(OpKind::Conv { stride, pad: k / 2 }, &[x, w])
    }

    /// Inference-style batch norm: per-channel scale then shift.
    fn bn(&mut self, x: EdgeId) -> Result<EdgeId, BuildError> {
        let c = self.g.edge(x).shape[1];
        let gamma = self.weight(&[c, 1, 1]);
        let beta = self.weight(&[c, 1, 1]);
        let s = self.op(OpKind::Mul, &[x, gamma])?;
        self.op(OpKind::Add, &[s, beta])
    }

    fn block(&mut self, x: EdgeId, out_c: usize, stride: usize) -> Result<EdgeId, BuildError> {
        let in_c = self.g.edge(x).shape[1];
        let h = self.conv(x, out_c, 3, stride)?;
        let h = self.bn(h)?;
        let h = self.op(OpKind::ReLU, &[h])?;
        let h = self.conv(h, out_c, 3, 1)?;
        let h = self.bn(h)?;
        let skip = if stride != 1 || in_c != out_c {
            let s = self.conv(x, out_c, 1, stride)?;
            self.bn(s)?
        } else {
            x
        };
        let y = self.op(OpKind::Add, &[h, skip])?;
        self.op(OpKind::ReLU, &[y])
    }
}

pub fn build_resnet(cfg: &ResnetConfig) -> Result<ComputationGraph, BuildError> {
    cfg.validate()?;
    let mut b = Builder {
        g: ComputationGraph::default(),
        eb: cfg.element_bytes,
    };
    let x =
        b.g.add_input(&cfg.input_shape, cfg.element_bytes, EdgeKind::Input);
    let mut h = b.conv(x, cfg.base_channels, 3, 1)?;
    h = b.bn(h)?;
    h = b.op(OpKind::ReLU, &[h])?;
    let mut channels = cfg.base_channels;
    for i in 0..cfg.num_blocks {
        let mut stride = 1;
        if cfg.include_downsample && i > 0 && i % 2 == 0 {
            stride = 2;
            channels *= 2;
        }
        h = b.block(h, channels, stride)?;
    }
    let p = b.op(OpKind::Pool, &[h])?;
    let n = cfg.input_shape[0];
    let flat = b.g.add_node_shaped(
        OpKind::Reshape,
        &[p],
        vec![n, channels],
        EdgeKind::Activation,
        Phase::Forward,
    )?;
    let w = b.weight(&[channels, cfg.num_classes]);
    let bias = b.weight(&[cfg.num_classes]);
    let logits = b.op(OpKind::Gemm, &[flat, w, bias])?;
    b.g.graph_outputs.push(logits);
    Ok(b.g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{conv_out, validate_graph};

    #[test]
    fn first_conv_matches_a_3_to_64_channel_3x3() {
        let cfg = ResnetConfig {
            base_channels: 64,
            ..ResnetConfig::desk()
        };
        let g = build_resnet(&cfg).unwrap();
        assert!(validate_graph(&g).is_empty());
        let first = g
            .nodes
            .values()
            .find(|n| matches!(n.kind, OpKind::Conv { .. }))
            .unwrap();
        let d = &first.loop_dims;
        assert_eq!((d["C"], d["K"], d["FY"], d["FX"]), (3, 64, 3, 3));
        assert_eq!((d["OY"], d["OX"]), (32, 32));
    }

    #[test]
    fn minimal_block_has_exactly_one_residual_add() {
        let cfg = ResnetConfig {
            num_blocks: 1,
            base_channels: 1,
            input_shape: [1, 1, 4, 4],
            include_downsample: false,
            num_classes: 2,
            element_bytes: 2,
        };
        let g = build_resnet(&cfg).unwrap();
        assert!(validate_graph(&g).is_empty());
        let residual = g
            .nodes
            .values()
            .filter(|n| n.kind == OpKind::Add)
            .filter(|n| n.inputs.iter().all(|e| g.edge(*e).kind != EdgeKind::Weight))
            .count();
        assert_eq!(residual, 1);
    }

    /// Independent per-layer tally of the desk network's conv and classifier MACs.
    #[test]
    fn desk_conv_macs_match_layer_table() {
        let cfg = ResnetConfig::desk();
        let g = build_resnet(&cfg).unwrap();
        let mut expected = 0u64;
        let (mut c, mut hw) = (3usize, 32usize);
        let mut add = |cin: usize, cout: usize, k: usize, hin: usize, stride: usize| -> usize {
            let o = conv_out(hin, k, stride, k / 2).unwrap();
            expected += (cout * cin * o * o * k * k) as u64;
            o
        };
        hw = add(c, 16, 3, hw, 1);
        c = 16;
        for i in 0..8 {
            let (cout, s) = if i > 0 && i % 2 == 0 {
                (c * 2, 2)
            } else {
                (c, 1)
            };
            let o = add(c, cout, 3, hw, s);
            add(cout, cout, 3, o, 1);
            if s != 1 {
                add(c, cout, 1, hw, s);
            }
            c = cout;
            hw = o;
        }
        expected += (c * 10) as u64;
        let got: u64 = g
            .nodes
            .values()
            .filter(|n| n.kind.needs_array())
            .map(|n| n.macs)
            .sum();
        assert_eq!(got, expected);
        assert_eq!((c, hw), (128, 4));
    }

    #[test]
    fn rejects_zero_blocks() {
        let cfg = ResnetConfig {
            num_blocks: 0,
            ..ResnetConfig::desk()
        };
        assert!(matches!(
            build_resnet(&cfg),
            Err(BuildError::InvalidConfig(_))
        ));
    }
}
