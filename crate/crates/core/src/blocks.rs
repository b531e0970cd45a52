//! Composite blocks: MobileNetV2's inverted residual and linear bottleneck,
//! squeeze-and-excitation, and the decoder's modified residual block.
//!
//! Blocks append nodes to a [`GraphBuilder`]; node names follow the
//! `{block}_{layer}` pattern so weight files stay readable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, ModelGraph, NodeId};

pub const SE_REDUCTION: usize = 8;

/// Nonlinearity used inside the modified residual block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Relu6,
}

impl Activation {
    fn apply(self, b: &mut GraphBuilder, name: &str, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => b.relu(name, x),
            Activation::Relu6 => b.relu6(name, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    InvertedResidual,
    LinearBottleneck,
    ModifiedResidual,
    SqueezeExcite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Channel expansion of the MobileNetV2 blocks.
    pub expansion: usize,
    /// Reduction ratio of squeeze-and-excitation.
    pub se_ratio: usize,
    pub activation: Activation,
}

impl BlockSpec {
    pub fn inverted_residual(in_channels: usize, out_channels: usize, stride: usize, expansion: usize) -> Self {
        BlockSpec {
            kind: BlockKind::InvertedResidual,
            in_channels,
            out_channels,
            stride,
            expansion,
            se_ratio: SE_REDUCTION,
            activation: Activation::Relu6,
        }
    }

    pub fn linear_bottleneck(in_channels: usize, out_channels: usize, stride: usize, expansion: usize) -> Self {
        BlockSpec {
            kind: BlockKind::LinearBottleneck,
            ..Self::inverted_residual(in_channels, out_channels, stride, expansion)
        }
    }

    pub fn modified_residual(in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind: BlockKind::ModifiedResidual,
            in_channels,
            out_channels,
            stride: 1,
            expansion: 1,
            se_ratio: SE_REDUCTION,
            activation: Activation::Relu,
        }
    }

    pub fn squeeze_excite(channels: usize, ratio: usize) -> Self {
        BlockSpec {
            kind: BlockKind::SqueezeExcite,
            in_channels: channels,
            out_channels: channels,
            stride: 1,
            expansion: 1,
            se_ratio: ratio,
            activation: Activation::Relu,
        }
    }

    /// True when the block adds its input back onto its output unchanged.
    pub fn has_identity_skip(&self) -> bool {
        matches!(self.kind, BlockKind::InvertedResidual | BlockKind::LinearBottleneck)
            && self.stride == 1
            && self.in_channels == self.out_channels
    }

    /// Appends the block to `b`, reading from `x`.
    pub fn build(&self, b: &mut GraphBuilder, name: &str, x: NodeId) -> Result<NodeId> {
        let c = b.shape(x).c;
        if c != self.in_channels {
            return Err(Error::invalid(
                "block",
                format!("{name} expects {} input channels, got {c}", self.in_channels),
            ));
        }
        match self.kind {
            BlockKind::InvertedResidual => inverted_residual(b, name, x, self.out_channels, self.stride, self.expansion, false),
            BlockKind::LinearBottleneck => inverted_residual(b, name, x, self.out_channels, self.stride, self.expansion, true),
            BlockKind::ModifiedResidual => modified_residual(b, name, x, self.out_channels, self.se_ratio, self.activation),
            BlockKind::SqueezeExcite => squeeze_excite(b, name, x, self.se_ratio),
        }
    }

    /// A graph holding only this block, for an input of `h` x `w`.
    pub fn standalone(&self, h: usize, w: usize) -> Result<ModelGraph> {
        let (mut b, x) = GraphBuilder::new(self.in_channels, h, w);
        let y = self.build(&mut b, "block", x)?;
        Ok(b.finish(y))
    }
}

/// Hidden width of the excitation bottleneck.
pub fn se_hidden(channels: usize, ratio: usize) -> usize {
    ((channels as f64 / ratio as f64).round() as usize).max(1)
}

/// Interior width of the modified residual block.
pub fn reduced_width(out_channels: usize) -> usize {
    out_channels.div_ceil(4)
}

/// Expand (1x1) -> depthwise 3x3 -> project (1x1), each followed by BN.
/// ReLU6 follows the expand and depthwise stages; the projection is linear
/// for the bottleneck variant and ReLU6-activated otherwise. An expansion of
/// 1 omits the expand stage.
pub fn inverted_residual(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    out_channels: usize,
    stride: usize,
    expansion: usize,
    linear: bool,
) -> Result<NodeId> {
    let cin = b.shape(x).c;
    let mut h = x;
    if expansion != 1 {
        h = b.conv(&format!("{name}_expand"), h, cin * expansion, 1, 1, false)?;
        h = b.batchnorm(&format!("{name}_expand_BN"), h)?;
        h = b.relu6(&format!("{name}_expand_relu"), h)?;
    }
    h = b.depthwise(&format!("{name}_depthwise"), h, 3, stride)?;
    h = b.batchnorm(&format!("{name}_depthwise_BN"), h)?;
    h = b.relu6(&format!("{name}_depthwise_relu"), h)?;
    h = b.conv(&format!("{name}_project"), h, out_channels, 1, 1, false)?;
    h = b.batchnorm(&format!("{name}_project_BN"), h)?;
    if !linear {
        h = b.relu6(&format!("{name}_project_relu"), h)?;
    }
    if stride == 1 && cin == out_channels {
        h = b.add(&format!("{name}_add"), x, h)?;
    }
    Ok(h)
}

/// Global pool -> dense(C/r) -> ReLU -> dense(C) -> sigmoid -> channel gate.
pub fn squeeze_excite(b: &mut GraphBuilder, name: &str, x: NodeId, ratio: usize) -> Result<NodeId> {
    let c = b.shape(x).c;
    let s = b.global_avg_pool(&format!("{name}_se_squeeze"), x)?;
    let s = b.dense(&format!("{name}_se_reduce"), s, se_hidden(c, ratio), true)?;
    let s = b.relu(&format!("{name}_se_relu"), s)?;
    let s = b.dense(&format!("{name}_se_expand"), s, c, true)?;
    let g = b.sigmoid(&format!("{name}_se_gate"), s)?;
    b.channel_scale(&format!("{name}_se_scale"), x, g)
}

/// Main path 1x1(out/4) -> 3x3(out/4) -> 3x3(out), BN after each and ReLU
/// after the first two; projected identity 1x1(out) + BN; add, ReLU, SE.
pub fn modified_residual(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    out_channels: usize,
    se_ratio: usize,
    act: Activation,
) -> Result<NodeId> {
    let q = reduced_width(out_channels);
    let mut h = b.conv(&format!("{name}_conv1"), x, q, 1, 1, true)?;
    h = b.batchnorm(&format!("{name}_bn1"), h)?;
    h = act.apply(b, &format!("{name}_relu1"), h)?;
    h = b.conv(&format!("{name}_conv2"), h, q, 3, 1, true)?;
    h = b.batchnorm(&format!("{name}_bn2"), h)?;
    h = act.apply(b, &format!("{name}_relu2"), h)?;
    h = b.conv(&format!("{name}_conv3"), h, out_channels, 3, 1, true)?;
    h = b.batchnorm(&format!("{name}_bn3"), h)?;
    let mut s = b.conv(&format!("{name}_shortcut"), x, out_channels, 1, 1, true)?;
    s = b.batchnorm(&format!("{name}_shortcut_bn"), s)?;
    let y = b.add(&format!("{name}_add"), h, s)?;
    let y = act.apply(b, &format!("{name}_relu"), y)?;
    squeeze_excite(b, name, y, se_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{forward, ModelGraph};
    use crate::layers::Mode;
    use crate::tensor::Tensor;
    use crate::weights::WeightStore;

    fn zero_weights(g: &ModelGraph, store: &mut WeightStore<f64>, filter: impl Fn(&str) -> bool) {
        for p in g.params() {
            if filter(&p.name) && (p.name.ends_with("kernel") || p.name.ends_with("bias")) {
                store.values_mut(&p.name).unwrap().fill(0.0);
            }
        }
    }

    #[test]
    fn inverted_residual_shapes() {
        let g = BlockSpec::inverted_residual(16, 16, 1, 1).standalone(8, 8).unwrap();
        assert_eq!(g.output_shape(), g.input_shape());
        let g = BlockSpec::inverted_residual(16, 24, 2, 6).standalone(32, 32).unwrap();
        let o = g.output_shape();
        assert_eq!((o.c, o.h, o.w), (24, 16, 16));
    }

    #[test]
    fn zero_branch_with_skip_is_identity() {
        for spec in [
            BlockSpec::inverted_residual(8, 8, 1, 6),
            BlockSpec::linear_bottleneck(8, 8, 1, 6),
        ] {
            let g = spec.standalone(5, 5).unwrap();
            let mut store = WeightStore::<f64>::initialize(&g, 3);
            zero_weights(&g, &mut store, |n| n.contains("project"));
            for p in g.params().iter().filter(|p| p.name.contains("project_BN/beta")) {
                store.values_mut(&p.name).unwrap().fill(0.0);
            }
            let x = Tensor::from_fn((2, 8, 5, 5), |n, c, h, w| (n + c * 3 + h * 5 + w) as f64 * 0.1 - 1.0);
            let y = forward(&g, &store, &x, Mode::Infer, None).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn no_skip_across_stride_or_width_change() {
        assert!(!BlockSpec::linear_bottleneck(8, 8, 2, 6).has_identity_skip());
        assert!(!BlockSpec::linear_bottleneck(8, 16, 1, 6).has_identity_skip());
        let g = BlockSpec::linear_bottleneck(8, 16, 1, 6).standalone(4, 4).unwrap();
        assert!(g.nodes().iter().all(|n| !n.name.ends_with("_add")));
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let g = BlockSpec::squeeze_excite(16, 8).standalone(3, 3).unwrap();
        let mut store = WeightStore::<f64>::initialize(&g, 1);
        zero_weights(&g, &mut store, |_| true);
        let x = Tensor::from_fn((1, 16, 3, 3), |_, c, h, w| c as f64 - h as f64 * w as f64);
        let y = forward(&g, &store, &x, Mode::Infer, None).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| v * 0.5)) < 1e-12);
    }

    #[test]
    fn modified_residual_shape_and_width_rounding() {
        let g = BlockSpec::modified_residual(64, 32).standalone(16, 16).unwrap();
        let o = g.output_shape();
        assert_eq!((o.c, o.h, o.w), (32, 16, 16));
        assert_eq!(reduced_width(34), 9);
        assert_eq!(se_hidden(4, 8), 1);
        assert_eq!(se_hidden(161, 8), 20);
    }
}
