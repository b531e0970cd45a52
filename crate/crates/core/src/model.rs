//! NanoNet-A/B/C: a truncated MobileNetV2 encoder, a modified-residual
//! bridge, three upsample/concat/residual decoder stages and a 1x1 head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{inverted_residual, modified_residual, Activation, SE_REDUCTION};
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, ModelGraph, NodeId, ParamCount};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    /// Decoder widths, shallowest stage first.
    pub fn decoder_channels(self) -> [usize; 3] {
        match self {
            Variant::A => [32, 64, 128],
            Variant::B => [32, 64, 96],
            Variant::C => [16, 24, 32],
        }
    }

    /// Bridge width found by the parameter-count calibration (see
    /// CALIBRATION.md).
    pub fn bridge_channels(self) -> usize {
        match self {
            Variant::A => 161,
            Variant::B => 93,
            Variant::C => 34,
        }
    }

    /// Published trainable-parameter totals the calibration targets.
    pub fn reference_parameters(self) -> usize {
        match self {
            Variant::A => 235_425,
            Variant::B => 132_049,
            Variant::C => 36_561,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let t = t.strip_prefix("NANONET-").unwrap_or(&t);
        match t {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            _ => Err(Error::Config(format!("unknown variant {s:?}; expected A, B or C"))),
        }
    }
}

pub const DEFAULT_WIDTH_MULTIPLIER: f64 = 0.35;
pub const DEFAULT_ENCODER_CUT: &str = "block_6_expand_relu";
pub const DEFAULT_SKIPS: [&str; 3] = ["block_3_expand_relu", "block_1_expand_relu", "input"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Decoder widths, shallowest stage first; the deepest stage uses the
    /// last entry.
    pub decoder_channels: [usize; 3],
    pub bridge_channels: usize,
    pub num_classes: usize,
    /// (height, width)
    pub input_size: (usize, usize),
    pub width_multiplier: f64,
    /// Encoder node the bridge reads from.
    pub encoder_cut: String,
    /// Skip taps at 2x, 4x and 8x the bridge resolution.
    pub skip_stages: [String; 3],
    pub se_ratio: usize,
    pub decoder_activation: Activation,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            decoder_channels: variant.decoder_channels(),
            bridge_channels: variant.bridge_channels(),
            num_classes: 1,
            input_size: (256, 256),
            width_multiplier: DEFAULT_WIDTH_MULTIPLIER,
            encoder_cut: DEFAULT_ENCODER_CUT.to_string(),
            skip_stages: DEFAULT_SKIPS.map(String::from),
            se_ratio: SE_REDUCTION,
            decoder_activation: Activation::Relu,
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.decoder_channels.contains(&0) || self.bridge_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of 8")));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config("width multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Rounds a channel count to a multiple of 8 without dropping below 90% of
/// the requested width.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = (((v + d / 2.0) / d).floor() * d).max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}

/// (expansion, channels, repeats, first stride) per MobileNetV2 stage.
const MOBILENET_V2_STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// Builds the MobileNetV2 feature extractor up to and including the node
/// named `cut`. Every node stays addressable by name for skip taps.
pub fn build_encoder(b: &mut GraphBuilder, x: NodeId, alpha: f64, cut: &str) -> Result<NodeId> {
    let stem = make_divisible(32.0 * alpha, 8);
    let mut h = b.conv("Conv1", x, stem, 3, 2, false)?;
    h = b.batchnorm("bn_Conv1", h)?;
    h = b.relu6("Conv1_relu", h)?;
    let mut index = 0;
    for &(t, c, n, s) in &MOBILENET_V2_STAGES {
        if let Some(id) = b.find(cut) {
            b.truncate(id);
            return Ok(id);
        }
        let out = make_divisible((c as f64 * alpha).trunc(), 8);
        for r in 0..n {
            let name = if index == 0 {
                "expanded_conv".to_string()
            } else {
                format!("block_{index}")
            };
            h = inverted_residual(b, &name, h, out, if r == 0 { s } else { 1 }, t, true)?;
            index += 1;
            if let Some(id) = b.find(cut) {
                b.truncate(id);
                return Ok(id);
            }
        }
    }
    match b.find(cut) {
        Some(id) => {
            b.truncate(id);
            Ok(id)
        }
        None => Err(Error::Config(format!("unknown encoder stage {cut:?}"))),
    }
}

/// The full segmentation network for `cfg`.
pub fn build_nanonet(cfg: &ModelConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let (h, w) = cfg.input_size;
    let (mut b, x) = GraphBuilder::new(3, h, w);
    let cut = build_encoder(&mut b, x, cfg.width_multiplier, &cfg.encoder_cut)?;
    b.tap("encoder_output", cut);
    let mut skips = Vec::with_capacity(3);
    for name in &cfg.skip_stages {
        let id = b
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown encoder stage {name:?}")))?;
        if id >= cut {
            return Err(Error::Config(format!("skip stage {name:?} is not shallower than the encoder cut")));
        }
        skips.push(id);
    }

    let mut y = modified_residual(&mut b, "bridge", cut, cfg.bridge_channels, cfg.se_ratio, cfg.decoder_activation)?;
    b.tap("bridge", y);
    for (i, &skip) in skips.iter().enumerate() {
        let stage = i + 1;
        let width = cfg.decoder_channels[2 - i];
        y = b.upsample2x(&format!("decoder_{stage}_upsample"), y)?;
        y = b
            .concat(&format!("decoder_{stage}_concat"), y, skip)
            .map_err(|e| Error::Graph(format!("decoder stage {stage}: {e}")))?;
        y = modified_residual(&mut b, &format!("decoder_{stage}"), y, width, cfg.se_ratio, cfg.decoder_activation)?;
        b.tap(&format!("decoder_{stage}"), y);
    }
    y = b.conv("head_conv", y, cfg.num_classes, 1, 1, true)?;
    y = if cfg.num_classes == 1 {
        b.sigmoid("head_sigmoid", y)?
    } else {
        b.softmax("head_softmax", y)?
    };
    Ok(b.finish(y))
}

pub fn count_parameters(graph: &ModelGraph) -> ParamCount {
    graph.count_parameters()
}

/// Trainable parameters grouped by top-level component: encoder, bridge,
/// each decoder stage and the head.
pub fn component_breakdown(graph: &ModelGraph) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, n) in graph.count_parameters().per_node {
        let group = component_of(&name);
        match out.iter_mut().find(|(g, _)| *g == group) {
            Some((_, v)) => *v += n,
            None => out.push((group, n)),
        }
    }
    out
}

/// Top-level component a node belongs to.
pub fn component_of(node: &str) -> String {
    if node.starts_with("bridge") {
        "bridge".into()
    } else if let Some(rest) = node.strip_prefix("decoder_") {
        format!("decoder_{}", rest.split('_').next().unwrap_or(""))
    } else if node.starts_with("head") {
        "head".into()
    } else {
        "encoder".into()
    }
}

/// Totals for every bridge width in `widths`, other settings from `cfg`.
pub fn bridge_sweep(cfg: &ModelConfig, widths: impl IntoIterator<Item = usize>) -> Result<Vec<(usize, usize)>> {
    widths
        .into_iter()
        .map(|wd| {
            let mut c = cfg.clone();
            c.bridge_channels = wd;
            Ok((wd, build_nanonet(&c)?.count_parameters().total))
        })
        .collect()
}
