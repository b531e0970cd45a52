//! Static computation graphs, their executor, and reverse-mode
//! differentiation over a recorded tape.
//!
//! Nodes are appended in topological order by [`GraphBuilder`], so a forward
//! pass walks the node list front to back and the backward pass walks it in
//! reverse.

use std::collections::HashMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::activation::{
    relu6_backward, relu_backward, sigmoid_backward, softmax_channels_backward,
};
use crate::layers::conv::{conv2d_backward, depthwise_conv2d_backward};
use crate::layers::dense::{channel_scale_backward, dense_backward, global_average_pool_backward};
use crate::layers::norm::{batchnorm_infer_backward, batchnorm_train_backward, update_running_stats, BatchNormCache};
use crate::layers::resample::bilinear_upsample2x_backward;
use crate::layers::{self, output_extent, BatchNormParams, Mode, Padding, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::{Element, Shape, Tensor};
use crate::weights::{dims_to_shape, WeightStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    HeUniform { fan_in: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running mean/variance: stored and counted, never optimized.
    RunningStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
    pub node: NodeId,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv2d {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        weight: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    Relu6,
    Sigmoid,
    SoftmaxChannels,
    Add,
    ConcatChannels,
    Upsample2x,
    GlobalAvgPool,
    Dense {
        weight: usize,
        bias: Option<usize>,
        out_features: usize,
    },
    /// `inputs[0]` scaled per channel by the (N, C, 1, 1) gate `inputs[1]`.
    ChannelScale,
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::Relu6 => "relu6",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxChannels => "softmax",
            Op::Add => "add",
            Op::ConcatChannels => "concat",
            Op::Upsample2x => "upsample2x",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::ChannelScale => "channel_scale",
        }
    }

    pub fn param_ids(&self) -> Vec<usize> {
        match *self {
            Op::Conv2d { weight, bias, .. } | Op::Dense { weight, bias, .. } => {
                std::iter::once(weight).chain(bias).collect()
            }
            Op::DepthwiseConv2d { weight, .. } => vec![weight],
            Op::BatchNorm { gamma, beta, mean, var } => vec![gamma, beta, mean, var],
            _ => Vec::new(),
        }
    }
}

/// Per-sample feature-map extent (channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub fn batched(self, n: usize) -> Shape {
        Shape::new(n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Output extent at the graph's nominal input size.
    pub out: FeatureShape,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    params: Vec<ParamSpec>,
    param_index: HashMap<String, usize>,
    output: NodeId,
    taps: Vec<(String, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Trainable parameters.
    pub total: usize,
    /// Stored but not optimized (batch-norm running statistics).
    pub buffers: usize,
    /// (node name, trainable parameter count) for every node owning any.
    pub per_node: Vec<(String, usize)>,
}

impl ModelGraph {
    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.param_index.get(name).map(|&i| &self.params[i])
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.nodes[0].out
    }

    pub fn output_shape(&self) -> FeatureShape {
        self.nodes[self.output.0].out
    }

    pub fn taps(&self) -> &[(String, NodeId)] {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Option<NodeId> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    fn trainable_in(&self, node: &LayerNode) -> usize {
        node.op
            .param_ids()
            .iter()
            .map(|&i| &self.params[i])
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(ParamSpec::numel)
            .sum()
    }

    pub fn count_parameters(&self) -> ParamCount {
        let per_node: Vec<(String, usize)> = self
            .nodes
            .iter()
            .filter(|n| !n.op.param_ids().is_empty())
            .map(|n| (n.name.clone(), self.trainable_in(n)))
            .collect();
        ParamCount {
            total: per_node.iter().map(|(_, v)| v).sum(),
            buffers: self
                .params
                .iter()
                .filter(|p| p.kind == ParamKind::RunningStat)
                .map(ParamSpec::numel)
                .sum(),
            per_node,
        }
    }

    /// Multiply-accumulates for one sample at the nominal input size.
    pub fn mac_count(&self) -> u64 {
        let mut macs = 0u64;
        for node in &self.nodes {
            let o = node.out;
            let out_px = (o.h * o.w) as u64;
            match node.op {
                Op::Conv2d { weight, .. } => {
                    let d = &self.params[weight].dims;
                    macs += out_px * (d[0] * d[1] * d[2] * d[3]) as u64;
                }
                Op::DepthwiseConv2d { weight, .. } => {
                    let d = &self.params[weight].dims;
                    macs += out_px * (d[0] * d[2] * d[3]) as u64;
                }
                Op::Dense { weight, .. } => macs += self.params[weight].numel() as u64,
                _ => {}
            }
        }
        macs
    }

    /// SHA-256 over the ordered (name, dims) registry; values do not enter.
    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint_of(self.params.iter().map(|p| (p.name.as_str(), p.dims.as_slice())))
    }

    /// Per-node output shapes for a batch of `n` at input extent (h, w).
    pub fn infer_shapes(&self, n: usize, h: usize, w: usize) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|i| shapes[i.0]).collect();
            let s = match &node.op {
                Op::Input => Shape::new(n, node.out.c, h, w),
                op => propagate(op, &ins, &self.params).map_err(|e| Error::Graph(format!("{}: {e}", node.name)))?,
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Human-readable table: node, kind, output shape, parameter count.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<44} {:<18} {:<16} {:>9}", "node", "kind", "output", "params");
        for node in &self.nodes {
            let p = self.trainable_in(node);
            let _ = writeln!(
                s,
                "{:<44} {:<18} {:<16} {:>9}",
                node.name,
                node.op.kind_name(),
                format!("{}x{}x{}", node.out.c, node.out.h, node.out.w),
                p
            );
        }
        let count = self.count_parameters();
        let _ = writeln!(s, "trainable parameters: {}", count.total);
        let _ = writeln!(s, "running statistics: {}", count.buffers);
        s
    }
}

pub fn fingerprint_of<'a>(entries: impl Iterator<Item = (&'a str, &'a [usize])>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, dims) in entries {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((dims.len() as u32).to_le_bytes());
        for &d in dims {
            h.update((d as u64).to_le_bytes());
        }
    }
    h.finalize().into()
}

fn propagate(op: &Op, ins: &[Shape], params: &[ParamSpec]) -> Result<Shape> {
    let x = ins[0];
    Ok(match *op {
        Op::Input => x,
        Op::Conv2d { weight, stride, padding, .. } => {
            let d = &params[weight].dims;
            if d[1] != x.c {
                return Err(Error::invalid("conv2d", format!("kernel expects {} channels, input {x}", d[1])));
            }
            let (oh, _) = output_extent(x.h, d[2], stride, padding);
            let (ow, _) = output_extent(x.w, d[3], stride, padding);
            Shape::new(x.n, d[0], oh, ow)
        }
        Op::DepthwiseConv2d { weight, stride, padding } => {
            let d = &params[weight].dims;
            if d[0] != x.c {
                return Err(Error::invalid("depthwise_conv2d", format!("{} filters, input {x}", d[0])));
            }
            let (oh, _) = output_extent(x.h, d[2], stride, padding);
            let (ow, _) = output_extent(x.w, d[3], stride, padding);
            Shape::new(x.n, x.c, oh, ow)
        }
        Op::BatchNorm { gamma, .. } => {
            if params[gamma].dims[0] != x.c {
                return Err(Error::invalid("batchnorm", format!("{} channels, input {x}", params[gamma].dims[0])));
            }
            x
        }
        Op::Relu | Op::Relu6 | Op::Sigmoid | Op::SoftmaxChannels => x,
        Op::Add => {
            if ins[1] != x {
                return Err(Error::Shape {
                    op: "elementwise_add",
                    lhs: x,
                    rhs: ins[1],
                });
            }
            x
        }
        Op::ConcatChannels => {
            let y = ins[1];
            if x.n != y.n || x.h != y.h || x.w != y.w {
                return Err(Error::Graph(format!("cannot concatenate {x} with {y}")));
            }
            Shape::new(x.n, x.c + y.c, x.h, x.w)
        }
        Op::Upsample2x => Shape::new(x.n, x.c, 2 * x.h, 2 * x.w),
        Op::GlobalAvgPool => Shape::new(x.n, x.c, 1, 1),
        Op::Dense { out_features, weight, .. } => {
            if x.h != 1 || x.w != 1 || params[weight].dims[1] != x.c {
                return Err(Error::invalid("dense", format!("input {x}")));
            }
            Shape::new(x.n, out_features, 1, 1)
        }
        Op::ChannelScale => {
            if ins[1] != Shape::new(x.n, x.c, 1, 1) {
                return Err(Error::Shape {
                    op: "channel_scale",
                    lhs: x,
                    rhs: ins[1],
                });
            }
            x
        }
    })
}

/// Appends nodes in topological order and registers their parameters.
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    params: Vec<ParamSpec>,
    param_index: HashMap<String, usize>,
    taps: Vec<(String, NodeId)>,
}

impl GraphBuilder {
    /// Starts a graph whose single input has the given per-sample extent.
    pub fn new(channels: usize, height: usize, width: usize) -> (Self, NodeId) {
        let b = GraphBuilder {
            nodes: vec![LayerNode {
                name: "input".into(),
                op: Op::Input,
                inputs: Vec::new(),
                out: FeatureShape {
                    c: channels,
                    h: height,
                    w: width,
                },
            }],
            params: Vec::new(),
            param_index: HashMap::new(),
            taps: vec![("input".into(), NodeId(0))],
        };
        (b, NodeId(0))
    }

    pub fn shape(&self, id: NodeId) -> FeatureShape {
        self.nodes[id.0].out
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    fn param(&mut self, node: NodeId, name: String, dims: Vec<usize>, kind: ParamKind, init: Init) -> Result<usize> {
        if self.param_index.contains_key(&name) {
            return Err(Error::Graph(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        self.param_index.insert(name.clone(), id);
        self.params.push(ParamSpec {
            name,
            dims,
            kind,
            init,
            node,
        });
        Ok(id)
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Graph(format!("duplicate node name {name}")));
        }
        let ins: Vec<Shape> = inputs.iter().map(|i| self.nodes[i.0].out.batched(1)).collect();
        let s = propagate(&op, &ins, &self.params)?;
        self.nodes.push(LayerNode {
            name: name.to_string(),
            op,
            inputs,
            out: FeatureShape { c: s.c, h: s.h, w: s.w },
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv(&mut self, name: &str, x: NodeId, out_channels: usize, kernel: usize, stride: usize, bias: bool) -> Result<NodeId> {
        let cin = self.shape(x).c;
        let node = NodeId(self.nodes.len());
        let weight = self.param(
            node,
            format!("{name}/kernel"),
            vec![out_channels, cin, kernel, kernel],
            ParamKind::Trainable,
            Init::HeUniform {
                fan_in: cin * kernel * kernel,
            },
        )?;
        let bias = if bias {
            Some(self.param(node, format!("{name}/bias"), vec![out_channels], ParamKind::Trainable, Init::Zeros)?)
        } else {
            None
        };
        self.push(
            name,
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding: Padding::Same,
            },
            vec![x],
        )
    }

    pub fn depthwise(&mut self, name: &str, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let c = self.shape(x).c;
        let node = NodeId(self.nodes.len());
        let weight = self.param(
            node,
            format!("{name}/depthwise_kernel"),
            vec![c, 1, kernel, kernel],
            ParamKind::Trainable,
            Init::HeUniform { fan_in: kernel * kernel },
        )?;
        self.push(
            name,
            Op::DepthwiseConv2d {
                weight,
                stride,
                padding: Padding::Same,
            },
            vec![x],
        )
    }

    pub fn batchnorm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.shape(x).c;
        let node = NodeId(self.nodes.len());
        let gamma = self.param(node, format!("{name}/gamma"), vec![c], ParamKind::Trainable, Init::Ones)?;
        let beta = self.param(node, format!("{name}/beta"), vec![c], ParamKind::Trainable, Init::Zeros)?;
        let mean = self.param(node, format!("{name}/moving_mean"), vec![c], ParamKind::RunningStat, Init::Zeros)?;
        let var = self.param(node, format!("{name}/moving_variance"), vec![c], ParamKind::RunningStat, Init::Ones)?;
        self.push(name, Op::BatchNorm { gamma, beta, mean, var }, vec![x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Relu, vec![x])
    }

    pub fn relu6(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Relu6, vec![x])
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Sigmoid, vec![x])
    }

    pub fn softmax(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::SoftmaxChannels, vec![x])
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(name, Op::Add, vec![a, b])
    }

    pub fn concat(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(name, Op::ConcatChannels, vec![a, b])
    }

    pub fn upsample2x(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Upsample2x, vec![x])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::GlobalAvgPool, vec![x])
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out_features: usize, bias: bool) -> Result<NodeId> {
        let cin = self.shape(x).c;
        let node = NodeId(self.nodes.len());
        let weight = self.param(
            node,
            format!("{name}/kernel"),
            vec![out_features, cin],
            ParamKind::Trainable,
            Init::HeUniform { fan_in: cin },
        )?;
        let bias = if bias {
            Some(self.param(node, format!("{name}/bias"), vec![out_features], ParamKind::Trainable, Init::Zeros)?)
        } else {
            None
        };
        self.push(
            name,
            Op::Dense {
                weight,
                bias,
                out_features,
            },
            vec![x],
        )
    }

    pub fn channel_scale(&mut self, name: &str, x: NodeId, gate: NodeId) -> Result<NodeId> {
        self.push(name, Op::ChannelScale, vec![x, gate])
    }

    /// Drops every node after `last`, along with the parameters and taps
    /// they own. Used to cut a backbone at a chosen stage.
    pub fn truncate(&mut self, last: NodeId) {
        self.nodes.truncate(last.0 + 1);
        let keep = self.params.iter().take_while(|p| p.node <= last).count();
        self.params.truncate(keep);
        self.param_index.retain(|_, &mut i| i < keep);
        self.taps.retain(|&(_, id)| id <= last);
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    /// Names a node so configs can refer to it.
    pub fn tap(&mut self, name: &str, node: NodeId) {
        self.taps.push((name.to_string(), node));
    }

    pub fn finish(self, output: NodeId) -> ModelGraph {
        ModelGraph {
            nodes: self.nodes,
            params: self.params,
            param_index: self.param_index,
            output,
            taps: self.taps,
        }
    }
}

/// Activations and normalization statistics recorded by a forward pass.
#[derive(Debug)]
pub struct GradientTape<T> {
    mode: Option<Mode>,
    values: Vec<Option<Tensor<T>>>,
    bn: Vec<Option<BatchNormCache<T>>>,
}

impl<T: Element> Default for GradientTape<T> {
    fn default() -> Self {
        GradientTape {
            mode: None,
            values: Vec::new(),
            bn: Vec::new(),
        }
    }
}

impl<T: Element> GradientTape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mode(&self) -> Option<Mode> {
        self.mode
    }

    pub fn is_recorded(&self) -> bool {
        self.mode.is_some()
    }

    pub fn value(&self, node: NodeId) -> Result<&Tensor<T>> {
        self.values
            .get(node.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("no recorded activation for node {}", node.0)))
    }

    fn bn_cache(&self, node: NodeId) -> Result<&BatchNormCache<T>> {
        self.bn
            .get(node.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("no batch statistics recorded for node {}", node.0)))
    }
}

fn bn_params<T: Element>(graph: &ModelGraph, store: &WeightStore<T>, op: &Op) -> Result<BatchNormParams<T>> {
    let Op::BatchNorm { gamma, beta, mean, var } = *op else {
        unreachable!("caller matched BatchNorm");
    };
    let get = |i: usize| store.values(&graph.params[i].name).map(<[T]>::to_vec);
    Ok(BatchNormParams {
        gamma: get(gamma)?,
        beta: get(beta)?,
        running_mean: get(mean)?,
        running_var: get(var)?,
        epsilon: T::from_f64(BN_EPSILON),
        momentum: T::from_f64(BN_MOMENTUM),
    })
}

/// Runs the graph. With a tape, every activation is kept for [`backward`];
/// without one, intermediate values are released after their last use.
pub fn forward<T: Element>(
    graph: &ModelGraph,
    store: &WeightStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    mut tape: Option<&mut GradientTape<T>>,
) -> Result<Tensor<T>> {
    let expect_c = graph.input_shape().c;
    if x.shape().c != expect_c || x.is_empty() {
        return Err(Error::Shape {
            op: "forward",
            lhs: graph.input_shape().batched(x.shape().n),
            rhs: x.shape(),
        });
    }
    // static shape check doubles as the divisibility check for skip joins
    graph
        .infer_shapes(x.shape().n, x.shape().h, x.shape().w)
        .map_err(|_| Error::Shape {
            op: "forward",
            lhs: graph.input_shape().batched(x.shape().n),
            rhs: x.shape(),
        })?;

    let n_nodes = graph.nodes.len();
    let mut last_use = vec![0usize; n_nodes];
    for (i, node) in graph.nodes.iter().enumerate() {
        for inp in &node.inputs {
            last_use[inp.0] = i;
        }
    }
    last_use[graph.output.0] = usize::MAX;

    let keep = tape.is_some();
    let mut values: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
    let mut bn: Vec<Option<BatchNormCache<T>>> = if keep { vec![None; n_nodes] } else { Vec::new() };

    for (i, node) in graph.nodes.iter().enumerate() {
        let input = |k: usize| -> &Tensor<T> { values[node.inputs[k].0].as_ref().expect("topological order") };
        let p = |id: usize| store.tensor(&graph.params[id].name);
        let out = match &node.op {
            Op::Input => x.clone(),
            Op::Conv2d { weight, bias, stride, padding } => {
                let k = p(*weight)?;
                let b = match bias {
                    Some(b) => Some(store.values(&graph.params[*b].name)?),
                    None => None,
                };
                layers::conv2d(input(0), k, b, *stride, *padding)?
            }
            Op::DepthwiseConv2d { weight, stride, padding } => {
                layers::depthwise_conv2d(input(0), p(*weight)?, *stride, *padding)?
            }
            op @ Op::BatchNorm { .. } => {
                let params = bn_params(graph, store, op)?;
                match mode {
                    Mode::Train => {
                        let (y, cache) = layers::batchnorm_train(input(0), &params.gamma, &params.beta, params.epsilon)?;
                        if keep {
                            bn[i] = Some(cache);
                        }
                        y
                    }
                    Mode::Infer => layers::batchnorm_infer(input(0), &params)?,
                }
            }
            Op::Relu => layers::relu(input(0)),
            Op::Relu6 => layers::relu6(input(0)),
            Op::Sigmoid => layers::sigmoid(input(0)),
            Op::SoftmaxChannels => layers::softmax_channels(input(0)),
            Op::Add => input(0).add(input(1))?,
            Op::ConcatChannels => input(0).concat_channels(input(1))?,
            Op::Upsample2x => layers::bilinear_upsample2x(input(0))?,
            Op::GlobalAvgPool => input(0).global_average_pool()?,
            Op::Dense { weight, bias, out_features } => {
                let b = match bias {
                    Some(b) => Some(store.values(&graph.params[*b].name)?),
                    None => None,
                };
                layers::dense(input(0), store.values(&graph.params[*weight].name)?, *out_features, b)?
            }
            Op::ChannelScale => layers::channel_scale(input(0), input(1))?,
        };
        values[i] = Some(out);
        if !keep {
            for inp in &node.inputs {
                if last_use[inp.0] == i {
                    values[inp.0] = None;
                }
            }
        }
    }

    let out = values[graph.output.0].clone().expect("output computed");
    if let Some(t) = tape.as_deref_mut() {
        t.mode = Some(mode);
        t.values = values;
        t.bn = bn;
    }
    Ok(out)
}

/// Folds the batch statistics of a recorded training forward into the
/// running mean/variance entries of `store`.
pub fn apply_running_stats<T: Element>(graph: &ModelGraph, store: &mut WeightStore<T>, tape: &GradientTape<T>) -> Result<()> {
    if tape.mode != Some(Mode::Train) {
        return Ok(());
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        if let op @ Op::BatchNorm { mean, var, .. } = &node.op {
            let cache = tape.bn_cache(NodeId(i))?;
            let mut params = bn_params(graph, store, op)?;
            update_running_stats(&mut params, cache);
            store.values_mut(&graph.params[*mean].name)?.copy_from_slice(&params.running_mean);
            store.values_mut(&graph.params[*var].name)?.copy_from_slice(&params.running_var);
        }
    }
    Ok(())
}

/// Gradients of one node w.r.t. its inputs (in input order) and parameters.
pub struct NodeGrads<T> {
    pub inputs: Vec<Tensor<T>>,
    pub params: Vec<(usize, Tensor<T>)>,
}

fn vec_tensor<T: Element>(dims: &[usize], v: Vec<T>) -> Result<Tensor<T>> {
    Ok(Tensor::from_parts(dims_to_shape(dims)?, v))
}

/// Reverse-mode step for a single node given the gradient of its output.
pub fn backward_node<T: Element>(
    graph: &ModelGraph,
    node_id: NodeId,
    store: &WeightStore<T>,
    tape: &GradientTape<T>,
    upstream: &Tensor<T>,
) -> Result<NodeGrads<T>> {
    let mode = tape.mode.ok_or_else(|| Error::State("backward called before forward".into()))?;
    let node = graph
        .nodes
        .get(node_id.0)
        .ok_or_else(|| Error::State(format!("node {} not in graph", node_id.0)))?;
    let out_val = tape.value(node_id)?;
    if out_val.shape() != upstream.shape() {
        return Err(Error::Shape {
            op: "backward",
            lhs: out_val.shape(),
            rhs: upstream.shape(),
        });
    }
    let input = |k: usize| tape.value(node.inputs[k]);
    let dims = |id: usize| graph.params[id].dims.as_slice();
    let g = match &node.op {
        Op::Input => NodeGrads {
            inputs: vec![],
            params: vec![],
        },
        Op::Conv2d { weight, bias, stride, padding } => {
            let gr = conv2d_backward(input(0)?, store.tensor(&graph.params[*weight].name)?, *stride, *padding, upstream)?;
            let mut params = vec![(*weight, gr.weight)];
            if let Some(b) = bias {
                params.push((*b, vec_tensor(dims(*b), gr.bias)?));
            }
            NodeGrads {
                inputs: vec![gr.input],
                params,
            }
        }
        Op::DepthwiseConv2d { weight, stride, padding } => {
            let gr = depthwise_conv2d_backward(input(0)?, store.tensor(&graph.params[*weight].name)?, *stride, *padding, upstream)?;
            NodeGrads {
                inputs: vec![gr.input],
                params: vec![(*weight, gr.weight)],
            }
        }
        op @ Op::BatchNorm { gamma, beta, .. } => {
            let params = bn_params(graph, store, op)?;
            let gr = match mode {
                Mode::Train => batchnorm_train_backward(tape.bn_cache(node_id)?, &params.gamma, upstream)?,
                Mode::Infer => batchnorm_infer_backward(input(0)?, &params, upstream)?,
            };
            NodeGrads {
                inputs: vec![gr.input],
                params: vec![
                    (*gamma, vec_tensor(dims(*gamma), gr.gamma)?),
                    (*beta, vec_tensor(dims(*beta), gr.beta)?),
                ],
            }
        }
        Op::Relu => NodeGrads {
            inputs: vec![relu_backward(input(0)?, upstream)?],
            params: vec![],
        },
        Op::Relu6 => NodeGrads {
            inputs: vec![relu6_backward(input(0)?, upstream)?],
            params: vec![],
        },
        Op::Sigmoid => NodeGrads {
            inputs: vec![sigmoid_backward(out_val, upstream)?],
            params: vec![],
        },
        Op::SoftmaxChannels => NodeGrads {
            inputs: vec![softmax_channels_backward(out_val, upstream)?],
            params: vec![],
        },
        Op::Add => NodeGrads {
            inputs: vec![upstream.clone(), upstream.clone()],
            params: vec![],
        },
        Op::ConcatChannels => {
            let ca = input(0)?.shape().c;
            let cb = input(1)?.shape().c;
            NodeGrads {
                inputs: vec![upstream.slice_channels(0, ca)?, upstream.slice_channels(ca, cb)?],
                params: vec![],
            }
        }
        Op::Upsample2x => NodeGrads {
            inputs: vec![bilinear_upsample2x_backward(input(0)?.shape(), upstream)?],
            params: vec![],
        },
        Op::GlobalAvgPool => NodeGrads {
            inputs: vec![global_average_pool_backward(input(0)?.shape(), upstream)?],
            params: vec![],
        },
        Op::Dense { weight, bias, .. } => {
            let gr = dense_backward(input(0)?, store.values(&graph.params[*weight].name)?, upstream)?;
            let mut params = vec![(*weight, vec_tensor(dims(*weight), gr.weight)?)];
            if let Some(b) = bias {
                params.push((*b, vec_tensor(dims(*b), gr.bias)?));
            }
            NodeGrads {
                inputs: vec![gr.input],
                params,
            }
        }
        Op::ChannelScale => {
            let (gx, gg) = channel_scale_backward(input(0)?, input(1)?, upstream)?;
            NodeGrads {
                inputs: vec![gx, gg],
                params: vec![],
            }
        }
    };
    Ok(g)
}

/// Parameter gradients aligned with `graph.params()` (running statistics and
/// parameters not reached stay `None`), plus the gradient w.r.t. the input.
pub struct Gradients<T> {
    pub params: Vec<Option<Tensor<T>>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, graph: &ModelGraph, name: &str) -> Option<&Tensor<T>> {
        graph.param_index.get(name).and_then(|&i| self.params[i].as_ref())
    }
}

/// Back-propagates `grad_output` (gradient of a scalar loss w.r.t. the
/// graph output) through the recorded tape.
pub fn backward<T: Element>(
    graph: &ModelGraph,
    store: &WeightStore<T>,
    tape: &GradientTape<T>,
    grad_output: &Tensor<T>,
) -> Result<Gradients<T>> {
    if !tape.is_recorded() {
        return Err(Error::State("backward called before forward".into()));
    }
    let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
    node_grads[graph.output.0] = Some(grad_output.clone());
    let mut params: Vec<Option<Tensor<T>>> = vec![None; graph.params.len()];
    for i in (0..graph.nodes.len()).rev() {
        let Some(up) = node_grads[i].take() else { continue };
        let node = &graph.nodes[i];
        if matches!(node.op, Op::Input) {
            node_grads[i] = Some(up);
            continue;
        }
        let g = backward_node(graph, NodeId(i), store, tape, &up)?;
        for (inp, gi) in node.inputs.iter().zip(g.inputs) {
            node_grads[inp.0] = Some(match node_grads[inp.0].take() {
                Some(acc) => accumulate(acc, &gi),
                None => gi,
            });
        }
        for (pid, gp) in g.params {
            params[pid] = Some(match params[pid].take() {
                Some(acc) => accumulate(acc, &gp),
                None => gp,
            });
        }
    }
    Ok(Gradients {
        params,
        input: node_grads[0].take(),
    })
}

fn accumulate<T: Element>(mut acc: Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + b;
    }
    acc
}
