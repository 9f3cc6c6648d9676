//! The encoder-decoder graph.
//!
//! With base width `w` and input side `n` the stages are:
//!
//! | stage | op   | output             |
//! |-------|------|--------------------|
//! | A     | flat | w    x n   x n     |
//! | B     | flat | 2w   x n   x n     |
//! | C     | down | 4w   x n/2 x n/2   |
//! | D     | down | 8w   x n/4 x n/4   |
//! | E     | down | 16w  x n/8 x n/8   |
//! | F     | up   | 16w  x n/4 x n/4   |
//! | G     | up   | 16w  x n/2 x n/2   |
//! | H     | flat | 8w   x n/2 x n/2   |
//! | I     | up   | 8w   x n   x n     |
//! | J     | flat | 4w   x n   x n     |
//! | K     | up   | 4w   x 2n  x 2n    |  (double mode only)
//! | L     | flat | 2w   x 2n  x 2n    |
//! | M     | flat | w    x 2n  x 2n    |
//! | head  | flat | 1    x 2n  x 2n    |  logistic output
//!
//! Skip links concatenate an encoder activation onto the input of H or J.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::layers::{
    conv3x3, conv3x3_backward, upsample_nearest, upsample_nearest_backward, ConvKind, ConvLayer,
};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Decoder ends at twice the input resolution.
    Double,
    /// Decoder ends at the input resolution.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderStage {
    A,
    B,
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderStage {
    H,
    J,
}

/// Concatenate encoder activation `from` onto the input of decoder stage `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SkipLink {
    pub from: EncoderStage,
    pub to: DecoderStage,
}

impl SkipLink {
    pub const B_TO_J: SkipLink = SkipLink {
        from: EncoderStage::B,
        to: DecoderStage::J,
    };
    pub const C_TO_H: SkipLink = SkipLink {
        from: EncoderStage::C,
        to: DecoderStage::H,
    };
}

impl fmt::Display for SkipLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}->{:?}", self.from, self.to)
    }
}

impl FromStr for SkipLink {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad skip link {s:?}, expected e.g. \"B->J\""));
        let (a, b) = s.split_once("->").ok_or_else(bad)?;
        let from = match a.trim() {
            "A" => EncoderStage::A,
            "B" => EncoderStage::B,
            "C" => EncoderStage::C,
            _ => return Err(bad()),
        };
        let to = match b.trim() {
            "H" => DecoderStage::H,
            "J" => DecoderStage::J,
            _ => return Err(bad()),
        };
        Ok(SkipLink { from, to })
    }
}

impl Serialize for SkipLink {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SkipLink {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_size: usize,
    pub base_width: usize,
    pub output_mode: OutputMode,
    pub skip_wiring: Vec<SkipLink>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            base_width: 8,
            output_mode: OutputMode::Double,
            skip_wiring: vec![SkipLink::B_TO_J, SkipLink::C_TO_H],
        }
    }
}

impl NetConfig {
    pub fn new(input_size: usize, base_width: usize, output_mode: OutputMode) -> Self {
        Self {
            input_size,
            base_width,
            output_mode,
            ..Self::default()
        }
    }

    pub fn without_skips(mut self) -> Self {
        self.skip_wiring.clear();
        self
    }

    pub fn output_size(&self) -> usize {
        match self.output_mode {
            OutputMode::Double => 2 * self.input_size,
            OutputMode::Same => self.input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 8, got {}",
                self.input_size
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base width must be at least 1".into()));
        }
        for (i, link) in self.skip_wiring.iter().enumerate() {
            let ok = matches!(
                (link.from, link.to),
                (EncoderStage::A | EncoderStage::B, DecoderStage::J)
                    | (EncoderStage::C, DecoderStage::H)
            );
            if !ok {
                return Err(Error::Config(format!(
                    "skip {link} joins maps of different resolution"
                )));
            }
            if self.skip_wiring[..i].contains(link) {
                return Err(Error::Config(format!("skip {link} listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Logistic,
}

/// One node of the graph: a convolution whose input is the previous node's
/// output followed by the outputs of `skips` (earlier node indices).
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub label: &'static str,
    pub layer: ConvLayer,
    pub skips: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    nodes: Vec<Node>,
}

/// Per-node parameter gradients, parallel to [`Network::nodes`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.nodes.iter().map(|n| vec![0.0; n.layer.weights.len()]).collect(),
            bias: net.nodes.iter().map(|n| vec![0.0; n.layer.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let pairs = self
            .weights
            .iter_mut()
            .zip(&other.weights)
            .chain(self.bias.iter_mut().zip(&other.bias));
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias).flatten()
    }
}

/// Activations saved by [`Network::forward_trace`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Convolution input of each node (after concatenation and, for up
    /// nodes, after upsampling).
    conv_inputs: Vec<FeatureMap>,
    /// Post-activation output of each node.
    pub outputs: Vec<FeatureMap>,
}

impl ForwardTrace {
    pub fn output(&self) -> &FeatureMap {
        self.outputs.last().expect("network has nodes")
    }
}

struct NodePlan {
    label: &'static str,
    kind: ConvKind,
    out: usize,
    skips: Vec<usize>,
}

fn plan(cfg: &NetConfig) -> Vec<NodePlan> {
    let w = cfg.base_width;
    let node = |label, kind, out| NodePlan {
        label,
        kind,
        out,
        skips: Vec::new(),
    };
    let mut nodes = vec![
        node("A", ConvKind::Flat, w),
        node("B", ConvKind::Flat, 2 * w),
        node("C", ConvKind::Down, 4 * w),
        node("D", ConvKind::Down, 8 * w),
        node("E", ConvKind::Down, 16 * w),
        node("F", ConvKind::Up, 16 * w),
        node("G", ConvKind::Up, 16 * w),
        node("H", ConvKind::Flat, 8 * w),
        node("I", ConvKind::Up, 8 * w),
        node("J", ConvKind::Flat, 4 * w),
    ];
    if cfg.output_mode == OutputMode::Double {
        nodes.push(node("K", ConvKind::Up, 4 * w));
    }
    nodes.push(node("L", ConvKind::Flat, 2 * w));
    nodes.push(node("M", ConvKind::Flat, w));
    nodes.push(node("head", ConvKind::Flat, 1));

    let index = |label: &str| nodes.iter().position(|n| n.label == label).unwrap();
    let links: Vec<(usize, usize)> = cfg
        .skip_wiring
        .iter()
        .map(|l| {
            let from = match l.from {
                EncoderStage::A => "A",
                EncoderStage::B => "B",
                EncoderStage::C => "C",
            };
            let to = match l.to {
                DecoderStage::H => "H",
                DecoderStage::J => "J",
            };
            (index(from), index(to))
        })
        .collect();
    for (from, to) in links {
        nodes[to].skips.push(from);
    }
    nodes
}

impl Network {
    /// Builds the graph for `cfg` with He-initialized weights.
    pub fn build(cfg: &NetConfig, init_seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        net.init_params(init_seed);
        Ok(net)
    }

    /// Builds the graph with all parameters zero.
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let plans = plan(cfg);
        let mut nodes: Vec<Node> = Vec::with_capacity(plans.len());
        for (i, p) in plans.into_iter().enumerate() {
            let prev = if i == 0 { 1 } else { nodes[i - 1].layer.out_channels };
            let extra: usize = p.skips.iter().map(|&s| nodes[s].layer.out_channels).sum();
            nodes.push(Node {
                label: p.label,
                layer: ConvLayer::zeros(p.kind, prev + extra, p.out),
                skips: p.skips,
                activation: if p.label == "head" {
                    Activation::Logistic
                } else {
                    Activation::Relu
                },
            });
        }
        Ok(Self {
            config: cfg.clone(),
            nodes,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.layer.param_count()).sum()
    }

    /// He-style uniform init: weights in `±sqrt(6 / fan_in)` (variance
    /// `2 / fan_in`), zero biases. Values are rounded to `f32` so that a
    /// checkpoint reproduces them exactly.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for node in &mut self.nodes {
            let bound = (6.0 / node.layer.fan_in() as f64).sqrt();
            for w in &mut node.layer.weights {
                *w = f64::from(rng.random_range(-bound..bound) as f32);
            }
            node.layer.bias.fill(0.0);
        }
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_params(&mut self) {
        for node in &mut self.nodes {
            for v in node.layer.weights.iter_mut().chain(node.layer.bias.iter_mut()) {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Output shape of every node, by propagating shapes through the
    /// layer list without evaluating anything.
    pub fn shape_trace(&self) -> Vec<(&'static str, (usize, usize, usize))> {
        let mut side = self.config.input_size;
        self.nodes
            .iter()
            .map(|n| {
                side = n.layer.kind.output_side(side);
                (n.label, (n.layer.out_channels, side, side))
            })
            .collect()
    }

    fn check_input(&self, input: &FeatureMap) -> Result<()> {
        let n = self.config.input_size;
        if input.shape() != (1, n, n) {
            return Err(Error::arg(format!(
                "network expects a 1x{n}x{n} input, got {:?}",
                input.shape()
            )));
        }
        Ok(())
    }

    fn node_input(&self, i: usize, input: &FeatureMap, outputs: &[FeatureMap]) -> FeatureMap {
        let node = &self.nodes[i];
        let base = if i == 0 { input } else { &outputs[i - 1] };
        if node.skips.is_empty() {
            return base.clone();
        }
        let mut data = base.data().to_vec();
        let mut channels = base.channels();
        for &s in &node.skips {
            data.extend_from_slice(outputs[s].data());
            channels += outputs[s].channels();
        }
        FeatureMap::from_parts_unchecked(channels, base.height(), base.width(), data)
    }

    pub fn forward_trace(&self, input: &FeatureMap) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut conv_inputs = Vec::with_capacity(self.nodes.len());
        let mut outputs: Vec<FeatureMap> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let mut x = self.node_input(i, input, &outputs);
            if node.layer.kind == ConvKind::Up {
                x = upsample_nearest(&x);
            }
            let mut y = conv3x3(&x, &node.layer, node.layer.kind.stride());
            match node.activation {
                Activation::Relu => y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Logistic => y.data_mut().iter_mut().for_each(|v| *v = logistic(*v)),
            }
            conv_inputs.push(x);
            outputs.push(y);
        }
        Ok(ForwardTrace {
            conv_inputs,
            outputs,
        })
    }

    /// Probability map in ink polarity.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let mut trace = self.forward_trace(input)?;
        Ok(trace.outputs.pop().expect("network has nodes"))
    }

    /// Back-propagates `output_grad` (gradient of a scalar with respect to
    /// the output probabilities) through a recorded forward pass.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_grad: &FeatureMap,
    ) -> Result<(Gradients, FeatureMap)> {
        if output_grad.shape() != trace.output().shape() {
            return Err(Error::arg(format!(
                "output gradient shape {:?} does not match output {:?}",
                output_grad.shape(),
                trace.output().shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads = Gradients::zeros_like(self);
        let mut d_outputs: Vec<Option<FeatureMap>> = vec![None; n];
        d_outputs[n - 1] = Some(output_grad.clone());
        let mut d_input = None;

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(mut d) = d_outputs[i].take() else {
                continue;
            };
            let y = &trace.outputs[i];
            match node.activation {
                Activation::Relu => d
                    .data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(g, &v)| {
                        if v <= 0.0 {
                            *g = 0.0
                        }
                    }),
                Activation::Logistic => d
                    .data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(g, &p)| *g *= p * (1.0 - p)),
            }
            let (mut d_x, d_w, d_b) =
                conv3x3_backward(&trace.conv_inputs[i], &node.layer, node.layer.kind.stride(), &d);
            grads.weights[i] = d_w;
            grads.bias[i] = d_b;
            if node.layer.kind == ConvKind::Up {
                d_x = upsample_nearest_backward(&d_x);
            }

            // split the concatenated gradient back onto its sources
            let plane = d_x.plane_len();
            let base_channels = if i == 0 { 1 } else { trace.outputs[i - 1].channels() };
            let data = d_x.into_data();
            let (ih, iw) = if i == 0 {
                (self.config.input_size, self.config.input_size)
            } else {
                (trace.outputs[i - 1].height(), trace.outputs[i - 1].width())
            };
            let base = FeatureMap::from_parts_unchecked(
                base_channels,
                ih,
                iw,
                data[..base_channels * plane].to_vec(),
            );
            let mut offset = base_channels * plane;
            for &s in &node.skips {
                let c = trace.outputs[s].channels();
                let part = &data[offset..offset + c * plane];
                offset += c * plane;
                accumulate(&mut d_outputs[s], part, trace.outputs[s].shape());
            }
            if i == 0 {
                d_input = Some(base);
            } else {
                accumulate(&mut d_outputs[i - 1], base.data(), base.shape());
            }
        }
        let d_input = d_input.unwrap_or_else(|| {
            let s = self.config.input_size;
            FeatureMap::zeros(1, s, s)
        });
        Ok((grads, d_input))
    }
}

fn accumulate(slot: &mut Option<FeatureMap>, part: &[f64], shape: (usize, usize, usize)) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(part)
            .for_each(|(a, b)| *a += b),
        None => {
            *slot = Some(FeatureMap::from_parts_unchecked(
                shape.0,
                shape.1,
                shape.2,
                part.to_vec(),
            ))
        }
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
