//! Fully convolutional sketch-cleaning network: parameters, forward
//! evaluation and reverse-mode gradients.

mod checkpoint;
mod layers;
mod network;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use layers::{
    concat_skip, conv2d_direct, layer_backward, upconv, upsample_nearest, ConvKind, ConvLayer,
};
pub use network::{
    Activation, DecoderStage, EncoderStage, ForwardTrace, Gradients, NetConfig, Network, Node,
    OutputMode, SkipLink,
};
pub use tensor::FeatureMap;

use crate::error::Result;

pub fn build_scnet(cfg: &NetConfig, init_seed: u64) -> Result<Network> {
    Network::build(cfg, init_seed)
}

pub fn forward(net: &Network, input: &FeatureMap) -> Result<FeatureMap> {
    net.forward(input)
}

/// Parameter and input gradients of `sum(output_grad * forward(input))`.
pub fn backward(
    net: &Network,
    input: &FeatureMap,
    output_grad: &FeatureMap,
) -> Result<(Gradients, FeatureMap)> {
    let trace = net.forward_trace(input)?;
    net.backward(&trace, output_grad)
}

pub fn init_params(net: &mut Network, seed: u64) {
    net.init_params(seed);
}
