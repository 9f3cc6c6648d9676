//! 3x3 convolution stages: down (stride 2), flat (stride 1) and up
//! (nearest-neighbour 2x upsample followed by a flat convolution), plus
//! skip concatenation. All use zero padding of 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::FeatureMap;
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Down,
    Flat,
    Up,
}

impl ConvKind {
    pub fn stride(self) -> usize {
        match self {
            ConvKind::Down => 2,
            ConvKind::Flat | ConvKind::Up => 1,
        }
    }

    /// Output spatial size for an input side of `n`.
    pub fn output_side(self, n: usize) -> usize {
        match self {
            ConvKind::Down => n.div_ceil(2),
            ConvKind::Flat => n,
            ConvKind::Up => 2 * n,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ConvKind::Down => 0,
            ConvKind::Flat => 1,
            ConvKind::Up => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ConvKind::Down),
            1 => Some(ConvKind::Flat),
            2 => Some(ConvKind::Up),
            _ => None,
        }
    }
}

/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kind: ConvKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * TAPS],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * TAPS
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * KERNEL + ky) * KERNEL + kx]
    }

    pub fn weight_mut(&mut self, o: usize, i: usize, ky: usize, kx: usize) -> &mut f64 {
        &mut self.weights[((o * self.in_channels + i) * KERNEL + ky) * KERNEL + kx]
    }

    fn check_input(&self, input: &FeatureMap) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::arg(format!(
                "layer expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        if input.height() == 0 || input.width() == 0 {
            return Err(Error::arg("empty feature map"));
        }
        Ok(())
    }
}

/// Range of output indices `o` whose tap `k` lands inside `[0, n_in)`
/// for input index `o * stride + k - 1`.
#[inline]
fn valid_range(k: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    // o * stride + k - 1 <= n_in - 1  =>  o <= (n_in - k) / stride
    let hi = if n_in + 1 > k {
        ((n_in - k) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Raw 3x3 cross-correlation with padding 1 and the given stride.
pub(crate) fn conv3x3(input: &FeatureMap, layer: &ConvLayer, stride: usize) -> FeatureMap {
    let (cin, h, w) = input.shape();
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let plane_out = ho * wo;
    let mut out = vec![0.0; layer.out_channels * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(o, dst)| {
            dst.fill(layer.bias[o]);
            for i in 0..cin {
                let src = input.plane(i);
                for ky in 0..KERNEL {
                    let (oy_lo, oy_hi) = valid_range(ky, stride, h, ho);
                    for kx in 0..KERNEL {
                        let wv = layer.weight(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, stride, w, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - 1;
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            let srow = &src[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let s = &srow[ox_lo + kx - 1..ox_hi + kx - 1];
                                for (d, v) in drow[ox_lo..ox_hi].iter_mut().zip(s) {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox] += wv * srow[ox * stride + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        });
    FeatureMap::from_parts_unchecked(layer.out_channels, ho, wo, out)
}

/// Gradients of [`conv3x3`] with respect to its input, weights and bias.
pub(crate) fn conv3x3_backward(
    input: &FeatureMap,
    layer: &ConvLayer,
    stride: usize,
    d_out: &FeatureMap,
) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let (cin, h, w) = input.shape();
    let (_, ho, wo) = d_out.shape();
    let cout = layer.out_channels;

    let d_bias: Vec<f64> = (0..cout).map(|o| d_out.plane(o).iter().sum()).collect();

    let mut d_weights = vec![0.0; layer.weights.len()];
    d_weights
        .par_chunks_mut(cin * TAPS)
        .enumerate()
        .for_each(|(o, dw)| {
            let g = d_out.plane(o);
            for i in 0..cin {
                let src = input.plane(i);
                for ky in 0..KERNEL {
                    let (oy_lo, oy_hi) = valid_range(ky, stride, h, ho);
                    for kx in 0..KERNEL {
                        let (ox_lo, ox_hi) = valid_range(kx, stride, w, wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - 1;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let srow = &src[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let s = &srow[ox_lo + kx - 1..ox_hi + kx - 1];
                                acc += grow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(s)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * srow[ox * stride + kx - 1];
                                }
                            }
                        }
                        dw[(i * KERNEL + ky) * KERNEL + kx] = acc;
                    }
                }
            }
        });

    let plane_in = h * w;
    let mut d_in = vec![0.0; cin * plane_in];
    d_in.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(i, dst)| {
            for o in 0..cout {
                let g = d_out.plane(o);
                for ky in 0..KERNEL {
                    let (oy_lo, oy_hi) = valid_range(ky, stride, h, ho);
                    for kx in 0..KERNEL {
                        let wv = layer.weight(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, stride, w, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - 1;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let drow = &mut dst[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let d = &mut drow[ox_lo + kx - 1..ox_hi + kx - 1];
                                for (dv, gv) in d.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox * stride + kx - 1] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    (
        FeatureMap::from_parts_unchecked(cin, h, w, d_in),
        d_weights,
        d_bias,
    )
}

/// Down- or flat-convolution. Up layers must go through [`upconv`].
pub fn conv2d_direct(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    if layer.kind == ConvKind::Up {
        return Err(Error::arg("conv2d_direct does not handle up-convolution layers"));
    }
    layer.check_input(input)?;
    Ok(conv3x3(input, layer, layer.kind.stride()))
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample_nearest(input: &FeatureMap) -> FeatureMap {
    let (c, h, w) = input.shape();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (x, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    FeatureMap::from_parts_unchecked(c, h2, w2, out)
}

/// Adjoint of [`upsample_nearest`]: sums each 2x2 block.
pub(crate) fn upsample_nearest_backward(d_up: &FeatureMap) -> FeatureMap {
    let (c, h2, w2) = d_up.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = d_up.plane(ch);
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    FeatureMap::from_parts_unchecked(c, h, w, out)
}

/// Nearest-neighbour 2x upsample followed by a flat 3x3 convolution.
pub fn upconv(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    if layer.kind != ConvKind::Up {
        return Err(Error::arg(format!(
            "upconv needs an up layer, got {:?}",
            layer.kind
        )));
    }
    layer.check_input(input)?;
    Ok(conv3x3(&upsample_nearest(input), layer, 1))
}

/// Gradients of [`conv2d_direct`] or [`upconv`] (by layer kind) with
/// respect to the input, weights and bias, given the output gradient.
pub fn layer_backward(
    input: &FeatureMap,
    layer: &ConvLayer,
    d_out: &FeatureMap,
) -> Result<(FeatureMap, Vec<f64>, Vec<f64>)> {
    layer.check_input(input)?;
    let n_out = |n| layer.kind.output_side(n);
    if d_out.shape() != (layer.out_channels, n_out(input.height()), n_out(input.width())) {
        return Err(Error::arg(format!(
            "output gradient shape {:?} does not match layer output",
            d_out.shape()
        )));
    }
    Ok(match layer.kind {
        ConvKind::Up => {
            let (d_up, d_w, d_b) = conv3x3_backward(&upsample_nearest(input), layer, 1, d_out);
            (upsample_nearest_backward(&d_up), d_w, d_b)
        }
        kind => conv3x3_backward(input, layer, kind.stride(), d_out),
    })
}

/// Channel-wise concatenation, decoder channels first.
pub fn concat_skip(decoder: &FeatureMap, encoder: &FeatureMap) -> Result<FeatureMap> {
    if (decoder.height(), decoder.width()) != (encoder.height(), encoder.width()) {
        return Err(Error::arg(format!(
            "skip concatenation needs equal spatial dims, got {:?} and {:?}",
            decoder.shape(),
            encoder.shape()
        )));
    }
    let mut data = Vec::with_capacity(decoder.data().len() + encoder.data().len());
    data.extend_from_slice(decoder.data());
    data.extend_from_slice(encoder.data());
    Ok(FeatureMap::from_parts_unchecked(
        decoder.channels() + encoder.channels(),
        decoder.height(),
        decoder.width(),
        data,
    ))
}
