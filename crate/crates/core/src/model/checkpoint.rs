//! Binary checkpoint container.
//!
//! ```text
//! "SCN1"
//! u32 input_size, u32 base_width, u8 output_mode (0 double, 1 same)
//! u32 skip count, then per skip: u8 from (0 A, 1 B, 2 C), u8 to (0 H, 1 J)
//! u32 node count, then per node in graph order:
//!     u8 kind (0 down, 1 flat, 2 up), u32 in_channels, u32 out_channels,
//!     f32 weights [out][in][3][3], f32 bias [out]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::layers::ConvKind;
use super::network::{DecoderStage, EncoderStage, NetConfig, Network, OutputMode, SkipLink};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCN1";

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::with_capacity(16 + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, cfg.input_size);
    put_u32(&mut out, cfg.base_width);
    out.push(match cfg.output_mode {
        OutputMode::Double => 0,
        OutputMode::Same => 1,
    });
    put_u32(&mut out, cfg.skip_wiring.len());
    for link in &cfg.skip_wiring {
        out.push(match link.from {
            EncoderStage::A => 0,
            EncoderStage::B => 1,
            EncoderStage::C => 2,
        });
        out.push(match link.to {
            DecoderStage::H => 0,
            DecoderStage::J => 1,
        });
    }
    put_u32(&mut out, net.nodes().len());
    for node in net.nodes() {
        let l = &node.layer;
        out.push(l.kind.code());
        put_u32(&mut out, l.in_channels);
        put_u32(&mut out, l.out_channels);
        for &v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, dst: &mut [f64]) -> Result<()> {
        let bytes = self.take(n * 4)?;
        for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::Format("non-finite parameter in checkpoint".into()));
            }
            *d = f64::from(v);
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let input_size = r.u32()?;
    let base_width = r.u32()?;
    let output_mode = match r.u8()? {
        0 => OutputMode::Double,
        1 => OutputMode::Same,
        m => return Err(Error::Format(format!("unknown output mode {m}"))),
    };
    let n_skips = r.u32()?;
    let mut skip_wiring = Vec::with_capacity(n_skips.min(16));
    for _ in 0..n_skips {
        let from = match r.u8()? {
            0 => EncoderStage::A,
            1 => EncoderStage::B,
            2 => EncoderStage::C,
            s => return Err(Error::Format(format!("unknown skip source {s}"))),
        };
        let to = match r.u8()? {
            0 => DecoderStage::H,
            1 => DecoderStage::J,
            s => return Err(Error::Format(format!("unknown skip target {s}"))),
        };
        skip_wiring.push(SkipLink { from, to });
    }
    let cfg = NetConfig {
        input_size,
        base_width,
        output_mode,
        skip_wiring,
    };
    let mut net = Network::zeros(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    let n_nodes = r.u32()?;
    if n_nodes != net.nodes().len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_nodes} layers, config implies {}",
            net.nodes().len()
        )));
    }
    for node in net.nodes_mut() {
        let kind = ConvKind::from_code(r.u8()?)
            .ok_or_else(|| Error::Format("unknown layer kind".into()))?;
        let (cin, cout) = (r.u32()?, r.u32()?);
        let l = &mut node.layer;
        if (kind, cin, cout) != (l.kind, l.in_channels, l.out_channels) {
            return Err(Error::Format(format!(
                "layer {} is {kind:?} {cin}->{cout}, expected {:?} {}->{}",
                node.label, l.kind, l.in_channels, l.out_channels
            )));
        }
        let nw = l.weights.len();
        r.f32s(nw, &mut l.weights)?;
        r.f32s(cout, &mut l.bias)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
