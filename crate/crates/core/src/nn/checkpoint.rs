//! `OWMCKPT1` network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"OWMCKPT1"
//! u64 descriptor length, descriptor bytes (canonical TOML of the NetworkSpec)
//! per parameter tensor, in layer order (weight then bias):
//!     u32 rank, rank × u64 dims, product(dims) × f64
//! ```
//!
//! An experiment snapshot may append further tagged sections (see
//! `owm::encode_snapshot`); the network reader stops at the first 4-byte tag.

use std::path::Path;

use super::network::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OWMCKPT1";

/// Upper bound on tensor rank accepted by the decoder. Section tags such as
/// `PROJ` decode to ranks far above this.
const MAX_RANK: u32 = 8;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn encode_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn at(bytes: &'a [u8], pos: usize) -> Self {
        Reader { bytes, pos }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn tensor(&mut self) -> Result<Tensor> {
        let start = self.pos as u64;
        let rank = self.u32("tensor rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(start, format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = self.u64("tensor dim")?;
            if d == 0 || d > (1 << 32) {
                return Err(Error::format(self.pos as u64 - 8, format!("implausible dim {d}")));
            }
            shape.push(d as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        let raw = self.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(start, e.to_string()))
    }
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let desc = net.spec().canonical_text();
    put_u64(&mut out, desc.len() as u64);
    out.extend_from_slice(desc.as_bytes());
    let layers = net
        .extractor()
        .iter()
        .chain(std::iter::once(net.classifier()))
        .chain(std::iter::once(net.proxy_head()));
    for layer in layers {
        if let (Some(w), Some(b)) = (layer.weight(), layer.bias()) {
            encode_tensor(&mut out, w);
            encode_tensor(&mut out, b);
        }
    }
    out
}

/// Decodes a network from the start of `bytes`; returns it with the offset
/// of the first byte after the parameter tensors.
pub fn decode_network(bytes: &[u8]) -> Result<(Network, usize)> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected OWMCKPT1"));
    }
    let len = r.u64("descriptor length")?;
    let desc_at = r.pos() as u64;
    let desc = r.take(usize::try_from(len).unwrap_or(usize::MAX), "descriptor")?;
    let desc = std::str::from_utf8(desc).map_err(|_| Error::format(desc_at, "descriptor is not UTF-8"))?;
    let spec: NetworkSpec =
        toml::from_str(desc).map_err(|e| Error::format(desc_at, format!("bad descriptor: {e}")))?;
    let mut net = Network::from_spec(&spec).map_err(|e| Error::format(desc_at, e.to_string()))?;

    let mut params = Vec::with_capacity(net.num_params());
    let expected: Vec<Vec<usize>> = net
        .extractor()
        .iter()
        .chain(std::iter::once(net.classifier()))
        .chain(std::iter::once(net.proxy_head()))
        .filter_map(|l| Some([l.weight()?.shape().to_vec(), l.bias()?.shape().to_vec()]))
        .flatten()
        .collect();
    for shape in &expected {
        let at = r.pos() as u64;
        let t = r.tensor()?;
        if t.shape() != shape.as_slice() {
            return Err(Error::format(
                at,
                format!("tensor shape {:?} does not match architecture {shape:?}", t.shape()),
            ));
        }
        params.extend_from_slice(t.data());
    }
    net.set_flat_params(&params)?;
    Ok((net, r.pos()))
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode_network(net)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written by [`save_network`]. Trailing bytes must form
/// tagged sections; anything else is a format error.
pub fn load_network(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (net, end) = decode_network(&bytes)?;
    let rest = &bytes[end..];
    if !rest.is_empty() && !rest.starts_with(b"PROJ") {
        return Err(Error::format(end as u64, "unexpected trailing bytes after parameters"));
    }
    Ok(net)
}
