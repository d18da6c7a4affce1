//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic     4 bytes  "PMCK"
//! version   u32      1
//! n_widths  u32
//! widths    u32 x n_widths
//! per layer j, in order:
//!   mu       f64 x (widths[j] + 1) * widths[j + 1]   row-major, bias row last
//!   log_var  f64 x same count
//! ```
//!
//! Floats are stored as raw bit patterns, so a save/load round trip is exact.

use std::io::{Read, Write};

use super::{Arch, GaussianLayerParams, NetError, StochasticNet};
use crate::ndcore::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(net: &StochasticNet, mut out: impl Write) -> Result<(), NetError> {
    let mut buf = Vec::with_capacity(16 + 16 * net.n_params());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let widths = net.arch().widths();
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for &w in widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for layer in net.layers() {
        for t in [&layer.mu, &layer.log_var] {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NetError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, NetError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, NetError> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<StochasticNet, NetError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let n_widths = cur.u32("width count")? as usize;
    if !(2..=64).contains(&n_widths) {
        return Err(NetError::Checkpoint(format!("implausible width count {n_widths}")));
    }
    let widths = (0..n_widths)
        .map(|_| cur.u32("widths").map(|w| w as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let arch = Arch::new(widths)?;
    let mut layers = Vec::with_capacity(arch.n_layers());
    for j in 0..arch.n_layers() {
        let shape = arch.layer_shape(j);
        let count = shape[0] * shape[1];
        let mu = Tensor::new(shape.to_vec(), cur.f64s(count, "mu")?)?;
        let log_var = Tensor::new(shape.to_vec(), cur.f64s(count, "log_var")?)?;
        layers.push(GaussianLayerParams { mu, log_var });
    }
    if cur.pos != bytes.len() {
        return Err(NetError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    StochasticNet::new(arch, layers)
}
