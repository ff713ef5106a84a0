//! Flat binary network checkpoints.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic "SDGP" | version | layer_count
//! per layer:   tensor_count
//! per tensor:  rank | dims[rank] | f32 data, little-endian
//! ```
//!
//! A layer's tensors are its persistent state in a fixed order: weights then
//! bias for conv and linear, gamma/beta/running mean/running variance for
//! batchnorm, the concatenation of its body for residual blocks. Loading
//! checks every shape against the receiving network, so a checkpoint only
//! loads into a structurally identical model.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Network;

pub const MAGIC: [u8; 4] = *b"SDGP";
pub const VERSION: u32 = 1;

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for layer in net.layers() {
        let tensors = layer.state_tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into a structurally matching network, replacing its
/// parameters and batchnorm statistics.
pub fn load_into(net: &mut Network, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };

    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(r.format_err(0, format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.format_err(4, format!("unsupported version {version}")));
    }
    let layer_count = r.u32("layer count")? as usize;
    if layer_count != net.layers().len() {
        return Err(r.format_err(
            8,
            format!(
                "checkpoint has {layer_count} layers, network has {}",
                net.layers().len()
            ),
        ));
    }

    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        let mut tensors = layer.state_tensors_mut();
        let count = r.u32("tensor count")? as usize;
        if count != tensors.len() {
            return Err(r.format_err(
                r.pos as u64 - 4,
                format!(
                    "layer {li} has {count} tensors in checkpoint, {} in network",
                    tensors.len()
                ),
            ));
        }
        for (ti, tensor) in tensors.iter_mut().enumerate() {
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            if dims != tensor.shape() {
                return Err(r.format_err(
                    (r.pos - 4 * rank) as u64,
                    format!(
                        "layer {li} tensor {ti}: checkpoint shape {dims:?}, network shape {:?}",
                        tensor.shape()
                    ),
                ));
            }
            let start = r.pos;
            let raw = r.bytes(4 * tensor.len(), "tensor data")?;
            for (i, (dst, chunk)) in tensor
                .data_mut()
                .iter_mut()
                .zip(raw.chunks_exact(4))
                .enumerate()
            {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        offset: (start + 4 * i) as u64,
                        message: format!("layer {li} tensor {ti}: non-finite value {v}"),
                    });
                }
                *dst = v;
            }
        }
    }

    if r.pos != buf.len() {
        return Err(r.format_err(
            r.pos as u64,
            format!("{} trailing bytes after last tensor", buf.len() - r.pos),
        ));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn format_err(&self, offset: u64, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message,
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.format_err(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}
