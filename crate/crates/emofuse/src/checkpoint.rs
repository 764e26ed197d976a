//! Binary encoder checkpoints.
//!
//! Layout: magic `EMF1`; the config as six little-endian u32 values
//! (num_layers, hidden_dim, num_heads, ffn_dim, vocab_size, max_len)
//! followed by the dropout rate as a little-endian f64; every parameter
//! tensor in the traversal order of `EncoderParams::named_tensors` as
//! (u32 rank, u32 dims…, little-endian f64 data); finally a u32 count of
//! head tensors (0 or 2) with the head weight and bias in the same tensor
//! encoding. Floats round-trip bit-exactly.

use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EMF1";

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    push_u32(buf, t.shape.len() as u32);
    for &d in &t.shape {
        push_u32(buf, d as u32);
    }
    for &v in &t.data {
        push_f64(buf, v);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            tape_id: None,
        })
    }
}

/// Serializes an encoder (and optionally the head trained on top of it).
pub fn save_encoder(
    path: &Path,
    params: &EncoderParams,
    head: Option<&HeadParams>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let c = &params.config;
    for v in [
        c.num_layers,
        c.hidden_dim,
        c.num_heads,
        c.ffn_dim,
        c.vocab_size,
        c.max_len,
    ] {
        push_u32(&mut buf, v as u32);
    }
    push_f64(&mut buf, c.dropout_rate);
    for (_, t) in params.named_tensors() {
        push_tensor(&mut buf, t);
    }
    match head {
        Some(h) => {
            push_u32(&mut buf, 2);
            push_tensor(&mut buf, &h.weight);
            push_tensor(&mut buf, &h.bias);
        }
        None => push_u32(&mut buf, 0),
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_encoder`].
pub fn load_encoder(path: &Path) -> Result<(EncoderParams, Option<HeadParams>)> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an EMF1 file".into()));
    }
    let config = EncoderConfig {
        num_layers: cur.u32()? as usize,
        hidden_dim: cur.u32()? as usize,
        num_heads: cur.u32()? as usize,
        ffn_dim: cur.u32()? as usize,
        vocab_size: cur.u32()? as usize,
        max_len: cur.u32()? as usize,
        dropout_rate: cur.f64()?,
    };
    config.validate().map_err(|e| {
        Error::Checkpoint(format!("checkpoint carries an invalid config: {e}"))
    })?;

    // Reconstruct through a zero-initialized skeleton so the tensor count
    // and traversal order are exactly the writer's.
    let mut params = EncoderParams::init(&config, 0)?;
    for (name, t) in params.named_tensors_mut() {
        let loaded = cur.tensor()?;
        if loaded.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected shape {:?}, found {:?}",
                t.shape, loaded.shape
            )));
        }
        *t = loaded;
    }

    let head = match cur.u32()? {
        0 => None,
        2 => {
            let weight = cur.tensor()?;
            let bias = cur.tensor()?;
            if weight.shape.len() != 2 || bias.shape != [weight.shape[1]] {
                return Err(Error::Checkpoint("malformed head tensors".into()));
            }
            Some(HeadParams { weight, bias })
        }
        n => {
            return Err(Error::Checkpoint(format!(
                "unexpected head tensor count {n}"
            )))
        }
    };
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok((params, head))
}
