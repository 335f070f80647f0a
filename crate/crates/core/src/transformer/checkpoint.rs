//! Binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`): magic `AMTCKPT\0`, version,
//! the model configuration (`d_model`, `heads`, `layers`, `ffn_width`,
//! `src_vocab`, `trg_vocab`, `max_length`, flags), tensor count, then per
//! tensor its name length, UTF-8 name, rank, extents and `f32` values.
//! Flags: bit 0 tied output projection, bit 1 scaled attention, bit 2
//! positional encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ParamSet, Transformer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

fn put(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

pub fn save_checkpoint(path: &Path, model: &Transformer<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, model).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_to(w: &mut impl Write, model: &Transformer<f32>) -> std::io::Result<()> {
    let c = model.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    put(w, CHECKPOINT_VERSION)?;
    let flags = u32::from(c.tie_weights) | u32::from(c.scale_attention) << 1 | u32::from(c.positional_encoding) << 2;
    let fields = [
        c.d_model,
        c.heads,
        c.layers,
        c.ffn_width,
        c.src_vocab,
        c.trg_vocab,
        c.max_length,
    ];
    for f in fields {
        let v = to_u32(f, "config value").map_err(std::io::Error::other)?;
        put(w, v)?;
    }
    put(w, flags)?;
    let params = model.params();
    put(w, params.len() as u32)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put(w, t.shape().len() as u32)?;
        for &e in t.shape() {
            let v = to_u32(e, "extent").map_err(std::io::Error::other)?;
            put(w, v)?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Transformer<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(BufReader::new(file))
}

fn read_from(inner: impl Read) -> Result<Transformer<f32>> {
    let mut r = Reader { inner };
    if r.bytes(8)?.as_slice() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 7];
    for f in fields.iter_mut() {
        *f = r.usize()?;
    }
    let flags = r.u32()?;
    if flags > 0b111 {
        return Err(Error::Checkpoint(format!("unknown flag bits {flags:#x}")));
    }
    let config = ModelConfig {
        d_model: fields[0],
        heads: fields[1],
        layers: fields[2],
        ffn_width: fields[3],
        src_vocab: fields[4],
        trg_vocab: fields[5],
        max_length: fields[6],
        tie_weights: flags & 1 != 0,
        scale_attention: flags & 2 != 0,
        positional_encoding: flags & 4 != 0,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
    let count = r.usize()?;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.usize()?;
        if len > MAX_NAME {
            return Err(Error::Checkpoint(format!("tensor name of {len} bytes")));
        }
        let name = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.usize()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = r.bytes(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        named.push((name, Tensor::new(shape, data)));
    }
    let mut rest = Vec::new();
    r.inner
        .read_to_end(&mut rest)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    let params = ParamSet::from_named(&config, named)?;
    Transformer::from_params(config, params)
}
