//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"BWCK" | u32 version | u32 count
//! count x ( u32 name_len | name (utf-8) | u8 dtype | u32 ndim | ndim x u64 dim | raw data )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, ParamSet, Scalar, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BWCK";
const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ParamSet<T>, mut w: W) -> Result<(), TensorError> {
    let mut buf = Vec::with_capacity(16 + params.num_elements() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint. Values stored in a different precision than `T`
/// are converted.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ParamSet<T>, TensorError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        if name_len > MAX_NAME {
            return Err(bad(format!("parameter name of {name_len} bytes")));
        }
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("parameter name is not utf-8"))?
            .to_owned();
        let code = c.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| bad(format!("unknown dtype code {code}")))?;
        let ndim = c.u32()? as usize;
        if ndim > MAX_RANK {
            return Err(bad(format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = usize::try_from(c.u64()?).map_err(|_| bad("dimension overflow"))?;
            len = len.checked_mul(d).ok_or_else(|| bad("dimension overflow"))?;
            shape.push(d);
        }
        let nbytes = len.checked_mul(dtype.size()).ok_or_else(|| bad("size overflow"))?;
        let raw = c.take(nbytes)?;
        // Same precision decodes directly so the round trip is bit-exact.
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => raw.chunks_exact(d.size()).map(T::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
        };
        params.push(name, Tensor::new(&shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(params)
}

/// Writes to `path` through a temporary file and rename, so a crash never
/// leaves a half-written checkpoint behind.
pub fn save_checkpoint<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<(), TensorError> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let f = File::create(&tmp)?;
        write_checkpoint(params, BufWriter::new(f))?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamSet<T>, TensorError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
