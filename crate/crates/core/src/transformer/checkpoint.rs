//! Binary checkpoint codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "GRODCKPT"
//! version  u32
//! scalar   u8       4 = f32, 8 = f64
//! shape    9 × u64  d̂₀, τ, depth, d̂, heads, m_h, m_V, r, outputs
//! tensors  u64      count
//! per tensor: rows u64, cols u64, rows·cols IEEE 754 values
//! ```

use std::io::{Read, Write};

use super::{Budget, ModelShape, TransformerModel};
use crate::error::{GrodError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRODCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(model: &TransformerModel<T>, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(T::TAG);
    let s = model.shape;
    let b = s.budget;
    for v in [s.d_hat0, s.tau, s.depth, b.d_hat, b.heads, b.m_h, b.m_v, b.r, s.outputs] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let tensors = model.tensors();
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (data, [rows, cols]) in tensors {
        buf.extend_from_slice(&(rows as u64).to_le_bytes());
        buf.extend_from_slice(&(cols as u64).to_le_bytes());
        for &v in data {
            v.put_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GrodError::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| GrodError::Checkpoint("size overflows usize".into()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<TransformerModel<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(GrodError::Checkpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    vb.copy_from_slice(c.take(4)?);
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(GrodError::Checkpoint(format!("unsupported version {version}")));
    }
    let tag = c.take(1)?[0];
    if tag != T::TAG {
        return Err(GrodError::Checkpoint(format!(
            "scalar tag {tag} does not match requested type ({})",
            T::TAG
        )));
    }
    let mut dims = [0usize; 9];
    for d in dims.iter_mut() {
        *d = c.u64()?;
    }
    let shape = ModelShape {
        d_hat0: dims[0],
        tau: dims[1],
        depth: dims[2],
        budget: Budget {
            d_hat: dims[3],
            heads: dims[4],
            m_h: dims[5],
            m_v: dims[6],
            r: dims[7],
        },
        outputs: dims[8],
    };
    let mut model = TransformerModel::<T>::zeros(shape)?;
    let expected: Vec<[usize; 2]> = model.tensors().iter().map(|(_, s)| *s).collect();
    let count = c.u64()?;
    if count != expected.len() {
        return Err(GrodError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for (slot, shape) in model.tensors_mut().into_iter().zip(expected) {
        let rows = c.u64()?;
        let cols = c.u64()?;
        if [rows, cols] != shape {
            return Err(GrodError::Checkpoint(format!(
                "tensor shape {rows}x{cols} does not match {}x{}",
                shape[0], shape[1]
            )));
        }
        let raw = c.take(rows * cols * T::BYTES)?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(T::BYTES)) {
            *dst = T::get_le(chunk);
        }
    }
    if c.pos != bytes.len() {
        return Err(GrodError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(model)
}
