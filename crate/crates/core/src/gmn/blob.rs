//! Binary weight blob.
//!
//! ```text
//! magic      4 bytes  "SMGN"
//! version    u32 LE
//! header_len u32 LE
//! header     header_len bytes, JSON-encoded GmnConfig
//! n_tensors  u32 LE
//! per tensor: rows u32 LE, cols u32 LE, rows*cols f64 LE (row-major)
//! digest     32 bytes, SHA-256 of every preceding byte
//! ```
//!
//! Tensors appear layer by layer (encoder, message, update MLPs, then gate,
//! transform and readout), each layer as weight `in x out` then bias `1 x out`.

use sha2::{Digest, Sha256};

use super::{GmnConfig, GmnParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMGN";
pub const BLOB_VERSION: u32 = 1;

pub fn params_to_blob(params: &GmnParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&params.config).expect("config serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let linears = params.linears();
    out.extend_from_slice(&((linears.len() * 2) as u32).to_le_bytes());
    for l in linears {
        let shapes = [(l.w.nrows(), l.w.ncols()), (1, l.b.len())];
        for (shape, data) in shapes.iter().zip(l.slices()) {
            out.extend_from_slice(&(shape.0 as u32).to_le_bytes());
            out.extend_from_slice(&(shape.1 as u32).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn corrupt(reason: &str) -> Error {
    Error::Corruption {
        id: "model.bin".into(),
        reason: reason.into(),
    }
}

pub fn params_from_blob(bytes: &[u8]) -> Result<GmnParams> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(corrupt("blob too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("content hash mismatch"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BLOB_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let config: GmnConfig = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let mut params = GmnParams::init(&config)?;
    let n = r.u32()? as usize;
    let mut linears = params.linears_mut();
    if n != linears.len() * 2 {
        return Err(corrupt(
            "tensor count does not match the configured architecture",
        ));
    }
    for l in linears.iter_mut() {
        let expect = [(l.w.nrows(), l.w.ncols()), (1, l.b.len())];
        for (shape, dst) in expect.into_iter().zip(l.slices_mut()) {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != shape {
                return Err(corrupt("tensor shape does not match the configuration"));
            }
            let raw = r.take(rows * cols * 8)?;
            for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite weights"));
    }
    Ok(params)
}
