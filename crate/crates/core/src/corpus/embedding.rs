//! "IDF1" layer-stack files.
//!
//! ```text
//! magic    b"IDF1"
//! version  u32
//! L, T, D  u32 each
//! payload  f32 × L·T·D, layer-major then frame-major
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::stack::LayerStack;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"IDF1";
pub const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 20;

pub fn encode_embedding(stack: &LayerStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * stack.data().len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    for e in [stack.layers(), stack.frames(), stack.dim()] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in stack.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Result<LayerStack> {
    let u32_at = |offset: usize, what: &str| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format {
                offset: bytes.len(),
                detail: format!("truncated header: {what} needs bytes {offset}..{}", offset + 4),
            })
    };
    match bytes.get(..4) {
        Some(m) if m == EMBEDDING_MAGIC => {}
        Some(m) => {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {m:?}, expected \"IDF1\""),
            })
        }
        None => {
            return Err(Error::Format {
                offset: bytes.len(),
                detail: "truncated header: missing magic".into(),
            })
        }
    }
    let version = u32_at(4, "version")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let layers = u32_at(8, "L")? as usize;
    let frames = u32_at(12, "T")? as usize;
    let dim = u32_at(16, "D")? as usize;
    if layers == 0 || frames == 0 || dim == 0 {
        return Err(Error::Format {
            offset: 8,
            detail: format!("zero extent in [{layers}, {frames}, {dim}]"),
        });
    }
    let n = layers * frames * dim;
    let expected = EMBEDDING_HEADER_LEN + 4 * n;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            detail: format!("truncated payload: [{layers}, {frames}, {dim}] needs {expected} bytes"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected,
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let data = bytes[EMBEDDING_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LayerStack::new(layers, frames, dim, data)
}

pub fn write_embedding(path: impl AsRef<Path>, stack: &LayerStack) -> Result<()> {
    let path = path.as_ref();
    if !stack.tensor().is_finite() {
        return Err(Error::Parameter(format!("{}: stack has non-finite values", path.display())));
    }
    std::fs::write(path, encode_embedding(stack)).map_err(|e| Error::io(path, e))
}

pub fn read_embedding(path: impl AsRef<Path>) -> Result<LayerStack> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes)
}
