//! Binary clip (`.tks`) and codebook (`.tkcb`) files. All integers little-endian.
//!
//! Clip: `"TKSM"`, version `u8`, then `T`, `H`, `W`, `k` as `u32`, then `T*H*W` tokens as
//! `u16`, row-major per frame, frames in time order.
//!
//! Codebook: `"TKCB"`, version `u8`, then `k`, `dim` as `u32`, then `k*dim` `f32` values
//! row-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::grid::{Clip, TokenGrid, TokenId};

pub const CLIP_MAGIC: &[u8; 4] = b"TKSM";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"TKCB";
pub const FORMAT_VERSION: u8 = 1;

const CLIP_HEADER_LEN: usize = 4 + 1 + 4 * 4;
const CODEBOOK_HEADER_LEN: usize = 4 + 1 + 4 * 2;

fn write_bytes(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_clip(path: impl AsRef<Path>, clip: &Clip, k: usize) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = clip.shape().ok_or(Error::Empty("clip has no frames"))?;
    clip.validate_vocab(k)?;
    let as_u32 = |name: &'static str, v: usize| {
        u32::try_from(v).map_err(|_| Error::param(name, format!("{v} does not fit in u32")))
    };
    let header = [
        as_u32("timesteps", clip.len())?,
        as_u32("height", h)?,
        as_u32("width", w)?,
        as_u32("k", k)?,
    ];
    write_bytes(path, |out| {
        out.write_all(CLIP_MAGIC)?;
        out.write_all(&[FORMAT_VERSION])?;
        for v in header {
            out.write_all(&v.to_le_bytes())?;
        }
        for g in clip.grids() {
            for &t in g.tokens() {
                out.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn write_codebook(path: impl AsRef<Path>, codebook: &Codebook) -> Result<()> {
    let path = path.as_ref();
    write_bytes(path, |out| {
        out.write_all(CODEBOOK_MAGIC)?;
        out.write_all(&[FORMAT_VERSION])?;
        out.write_all(&(codebook.k() as u32).to_le_bytes())?;
        out.write_all(&(codebook.dim() as u32).to_le_bytes())?;
        for &x in codebook.embeddings() {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    })
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn header(&mut self, magic: &[u8; 4], header_len: usize) -> Result<()> {
        if self.bytes.len() < header_len {
            return Err(self.fail(
                self.bytes.len(),
                format!(
                    "truncated header: expected {header_len} bytes, found {}",
                    self.bytes.len()
                ),
            ));
        }
        if &self.bytes[..4] != magic {
            return Err(self.fail(0, "bad magic"));
        }
        if self.bytes[4] != FORMAT_VERSION {
            return Err(self.fail(4, format!("unsupported version {}", self.bytes[4])));
        }
        self.pos = 5;
        Ok(())
    }

    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn expect_body(&self, body_len: usize) -> Result<()> {
        let expected = self.pos + body_len;
        if self.bytes.len() < expected {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated: expected {expected} bytes, found {}", self.bytes.len()),
            ));
        }
        if self.bytes.len() > expected {
            return Err(self.fail(
                expected,
                format!("trailing data: expected {expected} bytes, found {}", self.bytes.len()),
            ));
        }
        Ok(())
    }
}

/// Reads a clip; returns it with the vocabulary size recorded in the header.
pub fn read_clip(path: impl AsRef<Path>, rate_hz: f64) -> Result<(Clip, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.header(CLIP_MAGIC, CLIP_HEADER_LEN)?;
    let (t, h, w, k) = (r.u32() as usize, r.u32() as usize, r.u32() as usize, r.u32() as usize);
    if h == 0 || w == 0 {
        return Err(r.fail(9, format!("invalid grid size {h}x{w}")));
    }
    let frame_len = h * w;
    r.expect_body(t * frame_len * 2)?;
    let mut grids = Vec::with_capacity(t);
    for frame in 0..t {
        let start = r.pos + frame * frame_len * 2;
        let tokens: Vec<TokenId> = bytes[start..start + frame_len * 2]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if let Some(i) = tokens.iter().position(|&tok| tok as usize >= k) {
            return Err(r.fail(start + 2 * i, format!("token {} out of range for k={k}", tokens[i])));
        }
        grids.push(TokenGrid::new(h, w, tokens)?);
    }
    Ok((Clip::new(grids, rate_hz)?, k))
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.header(CODEBOOK_MAGIC, CODEBOOK_HEADER_LEN)?;
    let (k, dim) = (r.u32() as usize, r.u32() as usize);
    r.expect_body(k * dim * 4)?;
    let values = bytes[r.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Codebook::new(k, dim, values)
}
