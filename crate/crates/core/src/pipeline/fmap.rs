//! `FMAP1` feature files.
//!
//! ```text
//! magic    b"FMAP1"
//! version  u16            currently 1
//! M        u32            number of maps
//! H, W, C  u32 x 3
//! blocks   u32 x M        encoder block index of each map
//! dtype    u8             0 = f32
//! payload  f32 x M*H*W*C  map-major, then row-major, channel fastest
//! ```
//!
//! All integers and floats are little-endian. Token sequences are stored
//! with `M = 1`, `H = 1`, `W = L`, `C = width` and block index 0.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{FeatureStack, TokenSequence};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"FMAP1";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u16,
    pub num_maps: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub block_indices: Vec<u32>,
    pub dtype: u8,
}

impl FeatureFileHeader {
    pub fn for_stack(stack: &FeatureStack) -> Result<Self> {
        let (h, w, c) = stack.dims();
        let dim = |v: usize, name: &str| {
            u32::try_from(v).map_err(|_| Error::Format(format!("{name} = {v} exceeds u32")))
        };
        Ok(Self {
            version: VERSION,
            num_maps: dim(stack.num_blocks(), "M")?,
            height: dim(h, "H")?,
            width: dim(w, "W")?,
            channels: dim(c, "C")?,
            block_indices: stack.block_indices().to_vec(),
            dtype: DTYPE_F32,
        })
    }

    pub fn encoded_len(&self) -> usize {
        MAGIC.len() + 2 + 4 * 4 + 4 * self.block_indices.len() + 1
    }

    /// Values per map, `H * W * C`.
    pub fn map_len(&self) -> Result<usize> {
        [self.height, self.width, self.channels]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Format("map size overflows".into()))
    }

    pub fn payload_bytes(&self) -> Result<usize> {
        self.map_len()?
            .checked_mul(self.num_maps as usize)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("payload size overflows".into()))
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for v in [self.num_maps, self.height, self.width, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for b in &self.block_indices {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.push(self.dtype);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Format(format!(
                "file truncated reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses and validates the header; returns it with the payload offset.
pub fn decode_header(bytes: &[u8]) -> Result<(FeatureFileHeader, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"FMAP1\"")));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let num_maps = cur.u32("M")?;
    let height = cur.u32("H")?;
    let width = cur.u32("W")?;
    let channels = cur.u32("C")?;
    if num_maps == 0 || height == 0 || width == 0 || channels == 0 {
        return Err(Error::Format(format!(
            "zero extent in header: M={num_maps} H={height} W={width} C={channels}"
        )));
    }
    let index_bytes = (num_maps as usize)
        .checked_mul(4)
        .ok_or_else(|| Error::Format("block index table overflows".into()))?;
    let table = cur.take(index_bytes, "block indices")?;
    let block_indices = table
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let dtype = cur.take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let header = FeatureFileHeader {
        version,
        num_maps,
        height,
        width,
        channels,
        block_indices,
        dtype,
    };
    Ok((header, cur.pos))
}

pub fn decode(bytes: &[u8]) -> Result<(FeatureFileHeader, FeatureStack)> {
    let (header, offset) = decode_header(bytes)?;
    let need = header.payload_bytes()?;
    let have = bytes.len() - offset;
    if have != need {
        return Err(Error::Format(format!(
            "payload is {have} bytes, header implies {need}"
        )));
    }
    let map_len = header.map_len()?;
    let shape = vec![
        header.height as usize,
        header.width as usize,
        header.channels as usize,
    ];
    let maps = bytes[offset..]
        .chunks_exact(4 * map_len)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::new(shape.clone(), data).map_err(Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = FeatureStack::new(header.block_indices.clone(), maps)?;
    Ok((header, stack))
}

pub fn encode(stack: &FeatureStack) -> Result<Vec<u8>> {
    let header = FeatureFileHeader::for_stack(stack)?;
    let mut out = Vec::with_capacity(header.encoded_len() + header.payload_bytes()?);
    header.encode_into(&mut out);
    for map in stack.maps() {
        out.extend_from_slice(&map.to_le_bytes());
    }
    Ok(out)
}

/// Wraps a token sequence as a one-map, one-row stack.
pub fn token_stack(tokens: &TokenSequence) -> Result<FeatureStack> {
    let map = tokens.tensor().clone().reshape(vec![1, tokens.len(), tokens.width()])?;
    FeatureStack::new(vec![0], vec![map])
}

pub fn encode_tokens(tokens: &TokenSequence) -> Result<Vec<u8>> {
    encode(&token_stack(tokens)?)
}

pub fn read_path(path: &Path) -> Result<FeatureStack> {
    let bytes = fs::read(path).map_err(|e| io_context(e, "reading", path))?;
    Ok(decode(&bytes)?.1)
}

pub fn write_path(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_context(e, "writing", path))
}

fn io_context(e: std::io::Error, verb: &str, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{verb} {}: {e}", path.display()),
    ))
}
