//! Binary tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MPAN" | version: u32 | count: u32 | count × {
//!     name_len: u16 | name: UTF-8 | rank: u8 | extents: rank × u32 | data: numel × f32
//! }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPAN";
pub const VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor<f32>);

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Config("too many tensors for archive".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Config(format!("rank of {name} exceeds 255")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Config(format!("extent of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::parse(
                    self.pos,
                    format!(
                        "truncated {what}: need {n} bytes, {} remain",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic bytes, expected \"MPAN\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(at, "tensor name is not valid UTF-8"))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos;
            let d = r.u32("extent")? as usize;
            if d == 0 {
                return Err(Error::parse(at, format!("zero extent in tensor {name}")));
            }
            shape.push(d);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel =
            numel.ok_or_else(|| Error::parse(r.pos, format!("tensor {name} is too large")))?;
        let raw = r.take(numel.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_parts(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            r.pos,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(tensors)
}

pub fn save(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
