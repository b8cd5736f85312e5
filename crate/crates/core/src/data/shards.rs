//! Binary id shards: a magic header, the example count, then per example a
//! persona flag byte and two length-prefixed id lists, all little-endian.

use std::fs;
use std::path::Path;

use super::pairs::DialogExample;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLQYIDS1";

pub fn encode_shard(examples: &[DialogExample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    for e in examples {
        out.push(u8::from(e.persona));
        for side in [&e.source, &e.target] {
            out.extend_from_slice(&(side.len() as u32).to_le_bytes());
            for id in side {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("shard truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn ids(&mut self) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<DialogExample>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not an id shard".into()));
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let persona = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad persona flag {b}"))),
        };
        let source = r.ids()?;
        let target = r.ids()?;
        out.push(DialogExample {
            source,
            target,
            persona,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after shard".into()));
    }
    Ok(out)
}

pub fn write_shard(path: &Path, examples: &[DialogExample]) -> Result<()> {
    fs::write(path, encode_shard(examples))?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<DialogExample>> {
    decode_shard(&fs::read(path)?)
}
