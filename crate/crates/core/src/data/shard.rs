//! Binary shard format (all integers little-endian):
//!
//! ```text
//! header  = "SVPY" u32:version u32:K K×(u32:h u32:w) u32:V u32:C
//!           u64:count u64:base_seed u32:crc32(header bytes so far)
//! sample  = u32:class u16×Σh·w tokens (scale-major, row-major)
//!           u32:crc32(sample bytes so far)
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, ScaleSchedule, TokenMap, TokenPyramid};
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"SVPY";
pub const SHARD_VERSION: u32 = 1;

pub(crate) fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(SHARD_MAGIC);
    buf.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.schedule.scales() as u32).to_le_bytes());
    for &(h, w) in ds.schedule.grids() {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(ds.schedule.vocab() as u32).to_le_bytes());
    buf.extend_from_slice(&ds.classes.to_le_bytes());
    buf.extend_from_slice(&(ds.samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&ds.base_seed.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    for s in &ds.samples {
        let start = buf.len();
        buf.extend_from_slice(&s.class_label.to_le_bytes());
        for map in &s.maps {
            for &t in &map.tokens {
                buf.extend_from_slice(&t.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf[start..]);
        buf.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(buf)
}

pub fn write_shard(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Dataset, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != SHARD_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != SHARD_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let k = r.u32()? as usize;
    if k > 1024 {
        return Err(format!("implausible scale count {k}"));
    }
    let mut grids = Vec::with_capacity(k);
    for _ in 0..k {
        grids.push((r.u32()? as usize, r.u32()? as usize));
    }
    let vocab = r.u32()? as usize;
    let classes = r.u32()?;
    let count = r.u64()?;
    let base_seed = r.u64()?;
    let header_end = r.pos;
    let crc = r.u32()?;
    if crc != crc32fast::hash(&bytes[..header_end]) {
        return Err("header checksum mismatch".into());
    }
    let schedule = ScaleSchedule::new(grids, vocab).map_err(|e| e.to_string())?;
    if classes == 0 {
        return Err("zero classes".into());
    }

    let per_sample = 4 + 2 * schedule.total_tokens() + 4;
    let remaining = bytes.len() - r.pos;
    if (count as u128) * (per_sample as u128) != remaining as u128 {
        return Err(format!(
            "payload is {remaining} bytes, header promises {count} samples of {per_sample}"
        ));
    }

    let mut samples = Vec::with_capacity(count as usize);
    for i in 0..count {
        let start = r.pos;
        let class_label = r.u32()?;
        let mut maps = Vec::with_capacity(schedule.scales());
        for &(h, w) in schedule.grids() {
            let tokens = (0..h * w).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
            maps.push(TokenMap { h, w, tokens });
        }
        let end = r.pos;
        if r.u32()? != crc32fast::hash(&bytes[start..end]) {
            return Err(format!("sample {i} checksum mismatch"));
        }
        let sample = TokenPyramid { class_label, maps };
        sample
            .validate(&schedule, classes)
            .map_err(|e| format!("sample {i}: {e}"))?;
        samples.push(sample);
    }
    Ok(Dataset {
        schedule,
        classes,
        base_seed,
        samples,
    })
}
