//! Checkpoint format (little-endian):
//!
//! ```text
//! "SVCK" u32:version u32:D u32:width u32:heads u32:C
//! u32:K K×(u32:h u32:w) u32:V
//! f64 × parameter count, tensors in declaration order
//! u32:crc32(everything above)
//! ```

use std::fs;
use std::path::Path;

use super::{init_params, ModelConfig, ModelParams};
use crate::data::ScaleSchedule;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn encode(params: &ModelParams) -> Vec<u8> {
    let cfg = &params.config;
    let mut buf = Vec::with_capacity(64 + 8 * params.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        cfg.depth as u32,
        cfg.width as u32,
        cfg.heads as u32,
        cfg.classes as u32,
        cfg.scales() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &(h, w) in cfg.schedule.grids() {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.vocab() as u32).to_le_bytes());
    for t in params.tensors() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<ModelParams, String> {
    if bytes.len() < 8 {
        return Err("file too short".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    if crc32fast::hash(body) != stored {
        return Err("checksum mismatch".into());
    }
    let depth = r.u32()? as usize;
    let width = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let k = r.u32()? as usize;
    if k > 1 << 16 {
        return Err(format!("implausible scale count {k}"));
    }
    let grids = (0..k)
        .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
        .collect::<Result<Vec<_>, String>>()?;
    let vocab = r.u32()? as usize;
    let schedule = ScaleSchedule::new(grids, vocab).map_err(|e| e.to_string())?;
    let config = ModelConfig {
        depth,
        width,
        heads,
        classes,
        schedule,
    };
    config.validate_shape().map_err(|e| e.to_string())?;
    if depth == 0 {
        return Err("zero layers".into());
    }
    // Shapes come from a same-config template; only the values are read.
    let mut template = config.clone();
    template.depth = depth.max(2);
    let mut params = init_params(&template, 0).map_err(|e| e.to_string())?;
    params.layers.truncate(depth);
    params.config = config;
    let expected = params.parameter_count();
    if body.len() - r.pos != 8 * expected {
        return Err(format!(
            "payload holds {} bytes, config needs {}",
            body.len() - r.pos,
            8 * expected
        ));
    }
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}
