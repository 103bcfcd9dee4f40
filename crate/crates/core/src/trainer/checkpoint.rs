//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "GRIN"  u32 version
//! u32 count, then `count` parameter entries
//! u32 count, then `count` optimizer entries
//! ```
//!
//! Each entry is `u32 name_len, name (UTF-8), u32 rank, rank × u64 dims,
//! f64 payload` with one payload value per element (one for rank 0).
//! Optimizer entries are the scalars `adam.lr`, `adam.beta1`, `adam.beta2`,
//! `adam.eps`, `adam.t`, then `adam.m.<param>` and `adam.v.<param>` for each
//! tracked parameter in order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::NamedTensor;

use super::adam::AdamState;

pub const MAGIC: &[u8; 4] = b"GRIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<NamedTensor>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn new(params: Vec<NamedTensor>, adam: AdamState) -> Self {
        Checkpoint { params, adam }
    }

    pub fn param(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_table(&mut out, &self.params);

        let a = &self.adam;
        let mut opt = vec![
            NamedTensor::scalar("adam.lr", a.lr),
            NamedTensor::scalar("adam.beta1", a.beta1),
            NamedTensor::scalar("adam.beta2", a.beta2),
            NamedTensor::scalar("adam.eps", a.eps),
            NamedTensor::scalar("adam.t", a.t as f64),
        ];
        for (m, v) in a.m.iter().zip(&a.v) {
            opt.push(NamedTensor::new(format!("adam.m.{}", m.name), m.dims.clone(), m.data.clone()));
            opt.push(NamedTensor::new(format!("adam.v.{}", v.name), v.dims.clone(), v.data.clone()));
        }
        write_table(&mut out, &opt);
        out
    }

    /// Parses a whole file image; nothing is returned unless every field is
    /// valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format("magic", format!("expected \"GRIN\", found {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let params = read_table(&mut r, "params")?;
        let opt = read_table(&mut r, "optimizer")?;
        if r.pos != bytes.len() {
            return Err(Error::format("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        let adam = adam_from_entries(opt)?;
        Ok(Checkpoint { params, adam })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn write_table(out: &mut Vec<u8>, entries: &[NamedTensor]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(field, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

fn read_table(r: &mut Reader<'_>, table: &str) -> Result<Vec<NamedTensor>> {
    let count = r.u32(&format!("{table}.count"))?;
    let mut out: Vec<NamedTensor> = Vec::new();
    for i in 0..count {
        let at = format!("{table}[{i}]");
        let len = r.u32(&format!("{at}.name_len"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("{at}.name"))?)
            .map_err(|e| Error::format(format!("{at}.name"), e.to_string()))?
            .to_string();
        if out.iter().any(|t| t.name == name) {
            return Err(Error::format(format!("{name}.name"), "duplicate entry"));
        }
        let rank = r.u32(&format!("{name}.rank"))? as usize;
        if rank > 8 {
            return Err(Error::format(format!("{name}.rank"), format!("rank {rank} out of range")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = r.u64(&format!("{name}.dims"))?;
            let d = usize::try_from(d).map_err(|_| Error::format(format!("{name}.dims"), "dimension overflows"))?;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| Error::format(format!("{name}.dims"), "element count overflows"))?;
            dims.push(d);
        }
        let payload_len = elems
            .checked_mul(8)
            .ok_or_else(|| Error::format(format!("{name}.dims"), "payload size overflows"))?;
        let raw = r.take(payload_len, &format!("{name}.payload"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedTensor::new(name, dims, data));
    }
    Ok(out)
}

fn adam_from_entries(entries: Vec<NamedTensor>) -> Result<AdamState> {
    let mut iter = entries.into_iter().peekable();
    let mut scalar = |name: &str| -> Result<f64> {
        match iter.next() {
            Some(t) if t.name == name && t.dims.is_empty() => Ok(t.data[0]),
            Some(t) => Err(Error::format(name, format!("expected rank-0 `{name}`, found `{}`", t.name))),
            None => Err(Error::format(name, "missing")),
        }
    };
    let lr = scalar("adam.lr")?;
    let beta1 = scalar("adam.beta1")?;
    let beta2 = scalar("adam.beta2")?;
    let eps = scalar("adam.eps")?;
    let t = scalar("adam.t")?;
    if !(t >= 0.0 && t.fract() == 0.0 && t <= (1u64 << 53) as f64) {
        return Err(Error::format("adam.t", format!("not a step count: {t}")));
    }
    let mut adam = AdamState {
        lr,
        beta1,
        beta2,
        eps,
        t: t as u64,
        m: Vec::new(),
        v: Vec::new(),
    };
    let rest: Vec<NamedTensor> = iter.collect();
    if rest.len() % 2 != 0 {
        return Err(Error::format("adam.moments", "unpaired moment entry"));
    }
    for pair in rest.chunks_exact(2) {
        let (m, v) = (&pair[0], &pair[1]);
        let name = m
            .name
            .strip_prefix("adam.m.")
            .ok_or_else(|| Error::format(m.name.clone(), "expected a first-moment entry"))?;
        if v.name.strip_prefix("adam.v.") != Some(name) {
            return Err(Error::format(v.name.clone(), format!("expected `adam.v.{name}`")));
        }
        if v.dims != m.dims {
            return Err(Error::format(v.name.clone(), "dims differ from first moment"));
        }
        adam.m.push(NamedTensor::new(name, m.dims.clone(), m.data.clone()));
        adam.v.push(NamedTensor::new(name, v.dims.clone(), v.data.clone()));
    }
    Ok(adam)
}
