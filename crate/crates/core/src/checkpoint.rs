//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "PLPR" | u32 version | u32 record count
//! per record: u32 name_len | name | u8 dtype (0 = f64) | u8 rank | u64 dims... | data
//! u64 config_len | config as UTF-8 JSON
//! ```

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"PLPR";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub records: Vec<Record>,
    /// Config snapshot as written (JSON).
    pub config_json: String,
}

impl Checkpoint {
    pub fn from_params(ps: &ParamStore, cfg: &ExperimentConfig) -> Self {
        let records = ps
            .iter()
            .map(|p| Record { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.to_vec() })
            .collect();
        let config_json = serde_json::to_string(cfg).expect("configs serialize");
        Checkpoint { version: VERSION, records, config_json }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Checkpoint { offset: 0, msg: format!("config snapshot does not parse: {e}") })
    }

    /// Copy every record into the parameter of the same name. Names and
    /// shapes must match the store exactly.
    pub fn apply(&self, ps: &mut ParamStore) -> Result<()> {
        if self.records.len() != ps.len() {
            return Err(Error::Contract(format!("checkpoint holds {} tensors, model has {}", self.records.len(), ps.len())));
        }
        for r in &self.records {
            let id = ps.find(&r.name).ok_or_else(|| Error::Contract(format!("checkpoint tensor `{}` not in model", r.name)))?;
            if ps.get(id).shape() != r.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                    r.name,
                    r.shape,
                    ps.get(id).shape()
                )));
            }
            ps.set_data(id, r.data.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint { offset: 0, msg: "bad magic, expected \"PLPR\"".into() });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint { offset: at as u64, msg: format!("unsupported version {version}, expected {VERSION}") });
        }
        let count = r.u32("record count")?;
        let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint { offset: at as u64, msg: "tensor name is not UTF-8".into() })?;
            let at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint { offset: at as u64, msg: format!("unknown dtype code {dtype} for `{name}`") });
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let at = r.pos;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|n| n.checked_mul(8).is_some());
            let Some(numel) = numel else {
                return Err(Error::Checkpoint { offset: at as u64, msg: format!("shape {shape:?} of `{name}` overflows") });
            };
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            records.push(Record { name, shape, data });
        }
        let len = r.u64("config length")? as usize;
        let at = r.pos;
        let config_json = String::from_utf8(r.take(len, "config snapshot")?.to_vec())
            .map_err(|_| Error::Checkpoint { offset: at as u64, msg: "config snapshot is not UTF-8".into() })?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint { offset: r.pos as u64, msg: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Checkpoint { version, records, config_json })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ps: &ParamStore, cfg: &ExperimentConfig) -> Result<()> {
    fs::write(path, Checkpoint::from_params(ps, cfg).encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Owner;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::new(vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300], &[2, 2]).unwrap(), Owner::Head, true);
        ps.add("b", Tensor::scalar(7.0), Owner::Embed, false);
        Checkpoint::from_params(&ps, &ExperimentConfig::tiny())
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        for (a, b) in c.records.iter().zip(&back.records) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
        assert_eq!(back.config().unwrap(), ExperimentConfig::tiny());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().encode();
        match Checkpoint::decode(&bytes[..20]) {
            Err(Error::Checkpoint { offset, .. }) => assert!(offset <= 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn newer_version_rejected() {
        let mut bytes = sample().encode();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let msg = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version 2") && msg.contains("offset 4"), "{msg}");
    }
}
