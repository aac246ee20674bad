//! `CAPS` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CAPS"  u16 version
//! u32 config length, config text (`key = value` lines)
//! u32 record count
//! per record: u32 name length, UTF-8 name, u32 rank, rank × u32 dims, f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::CapsuleLstm;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CAPS";
pub const FORMAT_VERSION: u16 = 1;

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: Vec<Record>,
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &CapsuleLstm<T>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            records: model
                .params
                .iter()
                .map(|p| Record {
                    name: p.name.clone(),
                    dims: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.acc() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&u32_of(cfg.len(), "config length")?.to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&u32_of(self.records.len(), "record count")?.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&u32_of(r.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&u32_of(r.dims.len(), "rank")?.to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&u32_of(d, "dim")?.to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a CAPS checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = r.string(cfg_len)?;
        let config = ModelConfig::parse(&cfg_text)?;
        let count = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}` is too large")))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(Record { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the stored model.
    pub fn into_model(self) -> Result<CapsuleLstm<f32>> {
        let config = self.config.clone();
        self.into_model_for(&config)
    }

    /// Loads the parameters into a fresh model of `expected` architecture,
    /// failing with a list of every differing dimension.
    pub fn into_model_for(self, expected: &ModelConfig) -> Result<CapsuleLstm<f32>> {
        let mut diffs = config_diffs(expected, &self.config);
        let mut model = CapsuleLstm::<f32>::new(expected, 0)?;
        let ids: Vec<_> = model.params.ids().collect();
        if diffs.is_empty() {
            for (id, rec) in ids.iter().zip(&self.records) {
                let (name, want) = (model.params.name(*id), model.params.get(*id).shape());
                if rec.name != name || rec.dims != want {
                    diffs.push(format!("{name}: expected {want:?}, found `{}` {:?}", rec.name, rec.dims));
                }
            }
            if self.records.len() != ids.len() {
                diffs.push(format!("{} parameter records, expected {}", self.records.len(), ids.len()));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Version { diffs });
        }
        for (id, rec) in ids.into_iter().zip(self.records) {
            let t = model.params.get_mut(id);
            let mut fresh = Tensor::new(&rec.dims, rec.data)?;
            fresh.requires_grad = true;
            *t = fresh;
        }
        Ok(model)
    }
}

/// Human-readable differences between two architectures.
pub fn config_diffs(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = expected.to_text();
    let b = found.to_text();
    a.lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| {
            let key = x.split('=').next().unwrap_or("").trim();
            let val = |s: &str| s.split_once('=').map(|p| p.1.trim().to_string()).unwrap_or_default();
            format!("{key}: expected {}, found {}", val(x), val(y))
        })
        .collect()
}

pub fn save_model<T: Element>(model: &CapsuleLstm<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<CapsuleLstm<f32>> {
    Checkpoint::load(path)?.into_model()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
