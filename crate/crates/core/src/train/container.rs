use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LGMS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

/// Position of one array inside the payload. Offsets are in bytes from the
/// start of the payload, which follows the metadata block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

/// Where a ChaCha8 stream stood when the file was written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// `u128` word position as a decimal string, since JSON numbers cannot hold it.
    pub word_pos: String,
}

/// The JSON block of a container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the file holds, e.g. `"checkpoint"` or `"target"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub rng: Option<RngState>,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape, data }
    }
}

/// A set of named `f64` arrays with JSON metadata.
///
/// Layout: `"LGMS"`, version `u32`, metadata length `u64`, the UTF-8 JSON
/// metadata, then every array as raw little-endian `f64` in manifest order.
/// Serialization is a pure function of the contents, so a load followed by a
/// save reproduces the file byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub rng: Option<RngState>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self { kind: kind.into(), config, step: 0, rng: None, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push(NamedArray::new(name, shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    }

    /// Array `name`, checked against the expected shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let a = self.get(name)?;
        if a.shape != shape {
            return Err(Error::Checkpoint(format!("array {name:?} has shape {:?}, expected {shape:?}", a.shape)));
        }
        Ok(&a.data)
    }

    fn meta(&self) -> Result<CheckpointMeta> {
        let mut offset = 0u64;
        let mut manifest = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array {:?} does not match its shape", a.name)));
            }
            let nbytes = 8 * a.data.len() as u64;
            manifest.push(ManifestEntry { name: a.name.clone(), shape: a.shape.clone(), dtype: "f64".into(), offset, nbytes });
            offset += nbytes;
        }
        Ok(CheckpointMeta { kind: self.kind.clone(), config: self.config.clone(), step: self.step, rng: self.rng.clone(), manifest })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta()?)?;
        let payload: usize = self.arrays.iter().map(|a| 8 * a.data.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for a in &self.arrays {
            for x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("not an LGMS container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = HEADER_LEN.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])?;
        let payload = &bytes[meta_end..];

        let mut expected = 0u64;
        let mut arrays = Vec::with_capacity(meta.manifest.len());
        for e in &meta.manifest {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("array {:?} has unsupported dtype {:?}", e.name, e.dtype)));
            }
            let count = e.shape.iter().product::<usize>() as u64;
            if e.offset != expected || e.nbytes != 8 * count {
                return Err(Error::Checkpoint(format!("manifest entry {:?} overlaps or leaves a gap", e.name)));
            }
            let end = e.offset.checked_add(e.nbytes).filter(|&x| x <= payload.len() as u64).ok_or_else(|| bad("truncated payload"))?;
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(NamedArray { name: e.name.clone(), shape: e.shape.clone(), data });
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(bad("payload size does not match the manifest"));
        }
        Ok(Self { kind: meta.kind, config: meta.config, step: meta.step, rng: meta.rng, arrays })
    }

    /// Writes through a temporary file and a rename, so an interrupted save
    /// never replaces a good file with a partial one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
