//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "CPTCKPT1"
//! format_version   u32
//! header_len       u32, then header_len bytes of UTF-8:
//!                  canonical config lines, a "[metadata]" line, key=value lines
//! tensor_count     u32
//! per tensor:      u32 name_len, name, u8 dtype (0 = f32), u8 ndim,
//!                  ndim x u64 dims, u64 offset, u64 nbytes
//! payload_len      u64, then the payload: row-major f32 data, tensors back to back
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{canonical_shapes, check_params, layer_of, Model, ModelConfig, Params, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CPTCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const METADATA_MARKER: &str = "[metadata]";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Encoder tensors plus, optionally, `head.*` tensors.
    pub tensors: Params<f32>,
    pub format_version: u32,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: &'static str,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, tensors: Params<f32>) -> Result<Self> {
        let c = Self {
            config,
            tensors,
            format_version: FORMAT_VERSION,
            metadata: BTreeMap::new(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut encoder = self.tensors.clone();
        encoder.split_prefix("head.");
        check_params(&self.config, &encoder)
    }

    /// Encoder tensors only.
    pub fn encoder_params(&self) -> Params<f32> {
        let mut p = self.tensors.clone();
        p.split_prefix("head.");
        p
    }

    pub fn head_params(&self) -> Params<f32> {
        self.tensors.clone().split_prefix("head.")
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.numel()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let nbytes = 4 * t.numel() as u64;
                let e = ManifestEntry {
                    name: name.clone(),
                    dtype: "f32",
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect()
    }

    /// Human-readable header and manifest.
    pub fn describe(&self) -> String {
        let mut s = format!("format_version={}\n", self.format_version);
        s.push_str(&self.config.to_canonical_text());
        for (k, v) in &self.metadata {
            s.push_str(&format!("meta.{k}={v}\n"));
        }
        s.push_str(&format!("parameters={}\n", self.num_parameters()));
        for e in self.manifest() {
            s.push_str(&format!(
                "{:<44} {} {:?} offset={} nbytes={}\n",
                e.name, e.dtype, e.shape, e.offset, e.nbytes
            ));
        }
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.config.to_canonical_text();
        header.push_str(METADATA_MARKER);
        header.push('\n');
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry `{k}` is not one line")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let manifest = self.manifest();
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        for e in &manifest {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.nbytes.to_le_bytes());
        }
        let payload: u64 = manifest.iter().map(|e| e.nbytes).sum();
        out.extend_from_slice(&payload.to_le_bytes());
        for (_, t) in self.tensors.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container. With `strict`, any non-finite value is an error.
    pub fn from_bytes(bytes: &[u8], strict: bool) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32("format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let header_len = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let (cfg_text, meta_text) = header
            .split_once(&format!("{METADATA_MARKER}\n"))
            .ok_or_else(|| Error::Checkpoint("header lacks metadata section".into()))?;
        let config = ModelConfig::from_canonical_text(cfg_text)?;
        let mut metadata = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }

        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let what = format!("manifest entry {i}");
            let name_len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| Error::Checkpoint(format!("{what}: name is not UTF-8")))?
                .to_string();
            let bad = |message: String| Error::CheckpointTensor {
                name: name.clone(),
                message,
            };
            let dtype = r.u8(&name)?;
            if dtype != DTYPE_F32 {
                return Err(bad(format!("unsupported dtype {dtype}")));
            }
            let ndim = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let offset = r.u64(&name)?;
            let nbytes = r.u64(&name)?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)).map(|n| n as u64) != Some(nbytes) {
                return Err(bad(format!("nbytes {nbytes} does not match shape {shape:?}")));
            }
            entries.push((name, shape, offset, nbytes));
        }
        let payload_len = r.u64("payload length")?;
        let mut expected = 0u64;
        for (name, _, offset, nbytes) in &entries {
            if *offset != expected {
                return Err(Error::CheckpointTensor {
                    name: name.clone(),
                    message: format!("offset {offset}, expected {expected}"),
                });
            }
            expected += nbytes;
        }
        if expected != payload_len {
            let name = entries.last().map(|e| e.0.clone()).unwrap_or_default();
            return Err(Error::CheckpointTensor {
                name,
                message: format!("manifest covers {expected} bytes, payload declares {payload_len}"),
            });
        }
        let payload = &bytes[r.pos..];
        if payload.len() as u64 != payload_len {
            let short = entries
                .iter()
                .find(|(_, _, o, n)| o + n > payload.len() as u64)
                .or(entries.last())
                .map(|e| e.0.clone())
                .unwrap_or_default();
            return Err(Error::CheckpointTensor {
                name: short,
                message: format!(
                    "payload has {} bytes, manifest needs {payload_len}",
                    payload.len()
                ),
            });
        }

        let mut tensors = Params::new();
        for (name, shape, offset, nbytes) in entries {
            let raw = &payload[offset as usize..(offset + nbytes) as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if strict && data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CheckpointTensor {
                    name,
                    message: "contains non-finite values".into(),
                });
            }
            if tensors.get(&name).is_some() {
                return Err(Error::CheckpointTensor {
                    name,
                    message: "duplicate tensor".into(),
                });
            }
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        let c = Checkpoint {
            config,
            tensors,
            format_version: version,
            metadata,
        };
        c.validate()?;
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("file truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint_with(path, false)
}

pub fn load_checkpoint_with(path: &Path, strict: bool) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, strict)
}

/// Keep the first `keep` layers; everything else outside the dropped
/// layers is copied unchanged.
pub fn truncate(ckpt: &Checkpoint, keep: usize) -> Result<Checkpoint> {
    let layers = ckpt.config.num_layers;
    if keep == 0 || keep > layers {
        return Err(Error::Config(format!(
            "keep_layers {keep} outside 1..={layers}"
        )));
    }
    let mut tensors = Params::new();
    for (name, t) in ckpt.tensors.iter() {
        if layer_of(name).map_or(true, |l| l < keep) {
            tensors.insert(name.clone(), t.clone());
        }
    }
    let config = ModelConfig {
        num_layers: keep,
        ..ckpt.config.clone()
    };
    let mut out = Checkpoint {
        config,
        tensors,
        format_version: ckpt.format_version,
        metadata: ckpt.metadata.clone(),
    };
    out.metadata.insert("truncated_from".into(), layers.to_string());
    out.validate()?;
    Ok(out)
}

impl<T: Real> Model<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Model::from_params(ckpt.config.clone(), ckpt.encoder_params().cast())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self.params.cast::<f32>();
        debug_assert_eq!(tensors.len(), canonical_shapes(&self.config).len());
        Checkpoint {
            config: self.config.clone(),
            tensors,
            format_version: FORMAT_VERSION,
            metadata: BTreeMap::new(),
        }
    }
}
