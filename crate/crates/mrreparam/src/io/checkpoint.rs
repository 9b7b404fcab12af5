//! Checkpoint archive: "MRPT" magic, format version, a metadata JSON blob,
//! then a named-tensor table. A CRC-32 of the tensor table is stored inside
//! the metadata so payload tampering is detectable without re-reading
//! reference weights.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BufferSet, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"MRPT";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on a single tensor's element count when loading, guarding
/// against nonsense dims in corrupt files.
const MAX_ELEMS: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "autoencoder" or "paramnet".
    pub kind: String,
    /// "d2p" / "p2p" for paramnet checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Model geometry, opaque to this module.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Global training step and epoch at save time.
    pub step: u64,
    pub epoch: u64,
    /// Per-parameter Adam step counts.
    pub param_steps: BTreeMap<String, u64>,
    /// CRC-32 over the tensor table bytes; filled in by `save_checkpoint`.
    #[serde(default)]
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: CheckpointMeta,
    /// Stored order is preserved so save(load(x)) is byte-identical.
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn encode_table(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::input("save_checkpoint", "too many tensors"))?;
    let mut out = Vec::new();
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::input("save_checkpoint", format!("name {name:?} too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::input("save_checkpoint", "rank exceeds u8"))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::input("save_checkpoint", format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn encode_checkpoint(meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    {
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::input(
                    "save_checkpoint",
                    format!("duplicate tensor name {name:?}"),
                ));
            }
        }
    }
    let table = encode_table(tensors)?;
    let mut meta = meta.clone();
    meta.crc32 = crc32fast::hash(&table);
    let json = serde_json::to_vec(&meta).map_err(|e| Error::input("save_checkpoint", e.to_string()))?;
    let json_len = u32::try_from(json.len())
        .map_err(|_| Error::input("save_checkpoint", "metadata too large"))?;
    let mut out = Vec::with_capacity(4 + 4 + 4 + json.len() + table.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&table);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(meta, tensors)?)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8], verify: bool) -> Result<Archive> {
    let mut r = Reader { path, bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let json_len = r.u32("metadata length")? as usize;
    let json = r.take(json_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("metadata JSON: {e}"),
    })?;

    let table_start = r.pos;
    if verify {
        let crc = crc32fast::hash(&bytes[table_start..]);
        if crc != meta.crc32 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: table_start as u64,
                detail: format!(
                    "tensor table CRC-32 {crc:#010x} does not match stored {:#010x}",
                    meta.crc32
                ),
            });
        }
    }

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut names = std::collections::BTreeSet::new();
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: format!("tensor {i} name is not UTF-8: {e}"),
            })?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("duplicate tensor name {name:?}"),
            });
        }
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u32("tensor dim")? as u64;
            numel = numel.saturating_mul(d);
            dims.push(d as usize);
        }
        if numel == 0 || numel > MAX_ELEMS {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: r.pos as u64,
                detail: format!("tensor {name:?} has implausible dims {dims:?}"),
            });
        }
        let payload = r.take(numel as usize * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: r.pos as u64,
            detail: format!("{} trailing bytes after tensor table", bytes.len() - r.pos),
        });
    }
    Ok(Archive { meta, tensors })
}

pub fn load_checkpoint(path: &Path, verify: bool) -> Result<Archive> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(path, &bytes, verify)
}

/// Flatten a model's parameters, optimizer moments, and buffers into the
/// archive tensor list. Order: per parameter value/.adam_m/.adam_v (archive
/// order = registration order), then buffers.
pub fn pack_model(params: &ParamSet, buffers: &BufferSet, with_optimizer: bool) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for p in params.iter() {
        out.push((p.name.clone(), p.value.clone()));
        if with_optimizer {
            out.push((format!("{}.adam_m", p.name), p.adam_m.clone()));
            out.push((format!("{}.adam_v", p.name), p.adam_v.clone()));
        }
    }
    for (name, t) in buffers.iter() {
        out.push((name.to_string(), t.clone()));
    }
    out
}

/// Per-parameter Adam step counts for [`CheckpointMeta::param_steps`].
pub fn collect_param_steps(params: &ParamSet) -> BTreeMap<String, u64> {
    params.iter().map(|p| (p.name.clone(), p.steps)).collect()
}

/// Restore parameters and buffers from an archive by name. Every model slot
/// must be present with a matching shape, and every archive tensor must be
/// consumed; leftovers mean the checkpoint belongs to a different geometry.
pub fn unpack_model(archive: &Archive, params: &mut ParamSet, buffers: &mut BufferSet) -> Result<()> {
    let mut used = std::collections::BTreeSet::new();
    let fetch = |name: &str, shape: &[usize], used: &mut std::collections::BTreeSet<String>| -> Result<Option<Tensor>> {
        match archive.tensor(name) {
            Some(t) if t.shape() == shape => {
                used.insert(name.to_string());
                Ok(Some(t.clone()))
            }
            Some(t) => Err(Error::shape(
                "load_checkpoint",
                format!("tensor {name:?} has shape {:?}, model expects {shape:?}", t.shape()),
            )),
            None => Ok(None),
        }
    };
    for p in params.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = fetch(&p.name, &shape, &mut used)?.ok_or_else(|| {
            Error::Format {
                path: std::path::PathBuf::new(),
                detail: format!("checkpoint is missing tensor {:?}", p.name),
            }
        })?;
        if let Some(m) = fetch(&format!("{}.adam_m", p.name), &shape, &mut used)? {
            p.adam_m = m;
        }
        if let Some(v) = fetch(&format!("{}.adam_v", p.name), &shape, &mut used)? {
            p.adam_v = v;
        }
        p.steps = archive.meta.param_steps.get(&p.name).copied().unwrap_or(0);
    }
    let buffer_names: Vec<String> = buffers.iter().map(|(n, _)| n.to_string()).collect();
    for name in buffer_names {
        let shape = buffers.by_name(&name).unwrap().shape().to_vec();
        let t = fetch(&name, &shape, &mut used)?.ok_or_else(|| Error::Format {
            path: std::path::PathBuf::new(),
            detail: format!("checkpoint is missing buffer {name:?}"),
        })?;
        *buffers.by_name_mut(&name).unwrap() = t;
    }
    for (name, _) in &archive.tensors {
        if !used.contains(name) {
            return Err(Error::Format {
                path: std::path::PathBuf::new(),
                detail: format!("checkpoint tensor {name:?} has no slot in this model"),
            });
        }
    }
    Ok(())
}
