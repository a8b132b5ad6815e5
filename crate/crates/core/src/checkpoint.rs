//! Binary checkpoints.
//!
//! Layout (little-endian unless noted):
//! `"CDCK"`, `u32` version, `u32` entry count, then per entry `u32` name
//! length, UTF-8 name, `u8` dtype tag (0 = f32, 1 = u32), `u32` rank and
//! `rank` `u32` extents; then every entry's payload in manifest order; then
//! the CRC32 of the payload bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"CDCK";
pub const VERSION: u32 = 1;

const STEP_ENTRY: &str = "adam.step";
const EPOCH_ENTRY: &str = "train.epoch";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Parameters, optimizer state and the number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: AdamState,
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    payload: Payload,
}

fn entries(ck: &Checkpoint) -> Vec<Entry> {
    let mut out: Vec<Entry> = ck
        .params
        .iter()
        .map(|(n, t)| Entry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().to_vec()),
        })
        .collect();
    out.push(Entry {
        name: STEP_ENTRY.into(),
        shape: vec![1],
        payload: Payload::U32(vec![ck.adam.step]),
    });
    out.push(Entry {
        name: EPOCH_ENTRY.into(),
        shape: vec![1],
        payload: Payload::U32(vec![ck.epoch]),
    });
    for (prefix, moments) in [(M_PREFIX, &ck.adam.m), (V_PREFIX, &ck.adam.v)] {
        for (name, t) in ck.params.iter() {
            let data = moments.get(name).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
            out.push(Entry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                payload: Payload::F32(data),
            });
        }
    }
    out
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let entries = entries(ck);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.payload {
            Payload::F32(_) => 0,
            Payload::U32(_) => 1,
        });
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let start = out.len();
    for e in &entries {
        match &e.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Integrity(format!(
                "checkpoint truncated at byte {} reading {what}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Integrity("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Integrity(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let tag = r.take(1, "dtype tag")?[0];
        if tag > 1 {
            return Err(Error::Integrity(format!("entry {name} has unknown dtype tag {tag}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        manifest.push((name, tag, shape));
    }
    let start = r.pos;
    let payload_len: usize = manifest.iter().map(|(_, _, s)| numel(s) * 4).sum();
    if bytes.len() != start + payload_len + 4 {
        return Err(Error::Integrity(format!(
            "checkpoint is {} bytes, manifest implies {}",
            bytes.len(),
            start + payload_len + 4
        )));
    }
    let payload = &bytes[start..start + payload_len];
    let stored = u32::from_le_bytes(bytes[start + payload_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }

    let mut params = ParamStore::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    let (mut step, mut epoch) = (None, None);
    let mut words = payload.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
    for (name, tag, shape) in manifest {
        let n = numel(&shape);
        let raw: Vec<[u8; 4]> = words.by_ref().take(n).collect();
        if tag == 1 {
            let vals: Vec<u32> = raw.into_iter().map(u32::from_le_bytes).collect();
            match name.as_str() {
                STEP_ENTRY => step = vals.first().copied(),
                EPOCH_ENTRY => epoch = vals.first().copied(),
                _ => return Err(Error::Integrity(format!("unexpected integer entry {name}"))),
            }
            continue;
        }
        let vals: Vec<f32> = raw.into_iter().map(f32::from_le_bytes).collect();
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            m.insert(p.to_string(), vals);
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            v.insert(p.to_string(), vals);
        } else {
            params
                .insert(name, Tensor::new(&shape, vals)?)
                .map_err(|e| Error::Integrity(e.to_string()))?;
        }
    }
    Ok(Checkpoint {
        params,
        adam: AdamState {
            step: step.ok_or_else(|| Error::Integrity("missing optimizer step".into()))?,
            m,
            v,
        },
        epoch: epoch.ok_or_else(|| Error::Integrity("missing epoch counter".into()))?,
    })
}

/// Path of the JSON model spec stored beside `path`.
pub fn spec_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the checkpoint and its spec sidecar.
pub fn save(path: &Path, ck: &Checkpoint, spec: &ModelSpec) -> Result<()> {
    write_atomic(&spec_path(path), spec.to_json()?.as_bytes())?;
    write_atomic(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and its spec sidecar, checking they agree.
pub fn load_with_spec(path: &Path) -> Result<(ModelSpec, Checkpoint)> {
    let ck = load(path)?;
    let text = fs::read_to_string(spec_path(path))
        .map_err(|e| Error::config(format!("cannot read model spec {}: {e}", spec_path(path).display())))?;
    let spec = ModelSpec::from_json(&text)?;
    spec.init_params(0)?.check_compatible(&ck.params)?;
    Ok((spec, ck))
}
