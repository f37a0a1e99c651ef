//! Binary checkpoints: a `SEMI` magic, a format version, a JSON header with
//! the config hash and seeds, named little-endian tensors and a trailing
//! SHA-256 digest.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterSet, AdapterTarget, LoraAdapter};
use crate::error::{Result, SemiError};
use crate::hypernet::{HypernetConfig, HypernetParams};
use crate::numerics::{DenseMatrix, Params};
use crate::projector::ProjectorParams;
use crate::synth::{DecoderConfig, FrozenDecoder};

pub const MAGIC: &[u8; 4] = b"SEMI";
pub const FORMAT_VERSION: u16 = 1;

/// Storage width of tensor values. `F64` round-trips training state
/// bit-exactly; `F32` halves the file for distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F64),
            t => Err(SemiError::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    created_by: String,
    config_hash: String,
    seeds: Vec<u64>,
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Shape information needed to rebuild the object around its tensors.
    pub meta: Value,
    pub tensors: Params,
    pub precision: Precision,
}

/// Objects that can be split into tensors plus a JSON description.
pub trait Persist: Sized {
    const KIND: &'static str;
    fn to_parts(&self) -> Result<(Value, Params)>;
    fn from_parts(meta: &Value, tensors: Params) -> Result<Self>;
}

fn json<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| SemiError::Format(e.to_string()))
}

fn field<T: for<'de> Deserialize<'de>>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| SemiError::Format(format!("checkpoint metadata lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| SemiError::Format(format!("{key}: {e}")))
}

impl Checkpoint {
    pub fn new<T: Persist>(object: &T, config_hash: &str, seeds: &[u64], precision: Precision) -> Result<Self> {
        let (meta, tensors) = object.to_parts()?;
        Ok(Self {
            kind: T::KIND.to_string(),
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            meta,
            tensors,
            precision,
        })
    }

    pub fn restore<T: Persist>(&self) -> Result<T> {
        if self.kind != T::KIND {
            return Err(SemiError::Format(format!("checkpoint holds {:?}, expected {:?}", self.kind, T::KIND)));
        }
        T::from_parts(&self.meta, self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            created_by: concat!("semi-core ", env!("CARGO_PKG_VERSION")).to_string(),
            config_hash: self.config_hash.clone(),
            seeds: self.seeds.clone(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| SemiError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for (name, m) in self.tensors.iter() {
            let name = name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(SemiError::Format("tensor name too long".into()));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(self.precision.tag());
            out.extend_from_slice(&len_u32(m.rows())?.to_le_bytes());
            out.extend_from_slice(&len_u32(m.cols())?.to_le_bytes());
            for &v in m.data() {
                match self.precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 32 || &bytes[..4] != MAGIC {
            return Err(SemiError::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(SemiError::Format("checkpoint digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take_array()?);
        if version != FORMAT_VERSION {
            return Err(SemiError::Format(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(r.take_array()?) as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| SemiError::Format(e.to_string()))?;
        let count = u32::from_le_bytes(r.take_array()?) as usize;
        let mut tensors = Params::new();
        let mut precision = None;
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take_array()?) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| SemiError::Format(e.to_string()))?
                .to_string();
            let p = Precision::from_tag(r.take(1)?[0])?;
            if precision.is_some_and(|q| q != p) {
                return Err(SemiError::Format("mixed tensor precisions".into()));
            }
            precision = Some(p);
            let rows = u32::from_le_bytes(r.take_array()?) as usize;
            let cols = u32::from_le_bytes(r.take_array()?) as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| SemiError::Format("tensor size overflows".into()))?;
            let data: Vec<f64> = match p {
                Precision::F64 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Precision::F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            if tensors.contains(&name) {
                return Err(SemiError::Format(format!("duplicate tensor {name}")));
            }
            tensors.insert(name, DenseMatrix::from_vec(rows, cols, data)?);
        }
        if r.pos != body.len() {
            return Err(SemiError::Format("trailing bytes after tensors".into()));
        }
        Ok(Self {
            kind: header.kind,
            config_hash: header.config_hash,
            seeds: header.seeds,
            meta: header.meta,
            tensors,
            precision: precision.unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| SemiError::Format(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| SemiError::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| SemiError::Config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Persist for ProjectorParams {
    const KIND: &'static str = "projector";

    fn to_parts(&self) -> Result<(Value, Params)> {
        let meta = serde_json::json!({
            "d_in": self.d_in,
            "d_hid": self.d_hid,
            "prefix_slots": self.prefix_slots,
            "d_out": self.d_out,
            "dropout": self.dropout,
        });
        Ok((meta, self.params.clone()))
    }

    fn from_parts(meta: &Value, tensors: Params) -> Result<Self> {
        let p = ProjectorParams {
            params: tensors,
            d_in: field(meta, "d_in")?,
            d_hid: field(meta, "d_hid")?,
            prefix_slots: field(meta, "prefix_slots")?,
            d_out: field(meta, "d_out")?,
            dropout: field(meta, "dropout")?,
        };
        let expect = [
            ("w1", (p.d_hid, p.d_in)),
            ("b1", (1, p.d_hid)),
            ("w2", (p.prefix_slots * p.d_out, p.d_hid)),
            ("b2", (1, p.prefix_slots * p.d_out)),
        ];
        for (name, shape) in expect {
            if p.params.get(name)?.shape() != shape {
                return Err(SemiError::Format(format!("projector tensor {name} has the wrong shape")));
            }
        }
        Ok(p)
    }
}

impl Persist for HypernetParams {
    const KIND: &'static str = "hypernet";

    fn to_parts(&self) -> Result<(Value, Params)> {
        let meta = serde_json::json!({
            "config": json(&self.config)?,
            "d_in": self.d_in,
            "d_hid": self.d_hid,
            "d_out": self.d_out,
        });
        Ok((meta, self.params.clone()))
    }

    fn from_parts(meta: &Value, tensors: Params) -> Result<Self> {
        let config: HypernetConfig = field(meta, "config")?;
        let (d_in, d_hid, d_out) = (field(meta, "d_in")?, field(meta, "d_hid")?, field(meta, "d_out")?);
        let reference = HypernetParams::init(&config, d_in, d_hid, d_out, 0)?;
        let same_layout = reference.params.len() == tensors.len()
            && reference
                .params
                .iter()
                .all(|(k, v)| tensors.get(k).map(|t| t.shape() == v.shape()).unwrap_or(false));
        if !same_layout {
            return Err(SemiError::Format("hypernet tensors do not match the stored config".into()));
        }
        Ok(HypernetParams {
            params: tensors,
            config,
            d_in,
            d_hid,
            d_out,
        })
    }
}

impl Persist for FrozenDecoder {
    const KIND: &'static str = "decoder";

    fn to_parts(&self) -> Result<(Value, Params)> {
        let meta = serde_json::json!({
            "config": json(&self.config)?,
            "vocab": self.vocab,
            "frozen": self.frozen,
        });
        let mut tensors = self.params.prefixed("params");
        tensors.insert("ideal_map", self.ideal_map.clone());
        Ok((meta, tensors))
    }

    fn from_parts(meta: &Value, tensors: Params) -> Result<Self> {
        let config: DecoderConfig = field(meta, "config")?;
        Ok(FrozenDecoder {
            config,
            vocab: field(meta, "vocab")?,
            params: tensors.strip_prefix("params"),
            ideal_map: tensors.get("ideal_map")?.clone(),
            frozen: field(meta, "frozen")?,
        })
    }
}

impl Persist for AdapterSet {
    const KIND: &'static str = "adapters";

    fn to_parts(&self) -> Result<(Value, Params)> {
        let describe = |a: &LoraAdapter| serde_json::json!({ "alpha": a.alpha, "target": a.target });
        let meta = serde_json::json!({
            "layer1": self.adapters.iter().map(describe).collect::<Vec<_>>(),
            "layer2": self.layer2.iter().map(describe).collect::<Vec<_>>(),
            "provenance": self.provenance,
        });
        let mut tensors = Params::new();
        for (group, list) in [("layer1", &self.adapters), ("layer2", &self.layer2)] {
            for (i, a) in list.iter().enumerate() {
                tensors.insert(format!("{group}.{i:04}.a"), a.a.clone());
                tensors.insert(format!("{group}.{i:04}.b"), a.b.clone());
            }
        }
        Ok((meta, tensors))
    }

    fn from_parts(meta: &Value, tensors: Params) -> Result<Self> {
        #[derive(Deserialize)]
        struct Desc {
            alpha: f64,
            target: AdapterTarget,
        }
        let mut set = AdapterSet::default();
        let rebuild = |group: &str| -> Result<Vec<LoraAdapter>> {
            let descs: Vec<Desc> = field(meta, group)?;
            descs
                .into_iter()
                .enumerate()
                .map(|(i, d)| {
                    let a = tensors.get(&format!("{group}.{i:04}.a"))?.clone();
                    let b = tensors.get(&format!("{group}.{i:04}.b"))?.clone();
                    LoraAdapter::new(a, b, d.alpha, d.target)
                })
                .collect()
        };
        set.adapters = rebuild("layer1")?;
        set.layer2 = rebuild("layer2")?;
        set.provenance = field(meta, "provenance")?;
        if set.provenance.len() != set.adapters.len() {
            return Err(SemiError::Format("adapter provenance does not match the adapter count".into()));
        }
        Ok(set)
    }
}
