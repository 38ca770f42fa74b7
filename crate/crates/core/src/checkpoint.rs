//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic `MLWC0001`; `u32` record count; records sorted by name, each a
//! `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dims and
//! the row-major `f32` values; then a `u32` byte length and a UTF-8
//! metadata block.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::composer::AttGenSet;
use crate::config::{parse_config, ConfigError, RunConfig};
use crate::heads::Level;
use crate::network::{classifier_name, Network};
use crate::tensor::Tensor;
use crate::weightgen::AttGenParams;

pub const MAGIC: &[u8; 8] = b"MLWC0001";

/// Prefix of the reserved tensor names holding generator parameters.
pub const ATTGEN_PREFIX: &str = "attgen.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("tensor `{name}`: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("{0} trailing bytes after the metadata block")]
    TrailingBytes(usize),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("stored configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which training stages produced the stored parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTag {
    /// End of stage 1 of a full run.
    One,
    /// End of stage 2.
    Two,
    /// A run that stops after stage 1 (no weight-centric fine-tuning).
    OneOnly,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::One => "1",
            StageTag::Two => "2",
            StageTag::OneOnly => "1-only",
        })
    }
}

impl FromStr for StageTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(StageTag::One),
            "2" => Ok(StageTag::Two),
            "1-only" => Ok(StageTag::OneOnly),
            _ => Err(format!("unknown stage `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub config_hash: String,
    pub stage: StageTag,
    pub epoch: usize,
    /// Resolved configuration text the parameters were trained under.
    pub config: String,
}

impl Metadata {
    pub fn encode(&self) -> String {
        format!(
            "config_hash = {}\nstage = {}\nepoch = {}\n\n{}",
            self.config_hash, self.stage, self.epoch, self.config
        )
    }

    fn decode(text: &str) -> Result<Self, CheckpointError> {
        let (head, config) = text
            .split_once("\n\n")
            .ok_or_else(|| CheckpointError::Metadata("missing blank line before the configuration".into()))?;
        let mut fields = BTreeMap::new();
        for line in head.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Metadata(format!("malformed line `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| CheckpointError::Metadata(format!("missing `{k}`")))
        };
        Ok(Metadata {
            config_hash: get("config_hash")?.to_string(),
            stage: get("stage")?.parse().map_err(CheckpointError::Metadata)?,
            epoch: get("epoch")?
                .parse()
                .map_err(|_| CheckpointError::Metadata("epoch is not an integer".into()))?,
            config: config.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: Metadata,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        attgen: Option<&AttGenSet>,
        config: &RunConfig,
        stage: StageTag,
        epoch: usize,
    ) -> Self {
        let mut tensors = net.to_tensors();
        if let Some(set) = attgen {
            tensors.extend(attgen_tensors(set));
        }
        Checkpoint {
            tensors,
            meta: Metadata {
                config_hash: config.hash(),
                stage,
                epoch,
                config: config.to_text(),
            },
        }
    }

    pub fn config(&self) -> Result<RunConfig, CheckpointError> {
        Ok(parse_config(&self.meta.config)?)
    }

    /// Rebuilds the network described by the stored configuration.
    pub fn network(&self) -> Result<Network, CheckpointError> {
        let cfg = self.config()?;
        let name = classifier_name(Level::High, "weight");
        let w = self
            .tensors
            .get(&name)
            .ok_or_else(|| CheckpointError::Metadata(format!("missing tensor `{name}`")))?;
        if w.rank() != 2 {
            return Err(CheckpointError::BadTensor { name, reason: "classifier weights must be rank 2".into() });
        }
        Network::from_tensors(&cfg.backbone, &cfg.heads, w.dim(1), &self.tensors).map_err(CheckpointError::Metadata)
    }

    /// Generator parameters stored under the reserved names, if any.
    pub fn attgen(&self) -> Result<Option<AttGenSet>, CheckpointError> {
        attgen_from_tensors(&self.tensors)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let bad = |reason: &str| CheckpointError::BadTensor { name: name.clone(), reason: reason.into() };
            let len = u16::try_from(name.len()).map_err(|_| bad("name longer than 65535 bytes"))?;
            let rank = u8::try_from(t.rank()).map_err(|_| bad("rank above 255"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad("dimension above u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let meta = self.meta.encode();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = r.u32("record count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("values"))?, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::BadTensor { name: name.clone(), reason: e.to_string() })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::DuplicateName(name));
            }
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| CheckpointError::Metadata("not UTF-8".into()))?;
        let meta = Metadata::decode(meta)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { tensors, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = ckpt.encode()?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::decode(&bytes)
}

fn attgen_scope_name(level: Option<Level>) -> String {
    match level {
        Some(l) => format!("{ATTGEN_PREFIX}{}", l.name()),
        None => format!("{ATTGEN_PREFIX}combined"),
    }
}

/// Generator parameters under `attgen.{mid,high,relation,combined}.<param>`.
pub fn attgen_tensors(set: &AttGenSet) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let mut put = |scope: String, p: &AttGenParams| {
        for (name, t) in p.named() {
            out.insert(format!("{scope}.{name}"), t.clone());
        }
    };
    match set {
        AttGenSet::PerBranch(ps) => {
            for (level, p) in Level::ALL.iter().zip(ps.iter()) {
                put(attgen_scope_name(Some(*level)), p);
            }
        }
        AttGenSet::Combined(p) => put(attgen_scope_name(None), p),
    }
    out
}

fn read_params(tensors: &BTreeMap<String, Tensor>, scope: &str) -> Result<Option<AttGenParams>, CheckpointError> {
    let prefix = format!("{scope}.");
    if !tensors.keys().any(|k| k.starts_with(&prefix)) {
        return Ok(None);
    }
    let mut p = AttGenParams {
        phi_avg: Tensor::scalar(0.0),
        phi_att: Tensor::scalar(0.0),
        phi_q: Tensor::scalar(0.0),
        keys: Tensor::scalar(0.0),
        sharpness: Tensor::scalar(0.0),
    };
    for (name, slot) in p.named_mut() {
        let full = format!("{prefix}{name}");
        *slot = tensors
            .get(&full)
            .cloned()
            .ok_or_else(|| CheckpointError::Metadata(format!("missing tensor `{full}`")))?;
    }
    Ok(Some(p))
}

pub fn attgen_from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Option<AttGenSet>, CheckpointError> {
    if let Some(p) = read_params(tensors, &attgen_scope_name(None))? {
        return Ok(Some(AttGenSet::Combined(p)));
    }
    let found = Level::ALL.map(|l| read_params(tensors, &attgen_scope_name(Some(l))));
    let [m, h, r] = found;
    match (m?, h?, r?) {
        (Some(m), Some(h), Some(r)) => Ok(Some(AttGenSet::PerBranch(Box::new([m, h, r])))),
        (None, None, None) => Ok(None),
        _ => Err(CheckpointError::Metadata("generator parameters present for only some levels".into())),
    }
}
