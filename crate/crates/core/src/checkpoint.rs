//! Portable binary checkpoints.
//!
//! Layout: the 8-byte magic `IRLTGCK1`, a little-endian `u64` header length,
//! a UTF-8 JSON header `{version, kind, dims, arrays}` with arrays in sorted
//! name order, then every array's row-major little-endian `f64` payload in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{Mat, ParamStore};
use crate::oracle::OracleModel;
use crate::policy::{GeneratorDims, GeneratorParams};
use crate::reward::{RewardDims, RewardParams};

pub const MAGIC: &[u8; 8] = b"IRLTGCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("expected a {expected} checkpoint, found {found}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("bad header: {0}")]
    Header(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "bad_magic",
            CheckpointError::Truncated { .. } => "truncated",
            CheckpointError::VersionMismatch { .. } => "version_mismatch",
            CheckpointError::ShapeMismatch(_) => "shape_mismatch",
            CheckpointError::LengthMismatch { .. } => "length_mismatch",
            CheckpointError::KindMismatch { .. } => "kind_mismatch",
            CheckpointError::Header(_) => "bad_header",
            CheckpointError::Io { .. } => "io",
        }
    }
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Generator,
    Reward,
    Oracle,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Generator => "generator",
            ModelKind::Reward => "reward",
            ModelKind::Oracle => "oracle",
        })
    }
}

/// Sizes and scalar settings needed to rebuild a model from its arrays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDims {
    pub v_total: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_mlp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: ModelKind,
    dims: CheckpointDims,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub dims: CheckpointDims,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, dims: CheckpointDims, params: ParamStore) -> Self {
        Self { kind, dims, params }
    }

    pub fn from_generator(g: &GeneratorParams) -> Self {
        let d = g.dims();
        Self::new(
            ModelKind::Generator,
            CheckpointDims { v_total: d.v_total, d_emb: d.d_emb, d_hid: d.d_hid, d_mlp: None, keep_prob: None, seed: None },
            g.store().clone(),
        )
    }

    pub fn from_reward(r: &RewardParams) -> Self {
        let d = r.dims();
        Self::new(
            ModelKind::Reward,
            CheckpointDims {
                v_total: d.v_total,
                d_emb: d.d_emb,
                d_hid: d.d_hid,
                d_mlp: Some(d.d_mlp),
                keep_prob: Some(r.keep_prob()),
                seed: None,
            },
            r.store().clone(),
        )
    }

    pub fn from_oracle(o: &OracleModel) -> Self {
        let mut c = Self::from_generator(o.params());
        c.kind = ModelKind::Oracle;
        c.dims.seed = Some(o.seed());
        c
    }

    fn expect_kind(&self, expected: ModelKind) -> CkResult<()> {
        if self.kind != expected {
            return Err(CheckpointError::KindMismatch { expected, found: self.kind });
        }
        Ok(())
    }

    fn generator_params(&self) -> crate::Result<GeneratorParams> {
        let dims = GeneratorDims::new(self.dims.v_total, self.dims.d_emb, self.dims.d_hid)?;
        GeneratorParams::from_store(dims, self.params.clone())
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()).into())
    }

    pub fn into_generator(self) -> crate::Result<GeneratorParams> {
        self.expect_kind(ModelKind::Generator)?;
        self.generator_params()
    }

    pub fn into_reward(self) -> crate::Result<RewardParams> {
        self.expect_kind(ModelKind::Reward)?;
        let d_mlp = self.dims.d_mlp.ok_or_else(|| CheckpointError::Header("reward checkpoint lacks d_mlp".into()))?;
        let keep = self.dims.keep_prob.ok_or_else(|| CheckpointError::Header("reward checkpoint lacks keep_prob".into()))?;
        let dims = RewardDims::new(self.dims.v_total, self.dims.d_emb, self.dims.d_hid, d_mlp)?;
        RewardParams::from_store(dims, keep, self.params).map_err(|e| CheckpointError::ShapeMismatch(e.to_string()).into())
    }

    pub fn into_oracle(self) -> crate::Result<OracleModel> {
        self.expect_kind(ModelKind::Oracle)?;
        let seed = self.dims.seed.unwrap_or(0);
        Ok(OracleModel::from_params(self.generator_params()?, seed))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            kind: self.kind,
            dims: self.dims,
            arrays: self
                .params
                .iter()
                .map(|(name, m)| ArrayEntry { name: name.to_string(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.params.iter() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated { needed: MAGIC.len(), found: bytes.len() });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated { needed: 16, found: bytes.len() });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
        let body = 16usize
            .checked_add(hlen)
            .ok_or_else(|| CheckpointError::Header("header length overflows".into()))?;
        if bytes.len() < body {
            return Err(CheckpointError::Truncated { needed: body, found: bytes.len() });
        }
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        // Check the version before the full schema so newer files report the right error.
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Header("missing version".into()))?;
        if version != u64::from(VERSION) {
            return Err(CheckpointError::VersionMismatch { found: version as u32, expected: VERSION });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.arrays.windows(2).any(|w| w[0].name >= w[1].name) {
            return Err(CheckpointError::Header("arrays not in strictly sorted name order".into()));
        }
        let mut total = 0usize;
        for a in &header.arrays {
            let n = a
                .rows
                .checked_mul(a.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| CheckpointError::ShapeMismatch(format!("array {} is too large", a.name)))?;
            total = total
                .checked_add(n)
                .ok_or_else(|| CheckpointError::ShapeMismatch("payload too large".into()))?;
        }
        let payload = &bytes[body..];
        if payload.len() < total {
            return Err(CheckpointError::Truncated { needed: body + total, found: bytes.len() });
        }
        if payload.len() > total {
            return Err(CheckpointError::LengthMismatch { expected: body + total, found: bytes.len() });
        }
        let mut params = ParamStore::new();
        let mut off = 0;
        for a in header.arrays {
            let n = a.rows * a.cols;
            let data: Vec<f64> = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            let m = Mat::from_vec(a.rows, a.cols, data).map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
            params.insert(a.name, m).map_err(|e| CheckpointError::Header(e.to_string()))?;
        }
        Ok(Self { kind: header.kind, dims: header.dims, params })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> crate::Result<()> {
    std::fs::write(path, checkpoint.to_bytes())
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source }.into())
}

pub fn load_checkpoint(path: &Path) -> crate::Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}
