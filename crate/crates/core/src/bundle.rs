//! Single-file model bundle.
//!
//! Layout, all integers little-endian:
//! `b"ESQB"`, `u32` format version, `u64` metadata length, metadata JSON,
//! `u32` forest count, then per forest a `u64` length and its encoding,
//! and finally the 32-byte SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bkt::BktParams;
use crate::features::{Bucket, FeatureContext, FeatureSpec};
use crate::forest::Forest;
use crate::mastery::{FmModel, ProjectionConfig, RandomProjection};
use crate::pipeline::{EvalReport, PipelineConfig};
use crate::simulator::{Catalog, QuestionMeta};

pub const MAGIC: &[u8; 4] = b"ESQB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("not a model bundle")]
    BadMagic,
    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u32),
    #[error("bundle truncated")]
    Truncated,
    #[error("bundle digest mismatch")]
    DigestMismatch,
    #[error("bundle metadata: {0}")]
    Metadata(String),
    #[error("forest section: {0}")]
    Forest(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format_version: u32,
    pub spec: FeatureSpec,
    pub n_concepts: u32,
    pub catalog: Vec<QuestionMeta>,
    pub bkt: BTreeMap<u32, BktParams>,
    pub fm: Option<FmModel>,
    pub projection: Option<ProjectionConfig>,
    pub individualized: bool,
    pub config: PipelineConfig,
    /// SHA-256 of the pipeline config JSON.
    pub config_digest: String,
    pub interval_tau: f64,
    /// Bucket of each forest section, in order; `None` is the global model.
    pub forest_buckets: Vec<Option<Bucket>>,
    /// Per-bucket training rows used as the attribution background.
    pub background: BTreeMap<Bucket, Vec<Vec<f64>>>,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub meta: BundleMeta,
    pub forests: Vec<Forest>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(BundleError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, BundleError> {
        usize::try_from(self.u64()?).map_err(|_| BundleError::Truncated)
    }
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata is serializable");
        let mut out = Vec::with_capacity(meta.len() + 1024);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        out.extend((self.forests.len() as u32).to_le_bytes());
        for f in &self.forests {
            let b = f.to_bytes();
            out.extend((b.len() as u64).to_le_bytes());
            out.extend(b);
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BundleError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(BundleError::BadMagic);
        }
        let mut c = Cursor { bytes, pos: 4 };
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(BundleError::UnsupportedVersion(version));
        }
        if bytes.len() < 32 + 8 {
            return Err(BundleError::Truncated);
        }
        let meta_len = c.len()?;
        let meta_bytes = c.take(meta_len)?;
        let n_forests = c.u32()? as usize;
        let mut sections = Vec::with_capacity(n_forests.min(64));
        for _ in 0..n_forests {
            let n = c.len()?;
            sections.push(c.take(n)?);
        }
        let body_end = c.pos;
        let stored = c.take(32)?;
        if c.pos != bytes.len() {
            return Err(BundleError::Metadata("trailing bytes after digest".into()));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
            return Err(BundleError::DigestMismatch);
        }
        let meta: BundleMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| BundleError::Metadata(e.to_string()))?;
        if meta.format_version != version {
            return Err(BundleError::Metadata("format version disagrees with header".into()));
        }
        if meta.forest_buckets.len() != n_forests {
            return Err(BundleError::Metadata("forest bucket list does not match sections".into()));
        }
        let forests = sections
            .into_iter()
            .map(|s| Forest::from_bytes(s).map_err(|e| BundleError::Forest(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        for f in &forests {
            if f.n_features != meta.spec.len() {
                return Err(BundleError::Forest("forest width does not match registry".into()));
            }
        }
        Ok(Self { meta, forests })
    }

    pub fn save(&self, path: &Path) -> Result<(), BundleError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BundleError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized bundle, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn global(&self) -> Option<&Forest> {
        self.meta
            .forest_buckets
            .iter()
            .position(Option::is_none)
            .map(|i| &self.forests[i])
    }

    pub fn bucket_forest(&self, bucket: Bucket) -> Option<&Forest> {
        self.meta
            .forest_buckets
            .iter()
            .position(|b| *b == Some(bucket))
            .map(|i| &self.forests[i])
    }

    /// Bucket model when one was trained, otherwise the global model.
    pub fn route(&self, bucket: Bucket) -> Option<(&Forest, bool)> {
        match self.bucket_forest(bucket) {
            Some(f) => Some((f, false)),
            None => self.global().map(|f| (f, true)),
        }
    }

    /// Background rows for a bucket; the union of all buckets when that
    /// bucket has none.
    pub fn background(&self, bucket: Bucket) -> Vec<Vec<f64>> {
        match self.meta.background.get(&bucket) {
            Some(rows) if !rows.is_empty() => rows.clone(),
            _ => self.meta.background.values().flatten().cloned().collect(),
        }
    }

    pub fn context(&self) -> Result<FeatureContext, BundleError> {
        let catalog = Catalog::new(self.meta.n_concepts, self.meta.catalog.clone())
            .map_err(|e| BundleError::Metadata(e.to_string()))?;
        let projection = self
            .meta
            .projection
            .map(RandomProjection::new)
            .transpose()
            .map_err(|e| BundleError::Metadata(e.to_string()))?;
        Ok(FeatureContext {
            spec: self.meta.spec.clone(),
            catalog,
            bkt: self.meta.bkt.clone(),
            fm: self.meta.fm.clone(),
            projection,
            individualized: self.meta.individualized,
        })
    }
}
