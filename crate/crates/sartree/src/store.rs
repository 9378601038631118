//! Checkpoint persistence for model weights and soft parameters.
//!
//! Format: one JSON document per checkpoint.
//!   format_version  integer, currently 1
//!   kind            "weights" | "soft"
//!   metadata        dims, prompting mode, seed lineage
//!   arrays          name -> { shape, data } with full-precision decimals,
//!                   ordered by name
//!   checksum        hex SHA-256 over every array's f64 little-endian bytes
//!                   in name order (names and lengths included)
//!
//! Writes go to a temp file in the target directory and are renamed into
//! place, so readers never observe a partial checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{LayerWeights, Mat, ModelConfig, ModelWeights, PromptKind, SoftParams};
use crate::tune::PromptingMode;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {got}, expected {FORMAT_VERSION}")]
    Version { got: u32 },
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("array {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing required array {0}")]
    MissingArray(String),
    #[error("checkpoint kind {got:?} where {expected:?} was required")]
    Kind { got: CheckpointKind, expected: CheckpointKind },
    #[error("metadata field {0} missing or invalid")]
    Metadata(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Weights,
    Soft,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompting_mode: Option<PromptingMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub metadata: Metadata,
    pub arrays: BTreeMap<String, NamedArray>,
    pub checksum: String,
}

/// Hex SHA-256 over the arrays in name order: each array contributes its
/// name bytes, its element count, and its f64 little-endian payload.
pub fn content_checksum(arrays: &BTreeMap<String, NamedArray>) -> String {
    let mut h = Sha256::new();
    for (name, arr) in arrays {
        h.update(name.as_bytes());
        h.update((arr.data.len() as u64).to_le_bytes());
        for v in &arr.data {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, metadata: Metadata, arrays: BTreeMap<String, NamedArray>) -> Self {
        let checksum = content_checksum(&arrays);
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind,
            metadata,
            arrays,
            checksum,
        }
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<&NamedArray, StoreError> {
        let arr = self
            .arrays
            .get(name)
            .ok_or_else(|| StoreError::MissingArray(name.to_string()))?;
        if arr.shape != shape || arr.data.len() != shape.iter().product::<usize>() {
            return Err(StoreError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: arr.shape.clone(),
            });
        }
        Ok(arr)
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), StoreError> {
    let json = serde_json::to_string(ckpt)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(json.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, StoreError> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format_version != FORMAT_VERSION {
        return Err(StoreError::Version { got: ckpt.format_version });
    }
    let computed = content_checksum(&ckpt.arrays);
    if computed != ckpt.checksum {
        return Err(StoreError::Checksum {
            stored: ckpt.checksum.clone(),
            computed,
        });
    }
    Ok(ckpt)
}

fn put(arrays: &mut BTreeMap<String, NamedArray>, name: String, shape: Vec<usize>, data: Vec<f64>) {
    debug_assert_eq!(data.len(), shape.iter().product::<usize>());
    arrays.insert(name, NamedArray { shape, data });
}

pub fn weights_to_checkpoint(w: &ModelWeights, seed: Option<u64>) -> Checkpoint {
    let c = &w.cfg;
    let mut arrays = BTreeMap::new();
    put(&mut arrays, "token_emb".into(), vec![c.vocab, c.dim], w.token_emb.data.clone());
    for (i, l) in w.layers.iter().enumerate() {
        let d = c.dim;
        let h = c.hidden;
        let entries: [(&str, Vec<usize>, &Vec<f64>); 16] = [
            ("ln1_g", vec![d], &l.ln1_g),
            ("ln1_b", vec![d], &l.ln1_b),
            ("wq", vec![d, d], &l.wq.data),
            ("bq", vec![d], &l.bq),
            ("wk", vec![d, d], &l.wk.data),
            ("bk", vec![d], &l.bk),
            ("wv", vec![d, d], &l.wv.data),
            ("bv", vec![d], &l.bv),
            ("wo", vec![d, d], &l.wo.data),
            ("bo", vec![d], &l.bo),
            ("ln2_g", vec![d], &l.ln2_g),
            ("ln2_b", vec![d], &l.ln2_b),
            ("w1", vec![d, h], &l.w1.data),
            ("b1", vec![h], &l.b1),
            ("w2", vec![h, d], &l.w2.data),
            ("b2", vec![d], &l.b2),
        ];
        for (name, shape, data) in entries {
            put(&mut arrays, format!("layers.{i}.{name}"), shape, data.clone());
        }
    }
    put(&mut arrays, "lnf_g".into(), vec![c.dim], w.lnf_g.clone());
    put(&mut arrays, "lnf_b".into(), vec![c.dim], w.lnf_b.clone());
    put(&mut arrays, "head".into(), vec![c.dim, c.vocab], w.head.data.clone());
    put(&mut arrays, "head_b".into(), vec![c.vocab], w.head_b.clone());
    let metadata = Metadata {
        vocab: Some(c.vocab),
        dim: Some(c.dim),
        n_layers: Some(c.n_layers),
        n_heads: Some(c.n_heads),
        hidden: Some(c.hidden),
        seed,
        ..Metadata::default()
    };
    Checkpoint::new(CheckpointKind::Weights, metadata, arrays)
}

fn meta_usize(v: Option<usize>, field: &'static str) -> Result<usize, StoreError> {
    v.ok_or(StoreError::Metadata(field))
}

pub fn checkpoint_to_weights(ckpt: &Checkpoint) -> Result<ModelWeights, StoreError> {
    if ckpt.kind != CheckpointKind::Weights {
        return Err(StoreError::Kind { got: ckpt.kind, expected: CheckpointKind::Weights });
    }
    let md = &ckpt.metadata;
    let cfg = ModelConfig {
        vocab: meta_usize(md.vocab, "vocab")?,
        dim: meta_usize(md.dim, "dim")?,
        n_layers: meta_usize(md.n_layers, "n_layers")?,
        n_heads: meta_usize(md.n_heads, "n_heads")?,
        hidden: meta_usize(md.hidden, "hidden")?,
    };
    let mut w = ModelWeights::zeros(cfg);
    let d = cfg.dim;
    let h = cfg.hidden;
    w.token_emb.data = ckpt.take("token_emb", &[cfg.vocab, d])?.data.clone();
    for i in 0..cfg.n_layers {
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>, StoreError> {
            Ok(ckpt.take(&format!("layers.{i}.{name}"), shape)?.data.clone())
        };
        let l: &mut LayerWeights = &mut w.layers[i];
        l.ln1_g = get("ln1_g", &[d])?;
        l.ln1_b = get("ln1_b", &[d])?;
        l.wq.data = get("wq", &[d, d])?;
        l.bq = get("bq", &[d])?;
        l.wk.data = get("wk", &[d, d])?;
        l.bk = get("bk", &[d])?;
        l.wv.data = get("wv", &[d, d])?;
        l.bv = get("bv", &[d])?;
        l.wo.data = get("wo", &[d, d])?;
        l.bo = get("bo", &[d])?;
        l.ln2_g = get("ln2_g", &[d])?;
        l.ln2_b = get("ln2_b", &[d])?;
        l.w1.data = get("w1", &[d, h])?;
        l.b1 = get("b1", &[h])?;
        l.w2.data = get("w2", &[h, d])?;
        l.b2 = get("b2", &[d])?;
    }
    w.lnf_g = ckpt.take("lnf_g", &[d])?.data.clone();
    w.lnf_b = ckpt.take("lnf_b", &[d])?.data.clone();
    w.head.data = ckpt.take("head", &[d, cfg.vocab])?.data.clone();
    w.head_b = ckpt.take("head_b", &[cfg.vocab])?.data.clone();
    Ok(w)
}

pub fn soft_to_checkpoint(soft: &SoftParams, seed: Option<u64>) -> Checkpoint {
    let dim = soft.mask_emb.cols;
    let m = soft.n_masks();
    let p = soft.prefix_len();
    let mut arrays = BTreeMap::new();
    put(&mut arrays, "mask_emb".into(), vec![m, dim], soft.mask_emb.data.clone());
    let (mode, n_layers) = match &soft.prompt {
        PromptKind::MaskOnly => (PromptingMode::MaskOnly, None),
        PromptKind::Shallow { prompt } => {
            put(&mut arrays, "prompt".into(), vec![p, dim], prompt.data.clone());
            (PromptingMode::Shallow, None)
        }
        PromptKind::Deep { kv } => {
            for (i, (k, v)) in kv.iter().enumerate() {
                put(&mut arrays, format!("layers.{i}.k_pref"), vec![p, dim], k.data.clone());
                put(&mut arrays, format!("layers.{i}.v_pref"), vec![p, dim], v.data.clone());
            }
            (PromptingMode::Deep, Some(kv.len()))
        }
    };
    let metadata = Metadata {
        dim: Some(dim),
        n_layers,
        p: Some(p),
        m: Some(m),
        prompting_mode: Some(mode),
        seed,
        ..Metadata::default()
    };
    Checkpoint::new(CheckpointKind::Soft, metadata, arrays)
}

/// Rebuilds soft params and validates them against the paired model config.
pub fn checkpoint_to_soft(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<SoftParams, StoreError> {
    if ckpt.kind != CheckpointKind::Soft {
        return Err(StoreError::Kind { got: ckpt.kind, expected: CheckpointKind::Soft });
    }
    let md = &ckpt.metadata;
    let dim = meta_usize(md.dim, "dim")?;
    if dim != cfg.dim {
        return Err(StoreError::Shape {
            name: "mask_emb".into(),
            expected: vec![meta_usize(md.m, "m")?, cfg.dim],
            found: vec![meta_usize(md.m, "m")?, dim],
        });
    }
    let m = meta_usize(md.m, "m")?;
    let p = meta_usize(md.p, "p")?;
    let mode = md.prompting_mode.ok_or(StoreError::Metadata("prompting_mode"))?;
    let mut mask_emb = Mat::zeros(m, dim);
    mask_emb.data = ckpt.take("mask_emb", &[m, dim])?.data.clone();
    let prompt = match mode {
        PromptingMode::MaskOnly => PromptKind::MaskOnly,
        PromptingMode::Shallow => {
            let mut pm = Mat::zeros(p, dim);
            pm.data = ckpt.take("prompt", &[p, dim])?.data.clone();
            PromptKind::Shallow { prompt: pm }
        }
        PromptingMode::Deep => {
            let n_layers = meta_usize(md.n_layers, "n_layers")?;
            if n_layers != cfg.n_layers {
                return Err(StoreError::Shape {
                    name: "layers".into(),
                    expected: vec![cfg.n_layers],
                    found: vec![n_layers],
                });
            }
            let mut kv = Vec::with_capacity(n_layers);
            for i in 0..n_layers {
                let mut k = Mat::zeros(p, dim);
                let mut v = Mat::zeros(p, dim);
                k.data = ckpt.take(&format!("layers.{i}.k_pref"), &[p, dim])?.data.clone();
                v.data = ckpt.take(&format!("layers.{i}.v_pref"), &[p, dim])?.data.clone();
                kv.push((k, v));
            }
            PromptKind::Deep { kv }
        }
    };
    Ok(SoftParams { mask_emb, prompt })
}
