//! Versioned binary checkpoints: a JSON config header followed by a flat
//! archive of named parameter arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  b"CMPMCKPT"
//! version      u32      currently 1
//! header_len   u64      byte length of the JSON header
//! header       UTF-8 JSON (kind, configs, vocabulary, taxonomy)
//! param_count  u64
//! per parameter:
//!   name_len   u16, then the UTF-8 name
//!   ndim       u8,  then ndim × u64 extents
//!   data       numel × f32 (little-endian)
//! ```
//!
//! Values are stored as 32-bit floats; loading widens back to f64. Writing is
//! atomic (temp file + rename).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::{LabelTaxonomy, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{CompmModel, VariantMode};
use crate::nn::{seeded_rng, EncoderConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CMPMCKPT";
const VERSION: u32 = 1;

/// What a checkpoint file contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// A full classifier (any variant).
    Model,
    /// A pretrained memory encoder only.
    PretrainedMemory,
}

/// JSON header carried by every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub com: Option<EncoderConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pm: Option<EncoderConfig>,
    pub speaker_capacity: usize,
    pub vocab: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<LabelTaxonomy>,
}

/// One stored parameter.
#[derive(Debug, Clone)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let nonce = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp-{}-{nonce}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id(),
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize header + named parameters into checkpoint bytes.
pub fn encode(header: &CheckpointHeader, params: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let header_json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(header_json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        tensor.with_data(|data| {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        });
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<StoredParam>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".to_string()))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push(StoredParam { name, shape, data });
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(header, params)?)
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<StoredParam>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Copy stored values into live tensors by name. Names and shapes must match
/// exactly one-to-one.
pub fn apply_params(target: &[(String, Tensor)], stored: &[StoredParam]) -> Result<()> {
    if target.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            target.len(),
            stored.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &StoredParam> =
        stored.iter().map(|p| (p.name.as_str(), p)).collect();
    for (name, tensor) in target {
        let entry = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if entry.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: model {:?}, checkpoint {:?}",
                tensor.shape(),
                entry.shape
            )));
        }
        tensor.set_data(&entry.data);
    }
    Ok(())
}

/// Save a full model (all parameters, whatever the variant trains).
pub fn save_model(path: &Path, model: &CompmModel, taxonomy: Option<&LabelTaxonomy>) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Model,
        variant: Some(model.variant()),
        num_classes: Some(model.num_classes()),
        com: model.com_config().cloned(),
        pm: model.pm_config().cloned(),
        speaker_capacity: model.vocab().speaker_capacity(),
        vocab: model.vocab().tokens().to_vec(),
        taxonomy: taxonomy.cloned(),
    };
    save(path, &header, &model.named_parameters())
}

/// Rebuild a model from a model checkpoint.
pub fn load_model(path: &Path) -> Result<(CompmModel, Option<LabelTaxonomy>)> {
    let (header, params) = load(path)?;
    if header.kind != CheckpointKind::Model {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let variant = header
        .variant
        .ok_or_else(|| Error::Checkpoint("model checkpoint lacks a variant".to_string()))?;
    let num_classes = header
        .num_classes
        .ok_or_else(|| Error::Checkpoint("model checkpoint lacks num_classes".to_string()))?;
    let vocab = Vocabulary::from_tokens(header.vocab.clone(), header.speaker_capacity)?;
    // Construction randomness is irrelevant: every parameter is overwritten.
    let mut rng = seeded_rng(0);
    let model = CompmModel::new(
        &mut rng,
        variant,
        header.com.as_ref(),
        header.pm.as_ref(),
        num_classes,
        vocab,
    )?;
    apply_params(&model.named_parameters(), &params)?;
    Ok((model, header.taxonomy))
}

/// Save a pretrained memory encoder (parameters named `pm.*`).
pub fn save_pretrained_memory(
    path: &Path,
    pm_config: &EncoderConfig,
    vocab: &Vocabulary,
    params: &[(String, Tensor)],
) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::PretrainedMemory,
        variant: None,
        num_classes: None,
        com: None,
        pm: Some(pm_config.clone()),
        speaker_capacity: vocab.speaker_capacity(),
        vocab: vocab.tokens().to_vec(),
        taxonomy: None,
    };
    save(path, &header, params)
}

/// Load a pretrained memory checkpoint: (config, vocabulary, `pm.*` parameters).
pub fn load_pretrained_memory(
    path: &Path,
) -> Result<(EncoderConfig, Vocabulary, Vec<StoredParam>)> {
    let (header, params) = load(path)?;
    if header.kind != CheckpointKind::PretrainedMemory {
        return Err(Error::Checkpoint(format!(
            "{} is not a pretrained memory checkpoint",
            path.display()
        )));
    }
    let cfg = header
        .pm
        .ok_or_else(|| Error::Checkpoint("memory checkpoint lacks an encoder config".to_string()))?;
    let vocab = Vocabulary::from_tokens(header.vocab, header.speaker_capacity)?;
    Ok((cfg, vocab, params))
}

/// Install pretrained memory parameters into a model's memory encoder.
pub fn apply_pretrained_memory(model: &CompmModel, stored: &[StoredParam]) -> Result<()> {
    let pm_params: Vec<(String, Tensor)> = model
        .named_parameters()
        .into_iter()
        .filter(|(n, _)| n.starts_with("pm."))
        .collect();
    apply_params(&pm_params, stored)
}
