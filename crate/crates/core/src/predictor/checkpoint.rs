//! Versioned binary checkpoints and embedding export.
//!
//! Layout: `SWQ1`, a little-endian u32 header length, the JSON header, then
//! every parameter block as little-endian f64 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::NormStats;
use super::model::{block_layout, ModelConfig, ModelParams};
use super::train::Dataset;
use super::PredictorError;
use crate::tensor_nn::{ParamSet, Tensor2D};
use crate::trace_model::SharpChangeThresholds;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SWQ1";
pub const SCHEMA_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 1 << 24;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    hyperparameters: ModelConfig,
    norm: NormStats,
    blocks: Vec<BlockHeader>,
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<(), PredictorError> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        hyperparameters: params.config,
        norm: params.norm.clone(),
        blocks: params
            .params
            .blocks
            .iter()
            .map(|b| BlockHeader {
                name: b.name.clone(),
                rows: b.rows,
                cols: b.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for b in &params.params.blocks {
        for x in &b.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), PredictorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => PredictorError::Checkpoint(format!("truncated while reading {what}")),
        _ => PredictorError::Io(e),
    })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams, PredictorError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PredictorError::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 4];
    read_exact_or(&mut r, &mut len, "header length")?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_HEADER_BYTES {
        return Err(PredictorError::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    read_exact_or(&mut r, &mut json, "header")?;
    let value: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| PredictorError::Checkpoint(format!("header: {e}")))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| PredictorError::Checkpoint("header has no schema_version".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(PredictorError::UnsupportedVersion(version.min(u32::MAX as u64) as u32));
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| PredictorError::Checkpoint(format!("header: {e}")))?;
    header.hyperparameters.check()?;
    let expected = block_layout(&header.hyperparameters);
    let declared: Vec<(String, usize, usize)> =
        header.blocks.iter().map(|b| (b.name.clone(), b.rows, b.cols)).collect();
    if declared != expected {
        return Err(PredictorError::Checkpoint(
            "block list does not match the declared architecture".into(),
        ));
    }
    let mut params = ParamSet::default();
    let mut buf = [0u8; 8];
    for b in &header.blocks {
        let mut data = Vec::with_capacity(b.rows * b.cols);
        for _ in 0..b.rows * b.cols {
            read_exact_or(&mut r, &mut buf, &b.name)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(Tensor2D::from_vec(&b.name, b.rows, b.cols, data));
    }
    if r.read(&mut buf)? != 0 {
        return Err(PredictorError::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(ModelParams {
        config: header.hyperparameters,
        params,
        norm: header.norm,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), PredictorError> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, PredictorError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Pooled final-encoder features of each sample plus a 0/1 label telling
/// whether the first target step is a sharp change.
pub fn export_embeddings<W: Write>(
    params: &ModelParams,
    data: &Dataset,
    thresholds: &SharpChangeThresholds,
    w: W,
) -> Result<usize, PredictorError> {
    let mut out = csv::Writer::from_writer(w);
    let d = params.config.d_model;
    let mut header: Vec<String> = (0..d).map(|i| format!("e{i}")).collect();
    header.push("sharp_change_next".into());
    out.write_record(&header).map_err(csv_err)?;
    for s in &data.samples {
        let emb = params.embed(&s.window)?;
        let label = match (s.prev, s.targets.first().copied().flatten()) {
            (Some(p), Some(t)) => thresholds.classify(p, t).is_some(),
            _ => false,
        };
        let mut row: Vec<String> = emb.iter().map(|x| format!("{x:e}")).collect();
        row.push(if label { "1" } else { "0" }.into());
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(data.len())
}

fn csv_err(e: csv::Error) -> PredictorError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PredictorError::Io(io),
        other => PredictorError::Checkpoint(format!("{other:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub trainable_parameters: usize,
    pub schema_version: u32,
    pub norm_digest: String,
    pub config: ModelConfig,
}

pub fn norm_digest(norm: &NormStats) -> String {
    let mut h = Sha256::new();
    for x in norm.mean.iter().chain(norm.std.iter()) {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn describe(params: &ModelParams) -> ModelDescription {
    ModelDescription {
        trainable_parameters: params.param_count(),
        schema_version: SCHEMA_VERSION,
        norm_digest: norm_digest(&params.norm),
        config: params.config,
    }
}
