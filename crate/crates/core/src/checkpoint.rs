//! JSON-lines checkpoints: one header object, then one named tensor per line.
//!
//! Inactive heads' projections, their output-projection rows and the tensors
//! of dropped sublayers are not written; loading fills them with zeros, which
//! leaves the pruned forward pass unchanged. Weight masks are stored as
//! `mask/<tensor name>` lines of 0/1 values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DatasetSplit;
use crate::model::{ModelConfig, ModelError, ModelParams, Sublayer};
use crate::prune::{HeadMask, LayerMask, PruneState, TokenPruneConfig, WeightMasks};
use crate::tensor::Tensor;
use crate::train::RunReport;

pub const FORMAT: &str = "gtsp-checkpoint/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    /// The run configuration as flat key=value pairs.
    pub config: BTreeMap<String, String>,
    pub model: ModelConfig,
    pub dataset_hash: String,
    pub dataset_source: String,
    pub split: DatasetSplit,
    pub heads: HeadMask,
    pub layers: LayerMask,
    pub tokens: Option<TokenPruneConfig>,
    pub weight_masked: bool,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub state: PruneState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorLine {
    name: String,
    shape: Vec<usize>,
    /// Stored rows when only part of a matrix is exported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<usize>>,
    data: Vec<f64>,
}

/// Tensor ids left out of the export and, per output projection, the rows
/// that remain.
fn export_plan(params: &ModelParams, state: &PruneState) -> (BTreeSet<usize>, BTreeMap<usize, Vec<usize>>) {
    let config = &params.config;
    let layout = &params.layout;
    let mut skip = BTreeSet::new();
    for (pos, s) in config.sublayers().into_iter().enumerate() {
        if !state.layers.bit(pos) && s != Sublayer::Gnn(0) {
            skip.extend(layout.sublayer_ids(s));
        }
    }
    let mut partial = BTreeMap::new();
    let dh = config.head_dim;
    for (b, block) in layout.blocks.iter().enumerate() {
        let mut rows = Vec::new();
        for (h, ids) in block.heads.iter().enumerate() {
            if state.heads.is_active(b, h) {
                rows.extend(h * dh..(h + 1) * dh);
            } else {
                skip.extend([ids.query, ids.key, ids.value]);
            }
        }
        if rows.len() < config.num_heads * dh && !skip.contains(&block.out_w) {
            partial.insert(block.out_w, rows);
        }
    }
    (skip, partial)
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, params: ModelParams, state: PruneState) -> Self {
        Self { header, params, state }
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, &self.header).map_err(|e| CheckpointError::Json { line: 1, source: e })?;
        out.write_all(b"\n")?;
        let (skip, partial) = export_plan(&self.params, &self.state);
        let emit = |line: &TensorLine, out: &mut dyn Write| -> Result<()> {
            serde_json::to_writer(&mut *out, line).map_err(|e| CheckpointError::Json { line: 0, source: e })?;
            out.write_all(b"\n")?;
            Ok(())
        };
        for (id, (name, t)) in self.params.named().enumerate() {
            if skip.contains(&id) {
                continue;
            }
            let line = match partial.get(&id) {
                Some(rows) => TensorLine {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect(),
                    rows: Some(rows.clone()),
                },
                None => TensorLine {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    rows: None,
                    data: t.data().to_vec(),
                },
            };
            emit(&line, out)?;
        }
        if let Some(w) = &self.state.weights {
            for (id, mask) in w.iter() {
                let line = TensorLine {
                    name: format!("mask/{}", self.params.layout.name(id)),
                    shape: self.params.layout.shape(id).to_vec(),
                    rows: None,
                    data: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                };
                emit(&line, out)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| CheckpointError::Format("empty checkpoint".into()))??;
        let header: CheckpointHeader =
            serde_json::from_str(&first).map_err(|e| CheckpointError::Json { line: 1, source: e })?;
        if header.format != FORMAT {
            return Err(CheckpointError::Format(format!("unknown format {:?}", header.format)));
        }
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut masks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TensorLine =
                serde_json::from_str(&line).map_err(|e| CheckpointError::Json { line: i + 2, source: e })?;
            let size: usize = t.shape.iter().product();
            if let Some(name) = t.name.strip_prefix("mask/") {
                if t.data.len() != size {
                    return Err(CheckpointError::Format(format!("mask {name}: {} values for {size}", t.data.len())));
                }
                masks.insert(name.to_string(), t.data.iter().map(|&x| x != 0.0).collect());
                continue;
            }
            let full = match &t.rows {
                None => t.data,
                Some(rows) => {
                    let cols = t.shape.get(1).copied().unwrap_or(1);
                    if t.shape.len() != 2 || t.data.len() != rows.len() * cols || rows.iter().any(|&r| r >= t.shape[0]) {
                        return Err(CheckpointError::Format(format!("bad partial tensor {}", t.name)));
                    }
                    let mut full = vec![0.0; size];
                    for (k, &r) in rows.iter().enumerate() {
                        full[r * cols..(r + 1) * cols].copy_from_slice(&t.data[k * cols..(k + 1) * cols]);
                    }
                    full
                }
            };
            let tensor = Tensor::new(t.shape, full).map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.insert(t.name, tensor);
        }
        let config = header.model.clone();
        let with_scorer = tensors.contains_key("scorer.weight");
        let layout = crate::model::Layout::new(&config, with_scorer);
        let mut named = Vec::with_capacity(layout.len());
        for id in 0..layout.len() {
            let name = layout.name(id);
            let t = tensors
                .remove(name)
                .unwrap_or_else(|| Tensor::zeros(layout.shape(id)));
            named.push((name.to_string(), t));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(CheckpointError::Format(format!("unexpected tensor {extra}")));
        }
        let params = ModelParams::from_named(&config, named)?;
        let weights = if header.weight_masked {
            let mut map = BTreeMap::new();
            for (name, m) in masks {
                let id = params
                    .layout
                    .find(&name)
                    .ok_or_else(|| CheckpointError::Format(format!("mask for unknown tensor {name}")))?;
                map.insert(id, m);
            }
            Some(WeightMasks::from_map(map))
        } else {
            None
        };
        let state = PruneState {
            heads: header.heads.clone(),
            layers: header.layers.clone(),
            weights,
            tokens: header.tokens.clone(),
        };
        Ok(Self { header, params, state })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
