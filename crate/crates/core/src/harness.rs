//! Run orchestration behind the command-line tool: training runs with their
//! artifacts, dense-vs-pruned comparison tables and activation analyses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, FORMAT};
use crate::config::{ConfigError, RunConfig};
use crate::graph::PaddedGraph;
use crate::metrics::{
    attention_profile, head_redundancy, layer_similarity, profiles_csv, AttentionRecord, MetricError, RedundancyMetric,
};
use crate::model::{forward_graph, ActiveMasks, ForwardOptions, ModelError, ModelParams, Representation};
use crate::prune::PruneState;
use crate::tensor::Tape;
use crate::train::{train, Dataset, RunReport, TrainError};

/// Graphs used for layer similarity.
pub const CKA_GRAPHS: usize = 128;
/// Graphs forwarded per tape while recording.
const RECORD_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset mismatch: {0} vs {1}")]
    DatasetMismatch(String, String),
    #[error("{0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: RunReport,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    optimizer: BTreeMap<&'static str, f64>,
    report: &'a RunReport,
}

fn optimizer_header(cfg: &RunConfig) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("lr", cfg.lr), ("beta1", 0.9), ("beta2", 0.999), ("eps", 1e-8)])
}

/// Trains and writes the run directory: config, metrics, report, pruner logs,
/// checkpoint and, when `output.record` is set, an activation recording of the
/// test split.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunArtifacts> {
    let data = Dataset::load(cfg)?;
    let outcome = train(cfg, &data)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    fs::write(dir.join("metrics.csv"), outcome.report.metrics_csv())?;
    let report_json = serde_json::to_string_pretty(&ReportFile {
        optimizer: optimizer_header(cfg),
        report: &outcome.report,
    })
    .map_err(|e| HarnessError::Incompatible(e.to_string()))?;
    fs::write(dir.join("report.json"), report_json + "\n")?;
    if !outcome.head_log.is_empty() {
        fs::write(dir.join("heads.csv"), &outcome.head_log)?;
    }
    if !outcome.sparsity_log.is_empty() {
        fs::write(dir.join("sparsity.csv"), &outcome.sparsity_log)?;
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        config: cfg.to_pairs(),
        model: outcome.params.config.clone(),
        dataset_hash: data.hash.clone(),
        dataset_source: cfg.to_pairs().get("dataset").cloned().unwrap_or_default(),
        split: data.split.clone(),
        heads: outcome.state.heads.clone(),
        layers: outcome.state.layers.clone(),
        tokens: outcome.state.tokens.clone(),
        weight_masked: outcome.state.weights.is_some(),
        report: outcome.report.clone(),
    };
    let ckpt = Checkpoint::new(header, outcome.params, outcome.state);
    let checkpoint = dir.join("checkpoint.jsonl");
    ckpt.save(&checkpoint)?;
    if cfg.record {
        let graphs = data.padded(&data.split.test);
        let rec = record_activations(&ckpt.params, &ckpt.state, &graphs, &data.split.test, true, true)?;
        rec.write_jsonl(&ckpt.params.config.sublayer_names(), &dir.join("recording.jsonl"))?;
    }
    log::info!("run written to {}", dir.display());
    Ok(RunArtifacts {
        dir,
        report: outcome.report,
        checkpoint,
    })
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub pruner: String,
    pub sparsity: f64,
    pub params: usize,
    pub flops: u64,
    /// Relative to the dense row, in [0, 1).
    pub flops_saving: f64,
    pub metric: String,
    pub score: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub dataset_hash: String,
    pub rows: [ReportRow; 2],
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,pruner,spar,params,flops,fs,metric,score,delta\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.run, r.pruner, r.sparsity, r.params, r.flops, r.flops_saving, r.metric, r.score, r.delta
            );
        }
        s
    }

    /// Aligned table; a pruned score above the dense one is starred.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<8} {:<7} {:>6} {:>10} {:>8} {:>9} {:>8}\n",
            "run", "pruner", "Spar.", "#Para.", "FS", "Acc.", "dAcc"
        );
        for r in &self.rows {
            let star = if r.delta > 0.0 { "*" } else { "" };
            let _ = writeln!(
                s,
                "{:<8} {:<7} {:>5.0}% {:>10} {:>7.2}% {:>8.2}{:<1} {:>+8.2}",
                r.run,
                r.pruner,
                r.sparsity * 100.0,
                r.params,
                r.flops_saving * 100.0,
                r.score * 100.0,
                star,
                r.delta * 100.0
            );
        }
        s
    }
}

fn row(run: &str, ckpt: &Checkpoint, base_flops: u64, base_score: f64) -> ReportRow {
    let report = &ckpt.header.report;
    let flops = report.flops_pruned.total_flops;
    let score = report.final_record().test_metric;
    ReportRow {
        run: run.into(),
        pruner: report.pruner.clone(),
        sparsity: report.sparsity,
        params: ckpt.params.active_count(&ckpt.state),
        flops,
        flops_saving: if base_flops == 0 { 0.0 } else { 1.0 - flops as f64 / base_flops as f64 },
        metric: report.metric.clone(),
        score,
        delta: score - base_score,
    }
}

/// Compares two runs on the same dataset and split.
pub fn cmd_report(dense: &Checkpoint, pruned: &Checkpoint) -> Result<Comparison> {
    let (a, b) = (&dense.header, &pruned.header);
    if a.dataset_hash != b.dataset_hash {
        return Err(HarnessError::DatasetMismatch(a.dataset_hash.clone(), b.dataset_hash.clone()));
    }
    if a.split != b.split {
        return Err(HarnessError::Incompatible("runs use different splits".into()));
    }
    let base_flops = a.report.flops_pruned.total_flops;
    let base_score = a.report.final_record().test_metric;
    Ok(Comparison {
        dataset_hash: a.dataset_hash.clone(),
        rows: [
            row("dense", dense, base_flops, base_score),
            row("pruned", pruned, base_flops, base_score),
        ],
    })
}

/// Activations of a set of graphs under the checkpoint's masks.
#[derive(Debug, Clone, Default)]
pub struct Recording {
    pub attention: Vec<AttentionRecord>,
    /// Per graph, every sublayer output over the nodes alive at that point.
    pub representations: Vec<Vec<Representation>>,
    /// Per graph: dataset index, node count and the kept node ids after each
    /// token-pruning stage.
    pub tokens: Vec<TokenSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenSelection {
    pub graph: usize,
    pub n: usize,
    pub stages: Vec<(usize, Vec<usize>)>,
    pub readout_nodes: Vec<usize>,
}

pub fn record_activations(
    params: &ModelParams,
    state: &PruneState,
    graphs: &[PaddedGraph],
    dataset_ids: &[usize],
    attention: bool,
    representations: bool,
) -> Result<Recording> {
    let masks = ActiveMasks::from_state(state);
    let mut rec = Recording::default();
    for (chunk, ids) in graphs.chunks(RECORD_CHUNK).zip(dataset_ids.chunks(RECORD_CHUNK)) {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, state.weights.as_ref());
        for (g, &gid) in chunk.iter().zip(ids) {
            let mut opts = ForwardOptions {
                record_attention: attention,
                record_representations: representations,
                ..ForwardOptions::eval()
            };
            let trace = forward_graph(&mut tape, &vars, params, g, &masks, &mut opts)?;
            rec.attention.extend(trace.attention.into_iter().map(|a| AttentionRecord {
                graph: gid,
                block: a.block,
                head: a.head,
                probs: a.probs,
                nodes: a.nodes,
            }));
            if representations {
                rec.representations.push(trace.representations);
            }
            rec.tokens.push(TokenSelection {
                graph: gid,
                n: g.n_valid,
                stages: trace.token_masks.iter().map(|m| (m.layer, m.kept())).collect(),
                readout_nodes: trace.kept_nodes,
            });
        }
    }
    Ok(rec)
}

#[derive(Serialize)]
struct RecordLine<'a> {
    name: String,
    graph: usize,
    nodes: &'a [usize],
    shape: &'a [usize],
    data: &'a [f64],
}

impl Recording {
    /// Named tensors, one per line: `attn/g<graph>/b<block>/h<head>` and
    /// `repr/g<graph>/<sublayer>`.
    pub fn write_jsonl(&self, sublayer_names: &[String], path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        let mut put = |line: RecordLine<'_>| -> Result<()> {
            serde_json::to_writer(&mut out, &line).map_err(|e| HarnessError::Incompatible(e.to_string()))?;
            out.write_all(b"\n")?;
            Ok(())
        };
        for a in &self.attention {
            put(RecordLine {
                name: format!("attn/g{}/b{}/h{}", a.graph, a.block, a.head),
                graph: a.graph,
                nodes: &a.nodes,
                shape: a.probs.shape(),
                data: a.probs.data(),
            })?;
        }
        for (reps, sel) in self.representations.iter().zip(&self.tokens) {
            for r in reps {
                put(RecordLine {
                    name: format!("repr/g{}/{}", sel.graph, sublayer_names[r.sublayer]),
                    graph: sel.graph,
                    nodes: &r.nodes,
                    shape: r.value.shape(),
                    data: r.value.data(),
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Attention,
    Heads,
    Layers,
    Tokens,
}

impl std::str::FromStr for AnalyzeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention" => Ok(Self::Attention),
            "heads" => Ok(Self::Heads),
            "layers" => Ok(Self::Layers),
            "tokens" => Ok(Self::Tokens),
            other => Err(format!("unknown analysis {other:?} (attention, heads, layers, tokens)")),
        }
    }
}

/// Rebuilds the dataset a checkpoint was trained on and checks its hash.
pub fn checkpoint_dataset(ckpt: &Checkpoint) -> Result<Dataset> {
    let cfg = RunConfig::with_pairs(&ckpt.header.config)?;
    let graphs = Dataset::load(&cfg)?.graphs;
    let data = Dataset::new(graphs, ckpt.header.split.clone())?;
    if data.hash != ckpt.header.dataset_hash {
        return Err(HarnessError::DatasetMismatch(ckpt.header.dataset_hash.clone(), data.hash));
    }
    Ok(data)
}

/// Runs one analysis over the test split and writes its files into `out`.
/// Returns the paths written.
pub fn cmd_analyze(ckpt: &Checkpoint, data: &Dataset, which: AnalyzeKind, out: &Path) -> Result<Vec<PathBuf>> {
    if data.hash != ckpt.header.dataset_hash {
        return Err(HarnessError::DatasetMismatch(ckpt.header.dataset_hash.clone(), data.hash.clone()));
    }
    let feature_dim = data.feature_dim;
    if feature_dim != ckpt.params.config.input_dim {
        return Err(HarnessError::Incompatible(format!(
            "features have {feature_dim} columns, model expects {}",
            ckpt.params.config.input_dim
        )));
    }
    fs::create_dir_all(out)?;
    let ids: Vec<usize> = match which {
        AnalyzeKind::Layers => data.split.test.iter().copied().take(CKA_GRAPHS).collect(),
        _ => data.split.test.clone(),
    };
    let graphs = data.padded(&ids);
    let (params, state) = (&ckpt.params, &ckpt.state);
    let mut written = Vec::new();
    let mut write = |name: &str, body: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    match which {
        AnalyzeKind::Attention => {
            let rec = record_activations(params, state, &graphs, &ids, true, false)?;
            for r in &rec.attention {
                r.check()?;
            }
            write("attention_profile.csv", &profiles_csv(&attention_profile(&rec.attention)))?;
        }
        AnalyzeKind::Heads => {
            let rec = record_activations(params, state, &graphs, &ids, true, false)?;
            for metric in [RedundancyMetric::Js, RedundancyMetric::Dcor] {
                let m = head_redundancy(&rec.attention, metric)?;
                let title = format!("head distance ({}, {} graphs)", metric.name(), m.graphs);
                write(&format!("heads_{}.csv", metric.name()), &m.to_csv())?;
                write(&format!("heads_{}.svg", metric.name()), &m.to_svg(&title))?;
            }
        }
        AnalyzeKind::Layers => {
            let rec = record_activations(params, state, &graphs, &ids, false, true)?;
            let m = layer_similarity(&rec.representations, &params.config.sublayer_names())?;
            let title = format!("layer similarity (linear CKA, {} graphs)", m.graphs);
            write("layers_cka.csv", &m.to_csv())?;
            write("layers_cka.svg", &m.to_svg(&title))?;
        }
        AnalyzeKind::Tokens => {
            let rec = record_activations(params, state, &graphs, &ids, false, false)?;
            let mut body = String::new();
            for t in &rec.tokens {
                body.push_str(&serde_json::to_string(t).map_err(|e| HarnessError::Incompatible(e.to_string()))?);
                body.push('\n');
            }
            write("tokens.jsonl", &body)?;
        }
    }
    Ok(written)
}
