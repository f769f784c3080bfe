//! Training loop with one pruner driven on its schedule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DatasetSource, LayerSelection, Metric, PrunerSpec, RunConfig};
use crate::graph::{self, dataset_hash, make_batches_from, DatasetSplit, Graph, GraphError, PaddedGraph};
use crate::model::{
    count_flops, forward_graph, graph_loss, ActiveMasks, FlopsReport, ForwardOptions, ModelError, ModelParams, Mode,
    SublayerSizes,
};
use crate::optim::Adam;
use crate::prune::{
    finalize_layer_prune, head_importance, prune_heads, regrow_heads, sample_layer_mask, schedule_sparsity,
    LayerMask, PruneError, PruneState, WeightMasks,
};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (graphs {graphs:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        graphs: Vec<usize>,
    },
    #[error("dataset is empty or has an empty training split")]
    EmptyData,
}

pub type Result<T> = std::result::Result<T, TrainError>;

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SCORER: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_LAYER: u64 = 4;
const STREAM_TOKEN: u64 = 5;

/// SplitMix64-style mixing of a seed with a stream tag and two counters.
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [stream, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub split: DatasetSplit,
    pub hash: String,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let graphs = match &cfg.dataset {
            DatasetSource::Synth(spec) => graph::synth_motif_dataset(spec)?,
            DatasetSource::Jsonl { path, num_classes } => graph::load_jsonl(path, *num_classes)?,
        };
        let split = match DatasetSplit::from_hints(&graphs) {
            Some(s) => s,
            None => DatasetSplit::random(graphs.len(), cfg.valid_fraction, cfg.test_fraction, cfg.split_seed)?,
        };
        Self::new(graphs, split)
    }

    pub fn new(graphs: Vec<Graph>, split: DatasetSplit) -> Result<Self> {
        split.validate(graphs.len())?;
        if graphs.is_empty() || split.train.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let feature_dim = graphs[0].feature_dim();
        Ok(Self {
            hash: dataset_hash(&graphs),
            num_classes: graph::num_classes(&graphs).max(2),
            feature_dim,
            split,
            graphs,
        })
    }

    pub fn padded(&self, idx: &[usize]) -> Vec<PaddedGraph> {
        idx.iter().map(|&i| self.graphs[i].to_padded(self.graphs[i].n())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub valid_metric: f64,
    pub test_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub pruner: String,
    pub sparsity: f64,
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    pub params_dense: usize,
    pub params_final: usize,
    /// Summed over the test split.
    pub flops_dense: FlopsReport,
    pub flops_pruned: FlopsReport,
    pub flops_saving: f64,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn final_record(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }

    /// Per-epoch metrics; no timing, so reruns match byte for byte.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_metric,valid_metric,test_metric\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.train_metric, r.valid_metric, r.test_metric);
        }
        s
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: PruneState,
    pub report: RunReport,
    pub head_log: String,
    pub sparsity_log: String,
}

/// Accuracy, or ROC-AUC of the positive-class probability.
pub fn score(metric: Metric, probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    match metric {
        Metric::Accuracy => {
            let hits = probs
                .iter()
                .zip(labels)
                .filter(|(p, &y)| {
                    let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                    best == y
                })
                .count();
            hits as f64 / labels.len() as f64
        }
        Metric::RocAuc => roc_auc(&probs.iter().map(|p| p[1]).collect::<Vec<_>>(), labels),
    }
}

/// Mann–Whitney rank statistic with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Evaluation-mode pass: mean loss, class probabilities and work sizes.
pub struct Evaluation {
    pub loss: f64,
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sizes: Vec<SublayerSizes>,
}

pub fn evaluate(params: &ModelParams, state: &PruneState, graphs: &[PaddedGraph]) -> Result<Evaluation> {
    let masks = ActiveMasks::from_state(state);
    let mut out = Evaluation {
        loss: 0.0,
        probs: Vec::with_capacity(graphs.len()),
        labels: Vec::with_capacity(graphs.len()),
        sizes: Vec::with_capacity(graphs.len()),
    };
    // No backward pass here, so one tape and one binding serve every graph.
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, state.weights.as_ref());
    for g in graphs {
        let mut opts = ForwardOptions::eval();
        let trace = forward_graph(&mut tape, &vars, params, g, &masks, &mut opts)?;
        let loss = graph_loss(&mut tape, &trace, g.label)?;
        out.loss += tape.value(loss).item();
        out.probs.push(softmax(tape.value(trace.logits).data()));
        out.labels.push(g.label);
        out.sizes.push(trace.sizes);
    }
    out.loss /= graphs.len().max(1) as f64;
    Ok(out)
}

/// FLOPs summed over `graphs`: dense model vs `state`.
pub fn flops_over(params: &ModelParams, state: &PruneState, graphs: &[PaddedGraph], eval: &Evaluation) -> (FlopsReport, FlopsReport) {
    let config = &params.config;
    let dense_state = PruneState::identity(config);
    let mut dense = FlopsReport::default();
    let mut pruned = FlopsReport::default();
    for (g, sizes) in graphs.iter().zip(&eval.sizes) {
        let edges = g.adjacency.iter().filter(|&&a| a != 0.0).count();
        let d = count_flops(config, &SublayerSizes::uniform(config, g.n_valid, edges), &dense_state);
        let p = count_flops(config, sizes, state);
        for (acc, r) in [(&mut dense, d), (&mut pruned, p)] {
            acc.gnn_flops += r.gnn_flops;
            acc.mha_flops += r.mha_flops;
            acc.ffn_flops += r.ffn_flops;
            acc.total_flops += r.total_flops;
            acc.attention_quadratic += r.attention_quadratic;
            acc.params = r.params;
        }
    }
    (dense, pruned)
}

fn tau_at(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    start + (end - start) * epoch as f64 / (epochs - 1) as f64
}

/// Trains per `cfg` on `data`.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = data.feature_dim;
    model_cfg.num_classes = data.num_classes;
    let mut params = ModelParams::init(&model_cfg, derive_seed(cfg.seed, STREAM_INIT, 0, 0))?;
    let mut state = PruneState::identity(&model_cfg);
    match &cfg.pruner {
        PrunerSpec::Token(t) => {
            params.add_token_scorer(derive_seed(cfg.seed, STREAM_SCORER, 0, 0));
            if t.prune.keep_ratio < 1.0 {
                state.tokens = Some(t.prune.clone());
            }
        }
        PrunerSpec::Layer(l) => state.layers = LayerMask::stochastic(&model_cfg, l.keep_prob)?,
        PrunerSpec::Weight(_) => state.weights = Some(WeightMasks::dense(&params)),
        PrunerSpec::Head(_) | PrunerSpec::None => {}
    }
    let params_dense = params.count();
    let mut adam = Adam::new(&params, cfg.lr);
    let mut layer_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_LAYER, 0, 0));
    let train_padded = data.padded(&data.split.train);
    let valid_padded = data.padded(&data.split.valid);
    let test_padded = data.padded(&data.split.test);
    let mut head_log = String::new();
    let mut sparsity_log = String::new();
    if let Some(w) = &state.weights {
        let mut buf = Vec::new();
        w.write_csv_header(&params, &mut buf).expect("in-memory write");
        sparsity_log.push_str(&String::from_utf8_lossy(&buf));
    }
    let mut grad_accum: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        match &cfg.pruner {
            PrunerSpec::Head(h) => {
                let prune_at = h.prune_epoch.min(cfg.epochs - 1);
                let mut log_board = None;
                if epoch == prune_at {
                    let board = head_importance(&params, &state, &train_padded, false)?;
                    state.heads = prune_heads(&board, h.sparsity, &state.heads)?;
                    log_board = Some(board);
                } else if epoch > prune_at
                    && (epoch - prune_at) % h.regrow_interval == 0
                    && epoch < h.regrow_until
                    && state.heads.inactive_count() > 0
                    && h.regrow_fraction > 0.0
                {
                    let board = head_importance(&params, &state, &train_padded, true)?;
                    let r = crate::prune::ceil_count(h.regrow_fraction * state.heads.inactive_count() as f64);
                    state.heads = regrow_heads(&board, r, &state.heads)?;
                    log_board = Some(board);
                }
                if let Some(board) = log_board {
                    let mut buf = Vec::new();
                    board.write_csv(&state.heads, &mut buf).expect("in-memory write");
                    let _ = writeln!(head_log, "# epoch {epoch}");
                    head_log.push_str(&String::from_utf8_lossy(&buf));
                }
            }
            PrunerSpec::Layer(l) if epoch == l.finalize_epoch.min(cfg.epochs - 1) => {
                let scoring = if valid_padded.is_empty() { &train_padded } else { &valid_padded };
                state.layers = match l.selection {
                    LayerSelection::Greedy => {
                        let probe = PruneState {
                            layers: LayerMask::identity(&model_cfg),
                            ..state.clone()
                        };
                        finalize_layer_prune(&params, &probe, l.sparsity, scoring)?
                    }
                    LayerSelection::Random => sample_layer_mask(&model_cfg, l.keep_prob, &mut layer_rng)?,
                };
            }
            PrunerSpec::Weight(s) if s.is_update_epoch(epoch) => {
                let p = schedule_sparsity(epoch as f64, s);
                let masks = state.weights.as_mut().expect("weight masks");
                let regrow = s.regrow_fraction > 0.0 && (epoch as f64) > s.t0 && (epoch as f64) < s.regrow_until;
                if regrow {
                    masks.regrow_to(&params, &grad_accum, s.regrow_fraction, p)?;
                } else {
                    masks.prune_to(&params, p)?;
                }
                let mut buf = Vec::new();
                masks.write_csv_row(epoch, p, &mut buf).expect("in-memory write");
                sparsity_log.push_str(&String::from_utf8_lossy(&buf));
                grad_accum.clear();
            }
            _ => {}
        }

        let tau = match &cfg.pruner {
            PrunerSpec::Token(t) => tau_at(t.tau_start, t.tau_end, epoch, cfg.epochs),
            _ => 1.0,
        };
        let epoch_frozen = matches!(&cfg.pruner, PrunerSpec::Token(t) if t.epoch_frozen);
        let mut order = data.split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64, 0)));
        let batches = make_batches_from(&data.graphs, &order, cfg.batch_size, None);
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, state.weights.as_ref());
            let bits = state.layers.sample(&mut layer_rng);
            let masks = ActiveMasks {
                heads: &state.heads,
                layer_bits: &bits,
                tokens: state.tokens.as_ref(),
            };
            let mut total = None;
            for (gi, g) in batch.graphs.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(if epoch_frozen {
                    derive_seed(cfg.seed, STREAM_TOKEN, epoch as u64, batch.indices[gi] as u64)
                } else {
                    derive_seed(cfg.seed, STREAM_TOKEN, step, gi as u64)
                });
                let mut opts = ForwardOptions {
                    mode: Mode::Train,
                    tau,
                    token_rng: Some(&mut rng),
                    ..ForwardOptions::eval()
                };
                let trace = forward_graph(&mut tape, &vars, &params, g, &masks, &mut opts)?;
                let loss = graph_loss(&mut tape, &trace, g.label)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => tape.add(t, loss)?,
                });
            }
            let total = total.expect("nonempty batch");
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.value(mean).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    loss: value,
                    graphs: batch.indices.clone(),
                });
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(mean)?;
            let grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
            if let Some(w) = &state.weights {
                for id in w.ids() {
                    if let Some(g) = &grads[id] {
                        let acc = grad_accum.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b.abs());
                    }
                }
            }
            adam.update(&mut params, &grads, state.weights.as_ref());
            step += 1;
        }

        let tr = evaluate(&params, &state, &train_padded)?;
        let va = evaluate(&params, &state, &valid_padded)?;
        let te = evaluate(&params, &state, &test_padded)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / data.split.train.len() as f64,
            train_metric: score(cfg.metric, &tr.probs, &tr.labels),
            valid_metric: score(cfg.metric, &va.probs, &va.labels),
            test_metric: score(cfg.metric, &te.probs, &te.labels),
        });
        log::debug!("epoch {epoch}: {:?}", records.last());
    }

    let te = evaluate(&params, &state, &test_padded)?;
    let (flops_dense, flops_pruned) = flops_over(&params, &state, &test_padded, &te);
    let report = RunReport {
        config_hash: cfg.hash(),
        dataset_hash: data.hash.clone(),
        pruner: cfg.pruner.name().into(),
        sparsity: cfg.pruner.sparsity(),
        metric: cfg.metric.to_string(),
        epochs: records,
        params_dense,
        params_final: params.active_count(&state),
        flops_saving: flops_pruned.saving_vs(&flops_dense),
        flops_dense,
        flops_pruned,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        params,
        state,
        report,
        head_log,
        sparsity_log,
    })
}
