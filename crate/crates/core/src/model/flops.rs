//! Exact FLOPs accounting for one forward pass.
//!
//! One multiply-accumulate counts as 2 FLOPs. With `n` valid nodes:
//!
//! * GCN layer: `2(nnz(A+I)·d_out + n·nnz(W))`, propagating after the
//!   feature transform.
//! * Active head: `2n(nnz(W_Q)+nnz(W_K)+nnz(W_V))` for projections,
//!   `2n²d′` for `QKᵀ`, `5n²` for softmax, `2n²d′` for attention·V and
//!   `2n·nnz(W_O rows of the head)` for its share of the output projection.
//! * FFN: `2n(nnz(W_1) + nnz(W_2))`, i.e. `4n·d·ffn` when dense.
//! * Token scorer: a linear GCN with 2 output channels, booked under GNN.
//!
//! Biases, layer norms, residual adds, readout and the classifier are not
//! counted. Masked heads, dropped sublayers and masked weights contribute 0.

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, Sublayer};
use crate::prune::PruneState;

/// Per-sublayer work sizes, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SublayerSizes {
    /// Valid nodes entering each sublayer.
    pub nodes: Vec<usize>,
    /// `nnz(A + I)` of the graph each sublayer sees.
    pub propagation_nnz: Vec<usize>,
    /// `(nodes, nnz(A + I))` at each token-scoring call.
    pub scorer: Vec<(usize, usize)>,
}

impl SublayerSizes {
    /// Every sublayer sees `n` nodes and `edges_directed = ‖A‖₀` nonzeros.
    pub fn uniform(config: &ModelConfig, n: usize, edges_directed: usize) -> Self {
        let len = config.sublayers().len();
        Self {
            nodes: vec![n; len],
            propagation_nnz: vec![edges_directed + n; len],
            scorer: Vec::new(),
        }
    }

    /// Uniform sizes, then after each `(block, kept, kept_edges_directed)`
    /// stage every later sublayer sees the kept subgraph.
    pub fn with_token_stages(config: &ModelConfig, n: usize, edges_directed: usize, stages: &[(usize, usize, usize)]) -> Self {
        let mut out = Self::uniform(config, n, edges_directed);
        let sublayers = config.sublayers();
        let (mut cur_n, mut cur_e) = (n, edges_directed);
        for (pos, s) in sublayers.iter().enumerate() {
            out.nodes[pos] = cur_n;
            out.propagation_nnz[pos] = cur_e + cur_n;
            if let Sublayer::Ffn(b) = s {
                if let Some(&(_, k, e)) = stages.iter().find(|st| st.0 == *b) {
                    out.scorer.push((cur_n, cur_e + cur_n));
                    cur_n = k;
                    cur_e = e;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub gnn_flops: u64,
    pub mha_flops: u64,
    pub ffn_flops: u64,
    pub total_flops: u64,
    /// The `QKᵀ`, softmax and attention·V part of `mha_flops`.
    pub attention_quadratic: u64,
    /// Weights that survive head, layer and weight masks.
    pub params: usize,
}

impl FlopsReport {
    /// `1 − pruned/dense`.
    pub fn saving_vs(&self, dense: &FlopsReport) -> f64 {
        if dense.total_flops == 0 {
            return 0.0;
        }
        1.0 - self.total_flops as f64 / dense.total_flops as f64
    }
}

fn nnz(state: &PruneState, layout: &Layout, id: usize) -> u64 {
    match state.weights.as_ref().and_then(|w| w.mask(id)) {
        Some(m) => m.iter().filter(|&&b| b).count() as u64,
        None => layout.size(id) as u64,
    }
}

fn nnz_range(state: &PruneState, id: usize, start: usize, end: usize) -> u64 {
    match state.weights.as_ref().and_then(|w| w.mask(id)) {
        Some(m) => m[start..end].iter().filter(|&&b| b).count() as u64,
        None => (end - start) as u64,
    }
}

pub fn count_flops(config: &ModelConfig, sizes: &SublayerSizes, state: &PruneState) -> FlopsReport {
    let layout = Layout::new(config, state.tokens.is_some());
    let d = config.hidden_dim as u64;
    let dh = config.head_dim as u64;
    let mut r = FlopsReport::default();
    for (pos, s) in config.sublayers().into_iter().enumerate() {
        let on = state.layers.bit(pos) || s == Sublayer::Gnn(0);
        if !on {
            continue;
        }
        let n = sizes.nodes[pos] as u64;
        match s {
            Sublayer::Gnn(i) => {
                let e = sizes.propagation_nnz[pos] as u64;
                r.gnn_flops += 2 * (e * d + n * nnz(state, &layout, layout.gnn[i]));
            }
            Sublayer::Mha(b) => {
                let ids = &layout.blocks[b];
                for (h, head) in ids.heads.iter().enumerate() {
                    if !state.heads.is_active(b, h) {
                        continue;
                    }
                    let proj = nnz(state, &layout, head.query) + nnz(state, &layout, head.key) + nnz(state, &layout, head.value);
                    let rows = h * config.head_dim * config.hidden_dim;
                    let out = nnz_range(state, ids.out_w, rows, rows + config.head_dim * config.hidden_dim);
                    let quad = 2 * n * n * dh + 5 * n * n + 2 * n * n * dh;
                    r.attention_quadratic += quad;
                    r.mha_flops += 2 * n * proj + quad + 2 * n * out;
                }
            }
            Sublayer::Ffn(b) => {
                let ids = &layout.blocks[b];
                r.ffn_flops += 2 * n * (nnz(state, &layout, ids.ffn_w1) + nnz(state, &layout, ids.ffn_w2));
            }
        }
    }
    if let Some(id) = layout.scorer {
        let w = layout.size(id) as u64;
        for &(n, e) in &sizes.scorer {
            r.gnn_flops += 2 * (e as u64 * 2 + n as u64 * w);
        }
    }
    r.total_flops = r.gnn_flops + r.mha_flops + r.ffn_flops;
    r.params = active_param_count(config, &layout, state);
    r
}

/// Weights that survive export under `state`: masked heads (and their output
/// projection rows), dropped sublayers and masked entries are excluded.
pub fn active_param_count(config: &ModelConfig, layout: &Layout, state: &PruneState) -> usize {
    let mut live = vec![true; layout.len()];
    for (pos, s) in config.sublayers().into_iter().enumerate() {
        if !state.layers.bit(pos) && s != Sublayer::Gnn(0) {
            for id in layout.sublayer_ids(s) {
                live[id] = false;
            }
        }
    }
    let dh = config.head_dim;
    let d = config.hidden_dim;
    let mut removed_rows = 0;
    for (b, block) in layout.blocks.iter().enumerate() {
        for (h, ids) in block.heads.iter().enumerate() {
            if state.heads.is_active(b, h) {
                continue;
            }
            for id in [ids.query, ids.key, ids.value] {
                live[id] = false;
            }
            if live[block.out_w] {
                removed_rows += nnz_range(state, block.out_w, h * dh * d, (h + 1) * dh * d) as usize;
            }
        }
    }
    let total: usize = (0..layout.len())
        .filter(|&id| live[id])
        .map(|id| nnz(state, layout, id) as usize)
        .sum();
    total - removed_rows
}
