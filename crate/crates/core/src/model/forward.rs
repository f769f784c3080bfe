use rand_chacha::ChaCha8Rng;

use super::flops::SublayerSizes;
use super::{ModelError, ModelParams, Result, Sublayer};
use crate::graph::PaddedGraph;
use crate::prune::{
    apply_token_mask, perturb_scores, sample_gumbel, score_tokens, select_topk, HeadMask,
    PruneState, Selection, TokenMask, TokenPruneConfig,
};
use crate::tensor::{Tape, Tensor, Var, MASK_NEG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The masks one forward pass runs under. `layer_bits` is resolved by the
/// caller (a stochastic sample while training, the stored bits otherwise).
#[derive(Debug, Clone, Copy)]
pub struct ActiveMasks<'a> {
    pub heads: &'a HeadMask,
    pub layer_bits: &'a [bool],
    pub tokens: Option<&'a TokenPruneConfig>,
}

impl<'a> ActiveMasks<'a> {
    pub fn from_state(state: &'a PruneState) -> Self {
        Self {
            heads: &state.heads,
            layer_bits: state.layers.bits(),
            tokens: state.tokens.as_ref(),
        }
    }
}

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Gumbel temperature for training-mode token selection.
    pub tau: f64,
    /// Noise source for token perturbation and Gumbel draws.
    pub token_rng: Option<&'a mut ChaCha8Rng>,
    pub record_attention: bool,
    pub record_representations: bool,
    /// Compute masked heads anyway (for regrowth measurement).
    pub lift_head_mask: bool,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            tau: 1.0,
            token_rng: None,
            record_attention: false,
            record_representations: false,
            lift_head_mask: false,
        }
    }
}

/// Attention probabilities of one head restricted to valid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub block: usize,
    pub head: usize,
    pub probs: Tensor,
    /// Original node id of each row/column.
    pub nodes: Vec<usize>,
}

/// Output of one sublayer position restricted to valid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub sublayer: usize,
    pub value: Tensor,
    pub nodes: Vec<usize>,
}

pub struct GraphTrace {
    pub logits: Var,
    /// `Z` per (block, head); `None` when the head or its block did not run.
    pub head_outputs: Vec<Vec<Option<Var>>>,
    pub attention: Vec<AttentionCapture>,
    pub representations: Vec<Representation>,
    pub token_masks: Vec<TokenMask>,
    /// Original ids of the nodes that reach the readout.
    pub kept_nodes: Vec<usize>,
    pub sizes: SublayerSizes,
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` over valid nodes; rows and columns of padded
/// nodes are zero.
pub fn normalized_adjacency(adjacency: &[f64], validity: &[bool]) -> Tensor {
    let n = validity.len();
    let mut deg = vec![0.0; n];
    for i in 0..n {
        if validity[i] {
            deg[i] = 1.0 + (0..n).filter(|&j| validity[j]).map(|j| adjacency[i * n + j]).sum::<f64>();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        if !validity[i] {
            continue;
        }
        for j in 0..n {
            if !validity[j] {
                continue;
            }
            let a = adjacency[i * n + j] + if i == j { 1.0 } else { 0.0 };
            if a != 0.0 {
                out[i * n + j] = a / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    Tensor::matrix(n, n, out).expect("square adjacency")
}

struct Frame {
    adjacency: Vec<f64>,
    validity: Vec<bool>,
    nodes: Vec<usize>,
    a_hat: Tensor,
    attn_mask: Option<Tensor>,
}

impl Frame {
    fn new(adjacency: Vec<f64>, validity: Vec<bool>, nodes: Vec<usize>) -> Self {
        let n = validity.len();
        let a_hat = normalized_adjacency(&adjacency, &validity);
        let attn_mask = validity.iter().any(|&v| !v).then(|| {
            let row: Vec<f64> = validity.iter().map(|&v| if v { 0.0 } else { MASK_NEG }).collect();
            let data = (0..n).flat_map(|_| row.iter().copied()).collect();
            Tensor::matrix(n, n, data).expect("mask shape")
        });
        Self {
            adjacency,
            validity,
            nodes,
            a_hat,
            attn_mask,
        }
    }

    fn n_valid(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Nonzeros of `A + I` among valid nodes.
    fn propagation_nnz(&self) -> usize {
        let n = self.validity.len();
        let mut nnz = 0;
        for i in (0..n).filter(|&i| self.validity[i]) {
            nnz += 1 + (0..n)
                .filter(|&j| self.validity[j] && self.adjacency[i * n + j] != 0.0)
                .count();
        }
        nnz
    }

    fn valid_rows(&self) -> Vec<usize> {
        (0..self.validity.len()).filter(|&i| self.validity[i]).collect()
    }

    fn restrict(&self, t: &Tensor) -> Tensor {
        let rows = self.valid_rows();
        let cols = t.cols();
        let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
        Tensor::matrix(rows.len(), cols, data).expect("restricted shape")
    }

    fn restrict_square(&self, t: &Tensor) -> Tensor {
        let rows = self.valid_rows();
        let data = rows.iter().flat_map(|&r| rows.iter().map(move |&c| t.get(r, c))).collect();
        Tensor::matrix(rows.len(), rows.len(), data).expect("restricted shape")
    }

    fn valid_nodes(&self) -> Vec<usize> {
        self.valid_rows().into_iter().map(|r| self.nodes[r]).collect()
    }

    /// Keeps `rows`; the new frame is fully valid.
    fn induced(&self, rows: &[usize]) -> Self {
        let n = self.validity.len();
        let k = rows.len();
        let mut adjacency = vec![0.0; k * k];
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in rows.iter().enumerate() {
                adjacency[a * k + b] = self.adjacency[i * n + j];
            }
        }
        Self::new(adjacency, vec![true; k], rows.iter().map(|&r| self.nodes[r]).collect())
    }
}

fn gcn(tape: &mut Tape, frame: &Frame, h: Var, w: Var) -> Result<Var> {
    let a = tape.constant(frame.a_hat.clone());
    let hw = tape.matmul(h, w)?;
    let prop = tape.matmul(a, hw)?;
    Ok(tape.gelu(prop))
}

struct Ctx<'m, 'o, 'r> {
    vars: &'m [Var],
    params: &'m ModelParams,
    masks: &'m ActiveMasks<'m>,
    opts: &'o mut ForwardOptions<'r>,
}

/// Runs the stack on one graph. `vars` comes from [`ModelParams::bind`] on
/// the same tape.
pub fn forward_graph(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParams,
    graph: &PaddedGraph,
    masks: &ActiveMasks<'_>,
    opts: &mut ForwardOptions<'_>,
) -> Result<GraphTrace> {
    let config = &params.config;
    if graph.n_valid == 0 {
        return Err(ModelError::EmptyGraph);
    }
    if graph.features.cols() != config.input_dim {
        return Err(ModelError::Config(format!(
            "graph has {} feature channels, model expects {}",
            graph.features.cols(),
            config.input_dim
        )));
    }
    let sublayers = config.sublayers();
    if masks.layer_bits.len() != sublayers.len() {
        return Err(ModelError::Config(format!(
            "expected {} layer bits, got {}",
            sublayers.len(),
            masks.layer_bits.len()
        )));
    }
    let tokens = masks.tokens.filter(|t| !t.stages.is_empty());
    if tokens.is_some() && params.layout.scorer.is_none() {
        return Err(ModelError::NoScorer);
    }
    let mut ctx = Ctx {
        vars,
        params,
        masks,
        opts,
    };
    let n = graph.n_frame();
    let mut frame = Frame::new(graph.adjacency.clone(), graph.validity.clone(), (0..n).collect());
    let mut h = tape.constant(graph.features.clone());
    let mut trace = GraphTrace {
        logits: h,
        head_outputs: vec![vec![None; config.num_heads]; config.num_transformer_layers],
        attention: Vec::new(),
        representations: Vec::new(),
        token_masks: Vec::new(),
        kept_nodes: Vec::new(),
        sizes: SublayerSizes::default(),
    };
    for (pos, &s) in sublayers.iter().enumerate() {
        // The input projection always runs; its bit is forced on.
        let on = masks.layer_bits[pos] || s == Sublayer::Gnn(0);
        trace.sizes.nodes.push(frame.n_valid());
        trace.sizes.propagation_nnz.push(frame.propagation_nnz());
        if on {
            h = match s {
                Sublayer::Gnn(i) => gcn(tape, &frame, h, vars[params.layout.gnn[i]])?,
                Sublayer::Mha(b) => mha_sublayer(tape, &mut ctx, &frame, h, b, &mut trace)?,
                Sublayer::Ffn(b) => ffn_sublayer(tape, &ctx, h, b)?,
            };
        }
        if ctx.opts.record_representations {
            trace.representations.push(Representation {
                sublayer: pos,
                value: frame.restrict(tape.value(h)),
                nodes: frame.valid_nodes(),
            });
        }
        if let (Sublayer::Ffn(b), Some(tcfg)) = (s, tokens) {
            if tcfg.stages.contains(&b) {
                let (nh, nf) = prune_tokens(tape, &mut ctx, &frame, h, b, tcfg, &mut trace)?;
                h = nh;
                frame = nf;
            }
        }
    }
    let n_valid = frame.n_valid() as f64;
    let weights: Vec<f64> = frame.validity.iter().map(|&v| if v { 1.0 / n_valid } else { 0.0 }).collect();
    let readout = tape.constant(Tensor::matrix(1, weights.len(), weights)?);
    let pooled = tape.matmul(readout, h)?;
    let logits = tape.matmul(pooled, vars[params.layout.classifier_w])?;
    trace.logits = tape.add_row(logits, vars[params.layout.classifier_b])?;
    trace.kept_nodes = frame.valid_nodes();
    Ok(trace)
}

fn mha_sublayer(tape: &mut Tape, ctx: &mut Ctx<'_, '_, '_>, frame: &Frame, h: Var, b: usize, trace: &mut GraphTrace) -> Result<Var> {
    let config = &ctx.params.config;
    let ids = &ctx.params.layout.blocks[b];
    let n = frame.validity.len();
    let scale = 1.0 / (config.head_dim as f64).sqrt();
    let mut zs = Vec::with_capacity(config.num_heads);
    for (hd, head) in ids.heads.iter().enumerate() {
        if !(ctx.masks.heads.is_active(b, hd) || ctx.opts.lift_head_mask) {
            zs.push(tape.constant(Tensor::zeros(&[n, config.head_dim])));
            continue;
        }
        let q = tape.matmul(h, ctx.vars[head.query])?;
        let k = tape.matmul(h, ctx.vars[head.key])?;
        let v = tape.matmul(h, ctx.vars[head.value])?;
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, scale);
        let p = tape.softmax_rows(logits, frame.attn_mask.as_ref())?;
        if ctx.opts.record_attention {
            trace.attention.push(AttentionCapture {
                block: b,
                head: hd,
                probs: frame.restrict_square(tape.value(p)),
                nodes: frame.valid_nodes(),
            });
        }
        let z = tape.matmul(p, v)?;
        trace.head_outputs[b][hd] = Some(z);
        zs.push(z);
    }
    let cat = tape.concat_cols(&zs)?;
    let out = tape.matmul(cat, ctx.vars[ids.out_w])?;
    let out = tape.add_row(out, ctx.vars[ids.out_b])?;
    let normed = tape.layer_norm(out, ctx.vars[ids.norm1_gain], ctx.vars[ids.norm1_bias], config.norm_eps)?;
    Ok(tape.add(normed, h)?)
}

fn ffn_sublayer(tape: &mut Tape, ctx: &Ctx<'_, '_, '_>, h: Var, b: usize) -> Result<Var> {
    let config = &ctx.params.config;
    let ids = &ctx.params.layout.blocks[b];
    let x = tape.matmul(h, ctx.vars[ids.ffn_w1])?;
    let x = tape.add_row(x, ctx.vars[ids.ffn_b1])?;
    let x = tape.gelu(x);
    let x = tape.matmul(x, ctx.vars[ids.ffn_w2])?;
    let x = tape.add_row(x, ctx.vars[ids.ffn_b2])?;
    let normed = tape.layer_norm(x, ctx.vars[ids.norm2_gain], ctx.vars[ids.norm2_bias], config.norm_eps)?;
    Ok(tape.add(normed, h)?)
}

fn prune_tokens(
    tape: &mut Tape,
    ctx: &mut Ctx<'_, '_, '_>,
    frame: &Frame,
    h: Var,
    b: usize,
    cfg: &TokenPruneConfig,
    trace: &mut GraphTrace,
) -> Result<(Var, Frame)> {
    let scorer = ctx.vars[ctx.params.layout.scorer.ok_or(ModelError::NoScorer)?];
    trace.sizes.scorer.push((frame.n_valid(), frame.propagation_nnz()));
    let scores = score_tokens(tape, &frame.a_hat, h, scorer)?;
    let (mask, st) = match (ctx.opts.mode, ctx.opts.token_rng.as_deref_mut()) {
        (Mode::Train, Some(rng)) => {
            let scores = perturb_scores(tape, scores, cfg.score_drop, &frame.validity, rng)?;
            let n = frame.validity.len();
            let gumbel = sample_gumbel(rng, n, 2);
            let tau = ctx.opts.tau;
            select_topk(tape, scores, cfg.keep_ratio, Selection::Train { gumbel: &gumbel, tau }, &frame.validity, b)?
        }
        (Mode::Train, None) => {
            return Err(ModelError::Config("training-mode token pruning needs an rng".into()));
        }
        (Mode::Eval, _) => select_topk(tape, scores, cfg.keep_ratio, Selection::Eval, &frame.validity, b)?,
    };
    let (h, rows) = apply_token_mask(tape, h, &mask, st)?;
    let mut mask = mask;
    // Report the mask over original node ids.
    let mut by_node = vec![false; frame.nodes.iter().copied().max().map_or(0, |m| m + 1)];
    for &r in &rows {
        by_node[frame.nodes[r]] = true;
    }
    mask.mask = by_node;
    trace.token_masks.push(mask);
    Ok((h, frame.induced(&rows)))
}

/// Cross-entropy of the graph's logits against `label`.
pub fn graph_loss(tape: &mut Tape, trace: &GraphTrace, label: usize) -> Result<Var> {
    Ok(tape.cross_entropy(trace.logits, label)?)
}
