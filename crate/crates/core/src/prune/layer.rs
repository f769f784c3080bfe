//! Stochastic sublayer dropping and the fixed mask chosen for export.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ceil_count, check_sparsity, PruneError, PruneState, Result};
use crate::graph::PaddedGraph;
use crate::model::{forward_graph, graph_loss, ActiveMasks, ForwardOptions, ModelConfig, ModelParams, Sublayer};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    Stochastic,
    Fixed,
}

/// One bit per sublayer in execution order. The first GNN layer projects the
/// input features and is never dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub names: Vec<String>,
    bits: Vec<bool>,
    pub mode: LayerMode,
    pub keep_prob: f64,
    protected: usize,
}

impl LayerMask {
    pub fn identity(config: &ModelConfig) -> Self {
        let names = config.sublayer_names();
        Self {
            bits: vec![true; names.len()],
            names,
            mode: LayerMode::Fixed,
            keep_prob: 1.0,
            protected: config.sublayer_index(Sublayer::Gnn(0)).unwrap_or(0),
        }
    }

    pub fn stochastic(config: &ModelConfig, keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(PruneError::Invalid(format!("keep probability {keep_prob} outside (0, 1]")));
        }
        Ok(Self {
            mode: LayerMode::Stochastic,
            keep_prob,
            ..Self::identity(config)
        })
    }

    /// Fixed mask from explicit bits; the protected position must stay on.
    pub fn fixed(config: &ModelConfig, bits: Vec<bool>) -> Result<Self> {
        let mut m = Self::identity(config);
        if bits.len() != m.bits.len() {
            return Err(PruneError::Invalid(format!(
                "expected {} layer bits, got {}",
                m.bits.len(),
                bits.len()
            )));
        }
        if !bits[m.protected] {
            return Err(PruneError::Invalid("the input GNN layer cannot be dropped".into()));
        }
        m.bits = bits;
        Ok(m)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bit(&self, pos: usize) -> bool {
        self.bits[pos]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn prunable(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&p| p != self.protected).collect()
    }

    pub fn dropped_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    /// Bits for one training step: Bernoulli(q) per prunable sublayer in
    /// stochastic mode, the stored bits otherwise.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<bool> {
        match self.mode {
            LayerMode::Fixed => self.bits.clone(),
            LayerMode::Stochastic => (0..self.bits.len())
                .map(|p| {
                    let draw: f64 = rng.random();
                    p == self.protected || draw < self.keep_prob
                })
                .collect(),
        }
    }
}

/// Draws one Bernoulli(q) mask and freezes it.
pub fn sample_layer_mask(config: &ModelConfig, q: f64, rng: &mut impl Rng) -> Result<LayerMask> {
    let m = LayerMask::stochastic(config, q)?;
    let bits = m.sample(rng);
    LayerMask::fixed(config, bits)
}

/// `bit = 1` runs the sublayer, `bit = 0` returns the input untouched.
pub fn apply_layer_mask<E>(h: Var, bit: bool, sublayer: impl FnOnce(Var) -> std::result::Result<Var, E>) -> std::result::Result<Var, E> {
    if bit {
        sublayer(h)
    } else {
        Ok(h)
    }
}

fn validation_loss(params: &ModelParams, state: &PruneState, bits: &[bool], graphs: &[PaddedGraph]) -> Result<f64> {
    let masks = ActiveMasks {
        heads: &state.heads,
        layer_bits: bits,
        tokens: state.tokens.as_ref(),
    };
    let mut total = 0.0;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, state.weights.as_ref());
    for g in graphs {
        let mut opts = ForwardOptions::eval();
        let trace = forward_graph(&mut tape, &vars, params, g, &masks, &mut opts)?;
        let loss = graph_loss(&mut tape, &trace, g.label)?;
        total += tape.value(loss).item();
    }
    Ok(total / graphs.len() as f64)
}

fn drop_target(config: &ModelConfig, target_sparsity: f64) -> Result<(LayerMask, usize)> {
    check_sparsity(target_sparsity)?;
    let mask = LayerMask::identity(config);
    let available = mask.prunable().len();
    let wanted = ceil_count(target_sparsity * available as f64);
    if wanted > available {
        return Err(PruneError::TooManyLayers { wanted, available });
    }
    Ok((mask, wanted))
}

/// Greedy one-at-a-time ablation: repeatedly drops the sublayer whose removal
/// gives the lowest validation loss; ties drop the deeper sublayer.
pub fn finalize_layer_prune(
    params: &ModelParams,
    state: &PruneState,
    target_sparsity: f64,
    valid: &[PaddedGraph],
) -> Result<LayerMask> {
    let (mask, wanted) = drop_target(&params.config, target_sparsity)?;
    if wanted == 0 {
        return Ok(mask);
    }
    if valid.is_empty() {
        return Err(PruneError::NoGraphs);
    }
    let mut bits = mask.bits.clone();
    for _ in 0..wanted {
        let mut best: Option<(f64, usize)> = None;
        for p in mask.prunable() {
            if !bits[p] {
                continue;
            }
            bits[p] = false;
            let loss = validation_loss(params, state, &bits, valid)?;
            bits[p] = true;
            if best.is_none_or(|(b, _)| loss <= b) {
                best = Some((loss, p));
            }
        }
        let (_, p) = best.expect("a prunable sublayer remains");
        bits[p] = false;
    }
    LayerMask::fixed(&params.config, bits)
}

/// Reference search over every subset of the same size; ties prefer the
/// subset whose dropped positions are deepest (lexicographically largest
/// when listed from the deepest down).
pub fn exhaustive_layer_prune(
    params: &ModelParams,
    state: &PruneState,
    target_sparsity: f64,
    valid: &[PaddedGraph],
) -> Result<LayerMask> {
    let (mask, wanted) = drop_target(&params.config, target_sparsity)?;
    let prunable = mask.prunable();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for subset in combinations(prunable.len(), wanted) {
        let dropped: Vec<usize> = subset.iter().map(|&i| prunable[i]).collect();
        let mut bits = mask.bits.clone();
        for &p in &dropped {
            bits[p] = false;
        }
        let loss = validation_loss(params, state, &bits, valid)?;
        let deeper = |a: &[usize], b: &[usize]| a.iter().rev().cmp(b.iter().rev()).is_gt();
        let better = match &best {
            None => true,
            Some((b, d)) => loss < *b || (loss == *b && deeper(&dropped, d)),
        };
        if better {
            best = Some((loss, dropped));
        }
    }
    let mut bits = mask.bits.clone();
    for p in best.map(|b| b.1).unwrap_or_default() {
        bits[p] = false;
    }
    LayerMask::fixed(&params.config, bits)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}
