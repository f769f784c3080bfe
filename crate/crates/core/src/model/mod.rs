//! Graph-transformer stack: configuration, parameter storage, forward pass
//! and FLOPs accounting.

mod flops;
mod forward;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prune::{PruneState, WeightMasks};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use flops::{active_param_count, count_flops, FlopsReport, SublayerSizes};
pub use forward::{
    forward_graph, graph_loss, normalized_adjacency, ActiveMasks, AttentionCapture, ForwardOptions,
    GraphTrace, Mode, Representation,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("token pruning needs a token scorer in the parameters")]
    NoScorer,
    #[error("graph has no valid nodes")]
    EmptyGraph,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackStyle {
    /// All GNN layers, then all transformer blocks.
    Prelude,
    /// GNN and transformer blocks alternate.
    Interleaved,
}

impl std::str::FromStr for StackStyle {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prelude" => Ok(Self::Prelude),
            "interleaved" => Ok(Self::Interleaved),
            other => Err(ModelError::Config(format!("unknown stack style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_gnn_layers: usize,
    pub num_transformer_layers: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub stack_style: StackStyle,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            num_gnn_layers: 2,
            num_transformer_layers: 4,
            hidden_dim: 32,
            head_dim: 8,
            num_heads: 4,
            ffn_dim: 64,
            num_classes: 2,
            stack_style: StackStyle::Prelude,
            norm_eps: 1e-5,
        }
    }
}

/// One prunable unit of the stack, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sublayer {
    Gnn(usize),
    Mha(usize),
    Ffn(usize),
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sublayer::Gnn(i) => write!(f, "gnn.{i}"),
            Sublayer::Mha(b) => write!(f, "block.{b}.mha"),
            Sublayer::Ffn(b) => write!(f, "block.{b}.ffn"),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("num_gnn_layers", self.num_gnn_layers),
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_heads * self.head_dim != self.hidden_dim {
            return Err(ModelError::Config(format!(
                "num_heads * head_dim = {} * {} != hidden_dim {}",
                self.num_heads, self.head_dim, self.hidden_dim
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(ModelError::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Sublayers in execution order.
    pub fn sublayers(&self) -> Vec<Sublayer> {
        let mut out = Vec::new();
        match self.stack_style {
            StackStyle::Prelude => {
                out.extend((0..self.num_gnn_layers).map(Sublayer::Gnn));
                for b in 0..self.num_transformer_layers {
                    out.push(Sublayer::Mha(b));
                    out.push(Sublayer::Ffn(b));
                }
            }
            StackStyle::Interleaved => {
                let depth = self.num_gnn_layers.max(self.num_transformer_layers);
                for i in 0..depth {
                    if i < self.num_gnn_layers {
                        out.push(Sublayer::Gnn(i));
                    }
                    if i < self.num_transformer_layers {
                        out.push(Sublayer::Mha(i));
                        out.push(Sublayer::Ffn(i));
                    }
                }
            }
        }
        out
    }

    pub fn sublayer_names(&self) -> Vec<String> {
        self.sublayers().iter().map(ToString::to_string).collect()
    }

    pub fn sublayer_index(&self, s: Sublayer) -> Option<usize> {
        self.sublayers().iter().position(|&x| x == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    GnnWeight,
    Query,
    Key,
    Value,
    OutProj,
    OutBias,
    NormGain,
    NormBias,
    FfnIn,
    FfnInBias,
    FfnOut,
    FfnOutBias,
    Classifier,
    ClassifierBias,
    Scorer,
}

impl ParamKind {
    /// Weight matrices eligible for magnitude pruning.
    pub fn weight_prunable(self) -> bool {
        matches!(
            self,
            ParamKind::GnnWeight
                | ParamKind::Query
                | ParamKind::Key
                | ParamKind::Value
                | ParamKind::OutProj
                | ParamKind::FfnIn
                | ParamKind::FfnOut
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadIds {
    pub query: usize,
    pub key: usize,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIds {
    pub heads: Vec<HeadIds>,
    pub out_w: usize,
    pub out_b: usize,
    pub norm1_gain: usize,
    pub norm1_bias: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub norm2_gain: usize,
    pub norm2_bias: usize,
}

impl BlockIds {
    pub fn mha_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .heads
            .iter()
            .flat_map(|h| [h.query, h.key, h.value])
            .collect();
        ids.extend([self.out_w, self.out_b, self.norm1_gain, self.norm1_bias]);
        ids
    }

    pub fn ffn_ids(&self) -> Vec<usize> {
        vec![
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.norm2_gain,
            self.norm2_bias,
        ]
    }
}

/// Where each named tensor lives in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub gnn: Vec<usize>,
    pub blocks: Vec<BlockIds>,
    pub classifier_w: usize,
    pub classifier_b: usize,
    pub scorer: Option<usize>,
    specs: Vec<(String, ParamKind, Vec<usize>)>,
}

impl Layout {
    pub fn new(config: &ModelConfig, with_scorer: bool) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, kind: ParamKind, shape: Vec<usize>| {
            specs.push((name, kind, shape));
            specs.len() - 1
        };
        let d = config.hidden_dim;
        let dh = config.head_dim;
        let gnn = (0..config.num_gnn_layers)
            .map(|i| {
                let fan_in = if i == 0 { config.input_dim } else { d };
                add(format!("gnn.{i}.weight"), ParamKind::GnnWeight, vec![fan_in, d])
            })
            .collect();
        let blocks = (0..config.num_transformer_layers)
            .map(|b| {
                let heads = (0..config.num_heads)
                    .map(|h| HeadIds {
                        query: add(format!("block.{b}.head.{h}.query"), ParamKind::Query, vec![d, dh]),
                        key: add(format!("block.{b}.head.{h}.key"), ParamKind::Key, vec![d, dh]),
                        value: add(format!("block.{b}.head.{h}.value"), ParamKind::Value, vec![d, dh]),
                    })
                    .collect();
                BlockIds {
                    heads,
                    out_w: add(format!("block.{b}.out.weight"), ParamKind::OutProj, vec![d, d]),
                    out_b: add(format!("block.{b}.out.bias"), ParamKind::OutBias, vec![d]),
                    norm1_gain: add(format!("block.{b}.norm1.gain"), ParamKind::NormGain, vec![d]),
                    norm1_bias: add(format!("block.{b}.norm1.bias"), ParamKind::NormBias, vec![d]),
                    ffn_w1: add(format!("block.{b}.ffn.w1"), ParamKind::FfnIn, vec![d, config.ffn_dim]),
                    ffn_b1: add(format!("block.{b}.ffn.b1"), ParamKind::FfnInBias, vec![config.ffn_dim]),
                    ffn_w2: add(format!("block.{b}.ffn.w2"), ParamKind::FfnOut, vec![config.ffn_dim, d]),
                    ffn_b2: add(format!("block.{b}.ffn.b2"), ParamKind::FfnOutBias, vec![d]),
                    norm2_gain: add(format!("block.{b}.norm2.gain"), ParamKind::NormGain, vec![d]),
                    norm2_bias: add(format!("block.{b}.norm2.bias"), ParamKind::NormBias, vec![d]),
                }
            })
            .collect();
        let classifier_w = add("classifier.weight".into(), ParamKind::Classifier, vec![d, config.num_classes]);
        let classifier_b = add("classifier.bias".into(), ParamKind::ClassifierBias, vec![config.num_classes]);
        let scorer = with_scorer.then(|| add("scorer.weight".into(), ParamKind::Scorer, vec![d, 2]));
        Self {
            gnn,
            blocks,
            classifier_w,
            classifier_b,
            scorer,
            specs,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.specs[id].0
    }

    pub fn kind(&self, id: usize) -> ParamKind {
        self.specs[id].1
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.specs[id].2
    }

    pub fn size(&self, id: usize) -> usize {
        self.specs[id].2.iter().product()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.0 == name)
    }

    /// Parameter ids owned by a sublayer (removed when the sublayer is dropped).
    pub fn sublayer_ids(&self, s: Sublayer) -> Vec<usize> {
        match s {
            Sublayer::Gnn(i) => vec![self.gnn[i]],
            Sublayer::Mha(b) => self.blocks[b].mha_ids(),
            Sublayer::Ffn(b) => self.blocks[b].ffn_ids(),
        }
    }
}

/// All learnable tensors of the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Gaussian fan-in initialisation; norms start at gain 1, bias 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = (0..layout.len())
            .map(|id| init_tensor(layout.kind(id), layout.shape(id), &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    /// Adds the token-scorer weight, drawn from its own seed so the rest of
    /// the initialisation is untouched.
    pub fn add_token_scorer(&mut self, seed: u64) {
        if self.layout.scorer.is_some() {
            return;
        }
        self.layout = Layout::new(&self.config, true);
        let id = self.layout.scorer.expect("scorer slot");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.tensors
            .push(init_tensor(ParamKind::Scorer, self.layout.shape(id), &mut rng));
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint).
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let with_scorer = named.iter().any(|(n, _)| n == "scorer.weight");
        let layout = Layout::new(config, with_scorer);
        let mut slots: Vec<Option<Tensor>> = vec![None; layout.len()];
        for (name, t) in named {
            let Some(id) = layout.find(&name) else {
                return Err(ModelError::MissingParam(format!("unexpected tensor {name}")));
            };
            if t.shape() != layout.shape(id) {
                return Err(ModelError::ParamShape {
                    name,
                    expected: layout.shape(id).to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            slots[id] = Some(t);
        }
        let tensors = slots
            .into_iter()
            .enumerate()
            .map(|(id, t)| t.ok_or_else(|| ModelError::MissingParam(layout.name(id).to_owned())))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(id, t)| (self.layout.name(id), t))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Parameters that survive export under `state`: masked heads, dropped
    /// sublayers and weight-masked entries are not counted.
    pub fn active_count(&self, state: &PruneState) -> usize {
        flops::active_param_count(&self.config, &self.layout, state)
    }

    /// Records every tensor on `tape` as a gradient-carrying leaf, applying
    /// weight masks (`W' = M ⊙ W`) when given.
    pub fn bind(&self, tape: &mut Tape, masks: Option<&WeightMasks>) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(id, t)| match masks.and_then(|m| m.mask(id)) {
                Some(mask) => {
                    let mut eff = t.clone();
                    for (w, &keep) in eff.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *w = 0.0;
                        }
                    }
                    tape.param_owned(eff)
                }
                None => tape.param(t),
            })
            .collect()
    }
}

fn init_tensor(kind: ParamKind, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    match kind {
        ParamKind::NormGain => Tensor::filled(shape, 1.0),
        ParamKind::NormBias
        | ParamKind::OutBias
        | ParamKind::FfnInBias
        | ParamKind::FfnOutBias
        | ParamKind::ClassifierBias => Tensor::zeros(shape),
        _ => {
            let fan_in = shape[0].max(1) as f64;
            let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive std");
            let len = shape.iter().product();
            let data = (0..len).map(|_| normal.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        }
    }
}
