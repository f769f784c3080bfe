//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is known;
//! keys of a pruner other than the selected one are rejected, so a run
//! carries exactly one pruner.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Motif, SynthSpec};
use crate::model::{ModelConfig, StackStyle};
use crate::prune::{PruneSchedule, TokenPruneConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key}")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0}")]
    Unknown(String),
    #[error("key {key} belongs to the {owner} pruner but pruner = {active}")]
    WrongPruner { key: String, owner: String, active: String },
    #[error("bad value for {key}: {value:?} ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synth(SynthSpec),
    Jsonl { path: PathBuf, num_classes: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    RocAuc,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::RocAuc => "auc",
        })
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "auc" => Ok(Metric::RocAuc),
            _ => Err("expected accuracy or auc".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSpec {
    pub prune: TokenPruneConfig,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Draw selection noise once per (epoch, graph) instead of per forward.
    pub epoch_frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub sparsity: f64,
    pub prune_epoch: usize,
    pub regrow_interval: usize,
    pub regrow_fraction: f64,
    /// No regrowth from this epoch on.
    pub regrow_until: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    Greedy,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub sparsity: f64,
    pub keep_prob: f64,
    pub finalize_epoch: usize,
    pub selection: LayerSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrunerSpec {
    None,
    Token(TokenSpec),
    Head(HeadSpec),
    Layer(LayerSpec),
    Weight(PruneSchedule),
}

impl PrunerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PrunerSpec::None => "none",
            PrunerSpec::Token(_) => "token",
            PrunerSpec::Head(_) => "head",
            PrunerSpec::Layer(_) => "layer",
            PrunerSpec::Weight(_) => "weight",
        }
    }

    /// Headline sparsity (`1 − keep_ratio` for tokens).
    pub fn sparsity(&self) -> f64 {
        match self {
            PrunerSpec::None => 0.0,
            PrunerSpec::Token(t) => 1.0 - t.prune.keep_ratio,
            PrunerSpec::Head(h) => h.sparsity,
            PrunerSpec::Layer(l) => l.sparsity,
            PrunerSpec::Weight(w) => w.p_final,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// `input_dim` and `num_classes` are filled from the data at train time.
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub metric: Metric,
    pub pruner: PrunerSpec,
    pub out_dir: PathBuf,
    pub record: bool,
    pub run_dir_hashed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_str("").expect("defaults parse")
    }
}

const PRUNER_KEYS: &[(&str, &[&str])] = &[
    ("token", &["token.keep_ratio", "token.score_drop", "token.stages", "token.tau_start", "token.tau_end", "token.epoch_frozen"]),
    ("head", &["head.sparsity", "head.prune_epoch", "head.regrow_interval", "head.regrow_fraction", "head.regrow_until"]),
    ("layer", &["layer.sparsity", "layer.keep_prob", "layer.finalize_epoch", "layer.selection"]),
    ("weight", &["weight.p_final", "weight.p_initial", "weight.t0", "weight.steps", "weight.interval", "weight.regrow_fraction", "weight.regrow_until"]),
];

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                value: v.clone(),
                reason: e.to_string(),
            }),
        }
    }

    fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                value: v.clone(),
                reason: e.to_string(),
            }),
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| ConfigError::Value {
                key: key.into(),
                value: v.into(),
                reason: "expected comma-separated integers".into(),
            })
        })
        .collect()
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            });
        };
        let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            });
        }
        if map.insert(k.clone(), v).is_some() {
            return Err(ConfigError::Duplicate { line: i + 1, key: k });
        }
    }
    from_map(map)
}

fn from_map(map: BTreeMap<String, String>) -> Result<RunConfig> {
    let mut r = Reader { map };
    let dataset_kind: String = r.take("dataset", "synth".to_string())?;
    let dataset = if dataset_kind == "synth" {
        let d = SynthSpec::default();
        DatasetSource::Synth(SynthSpec {
            count: r.take("synth.count", d.count)?,
            n_min: r.take("synth.n_min", d.n_min)?,
            n_max: r.take("synth.n_max", d.n_max)?,
            feature_dim: r.take("synth.feature_dim", d.feature_dim)?,
            motif: r.take::<Motif>("synth.motif", d.motif)?,
            positive_fraction: r.take("synth.positive_fraction", d.positive_fraction)?,
            edge_prob: r.take("synth.edge_prob", d.edge_prob)?,
            walk_channels: r.take("synth.walk_channels", d.walk_channels)?,
            seed: r.take("synth.seed", d.seed)?,
        })
    } else {
        DatasetSource::Jsonl {
            path: PathBuf::from(&dataset_kind),
            num_classes: r.take_opt("num_classes")?,
        }
    };
    let d = ModelConfig::default();
    let hidden_dim: usize = r.take("model.hidden_dim", d.hidden_dim)?;
    let num_heads: usize = r.take("model.heads", d.num_heads)?;
    if num_heads == 0 || hidden_dim % num_heads != 0 {
        return Err(ConfigError::Invalid(format!(
            "model.hidden_dim {hidden_dim} is not divisible by model.heads {num_heads}"
        )));
    }
    let model = ModelConfig {
        input_dim: 1,
        num_gnn_layers: r.take("model.gnn_layers", d.num_gnn_layers)?,
        num_transformer_layers: r.take("model.transformer_layers", d.num_transformer_layers)?,
        hidden_dim,
        head_dim: hidden_dim / num_heads,
        num_heads,
        ffn_dim: r.take("model.ffn_dim", 2 * hidden_dim)?,
        num_classes: 2,
        stack_style: match r.take("model.stack", "prelude".to_string())?.as_str() {
            "prelude" => StackStyle::Prelude,
            "interleaved" => StackStyle::Interleaved,
            other => {
                return Err(ConfigError::Value {
                    key: "model.stack".into(),
                    value: other.into(),
                    reason: "expected prelude or interleaved".into(),
                })
            }
        },
        norm_eps: r.take("model.norm_eps", d.norm_eps)?,
    };
    let epochs: usize = r.take("train.epochs", 60)?;
    if epochs == 0 {
        return Err(ConfigError::Invalid("train.epochs must be at least 1".into()));
    }
    let e = epochs as f64;
    let pruner_name: String = r.take("pruner", "none".to_string())?;
    for (owner, keys) in PRUNER_KEYS {
        if *owner == pruner_name {
            continue;
        }
        if let Some(k) = keys.iter().find(|k| r.map.contains_key(**k)) {
            return Err(ConfigError::WrongPruner {
                key: (*k).into(),
                owner: (*owner).into(),
                active: pruner_name,
            });
        }
    }
    let pruner = match pruner_name.as_str() {
        "none" => PrunerSpec::None,
        "token" => {
            let d = TokenPruneConfig::default();
            let stages = match r.map.remove("token.stages") {
                Some(v) => parse_list("token.stages", &v)?,
                None => d.stages,
            };
            PrunerSpec::Token(TokenSpec {
                prune: TokenPruneConfig {
                    keep_ratio: r.take("token.keep_ratio", d.keep_ratio)?,
                    score_drop: r.take("token.score_drop", d.score_drop)?,
                    stages,
                },
                tau_start: r.take("token.tau_start", 1.0)?,
                tau_end: r.take("token.tau_end", 0.1)?,
                epoch_frozen: r.take("token.epoch_frozen", false)?,
            })
        }
        "head" => PrunerSpec::Head(HeadSpec {
            sparsity: r.take("head.sparsity", 0.5)?,
            prune_epoch: r.take("head.prune_epoch", (0.3 * e).round() as usize)?,
            regrow_interval: r.take("head.regrow_interval", ((0.1 * e).round() as usize).max(1))?,
            regrow_fraction: r.take("head.regrow_fraction", 0.1)?,
            regrow_until: r.take("head.regrow_until", (2.0 * e / 3.0).floor() as usize)?,
        }),
        "layer" => {
            let sparsity: f64 = r.take("layer.sparsity", 0.5)?;
            PrunerSpec::Layer(LayerSpec {
                sparsity,
                keep_prob: r.take("layer.keep_prob", 1.0 - sparsity)?,
                finalize_epoch: r.take("layer.finalize_epoch", (0.7 * e).round() as usize)?,
                selection: match r.take("layer.selection", "greedy".to_string())?.as_str() {
                    "greedy" => LayerSelection::Greedy,
                    "random" => LayerSelection::Random,
                    other => {
                        return Err(ConfigError::Value {
                            key: "layer.selection".into(),
                            value: other.into(),
                            reason: "expected greedy or random".into(),
                        })
                    }
                },
            })
        }
        "weight" => {
            let p_final: f64 = r.take("weight.p_final", 0.5)?;
            let d = PruneSchedule::for_epochs(p_final, epochs);
            PrunerSpec::Weight(PruneSchedule {
                p_initial: r.take("weight.p_initial", d.p_initial)?,
                p_final,
                t0: r.take("weight.t0", d.t0)?,
                steps: r.take("weight.steps", d.steps)?,
                interval: r.take("weight.interval", d.interval)?,
                regrow_fraction: r.take("weight.regrow_fraction", d.regrow_fraction)?,
                regrow_until: r.take("weight.regrow_until", d.regrow_until)?,
            })
        }
        other => {
            return Err(ConfigError::Value {
                key: "pruner".into(),
                value: other.into(),
                reason: "expected none, token, head, layer or weight".into(),
            })
        }
    };
    let cfg = RunConfig {
        dataset,
        valid_fraction: r.take("split.valid", 0.1)?,
        test_fraction: r.take("split.test", 0.2)?,
        split_seed: r.take("split.seed", 0)?,
        model,
        epochs,
        batch_size: r.take("train.batch_size", 32)?,
        lr: r.take("train.lr", 1e-3)?,
        seed: r.take("train.seed", 0)?,
        metric: r.take("train.metric", Metric::Accuracy)?,
        pruner,
        out_dir: PathBuf::from(r.take("output.dir", "runs".to_string())?),
        record: r.take("output.record", false)?,
        run_dir_hashed: r.take("output.hashed", true)?,
    };
    if let Some(k) = r.map.keys().next() {
        return Err(ConfigError::Unknown(k.clone()));
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        if !(self.valid_fraction >= 0.0 && self.test_fraction > 0.0 && self.valid_fraction + self.test_fraction < 1.0) {
            return bad("split fractions must leave a nonempty training split".into());
        }
        match &self.pruner {
            PrunerSpec::None => {}
            PrunerSpec::Token(t) => {
                t.prune.validate().map_err(ConfigError::Invalid)?;
                if !(t.tau_start > 0.0 && t.tau_end > 0.0) {
                    return bad("token temperatures must be positive".into());
                }
                if let Some(&s) = t.prune.stages.iter().find(|&&s| s >= self.model.num_transformer_layers) {
                    return bad(format!("token stage {s} beyond the last transformer block"));
                }
            }
            PrunerSpec::Head(h) => {
                if !(0.0..1.0).contains(&h.sparsity) || h.regrow_interval == 0 {
                    return bad("head.sparsity must be in [0, 1) and head.regrow_interval >= 1".into());
                }
            }
            PrunerSpec::Layer(l) => {
                if !(0.0..1.0).contains(&l.sparsity) || !(l.keep_prob > 0.0 && l.keep_prob <= 1.0) {
                    return bad("layer.sparsity must be in [0, 1) and layer.keep_prob in (0, 1]".into());
                }
            }
            PrunerSpec::Weight(w) => w.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?,
        }
        Ok(())
    }

    /// Every resolved setting as sorted `key → value` pairs.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        match &self.dataset {
            DatasetSource::Synth(s) => {
                put("dataset", "synth".into());
                put("synth.count", s.count.to_string());
                put("synth.n_min", s.n_min.to_string());
                put("synth.n_max", s.n_max.to_string());
                put("synth.feature_dim", s.feature_dim.to_string());
                put("synth.motif", s.motif.to_string());
                put("synth.positive_fraction", s.positive_fraction.to_string());
                put("synth.edge_prob", s.edge_prob.to_string());
                put("synth.walk_channels", s.walk_channels.to_string());
                put("synth.seed", s.seed.to_string());
            }
            DatasetSource::Jsonl { path, num_classes } => {
                put("dataset", path.display().to_string());
                if let Some(c) = num_classes {
                    put("num_classes", c.to_string());
                }
            }
        }
        put("split.valid", self.valid_fraction.to_string());
        put("split.test", self.test_fraction.to_string());
        put("split.seed", self.split_seed.to_string());
        put("model.gnn_layers", self.model.num_gnn_layers.to_string());
        put("model.transformer_layers", self.model.num_transformer_layers.to_string());
        put("model.hidden_dim", self.model.hidden_dim.to_string());
        put("model.heads", self.model.num_heads.to_string());
        put("model.ffn_dim", self.model.ffn_dim.to_string());
        put(
            "model.stack",
            match self.model.stack_style {
                StackStyle::Prelude => "prelude",
                StackStyle::Interleaved => "interleaved",
            }
            .into(),
        );
        put("model.norm_eps", self.model.norm_eps.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr", self.lr.to_string());
        put("train.seed", self.seed.to_string());
        put("train.metric", self.metric.to_string());
        put("pruner", self.pruner.name().into());
        match &self.pruner {
            PrunerSpec::None => {}
            PrunerSpec::Token(t) => {
                put("token.keep_ratio", t.prune.keep_ratio.to_string());
                put("token.score_drop", t.prune.score_drop.to_string());
                put(
                    "token.stages",
                    t.prune.stages.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
                );
                put("token.tau_start", t.tau_start.to_string());
                put("token.tau_end", t.tau_end.to_string());
                put("token.epoch_frozen", t.epoch_frozen.to_string());
            }
            PrunerSpec::Head(h) => {
                put("head.sparsity", h.sparsity.to_string());
                put("head.prune_epoch", h.prune_epoch.to_string());
                put("head.regrow_interval", h.regrow_interval.to_string());
                put("head.regrow_fraction", h.regrow_fraction.to_string());
                put("head.regrow_until", h.regrow_until.to_string());
            }
            PrunerSpec::Layer(l) => {
                put("layer.sparsity", l.sparsity.to_string());
                put("layer.keep_prob", l.keep_prob.to_string());
                put("layer.finalize_epoch", l.finalize_epoch.to_string());
                put(
                    "layer.selection",
                    match l.selection {
                        LayerSelection::Greedy => "greedy",
                        LayerSelection::Random => "random",
                    }
                    .into(),
                );
            }
            PrunerSpec::Weight(w) => {
                put("weight.p_final", w.p_final.to_string());
                put("weight.p_initial", w.p_initial.to_string());
                put("weight.t0", w.t0.to_string());
                put("weight.steps", w.steps.to_string());
                put("weight.interval", w.interval.to_string());
                put("weight.regrow_fraction", w.regrow_fraction.to_string());
                put("weight.regrow_until", w.regrow_until.to_string());
            }
        }
        put("output.dir", self.out_dir.display().to_string());
        put("output.record", self.record.to_string());
        put("output.hashed", self.run_dir_hashed.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the resolved settings, excluding where outputs go.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if k.starts_with("output.") {
                continue;
            }
            h.update(format!("{k}={v}\n"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        if self.run_dir_hashed {
            self.out_dir.join(format!("run-{}", &self.hash()[..12]))
        } else {
            self.out_dir.clone()
        }
    }

    pub fn with_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        from_map(pairs.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        assert_eq!(c.pruner, PrunerSpec::None);
        let back = parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn pruner_keys_must_match_pruner() {
        let err = parse_str("pruner = head\nweight.p_final = 0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::WrongPruner { .. }), "{err}");
        let err = parse_str("head.sparsity = 0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::WrongPruner { .. }), "{err}");
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(parse_str("nope = 1").unwrap_err(), ConfigError::Unknown(_)));
        assert!(matches!(
            parse_str("train.seed = 1\ntrain.seed = 2").unwrap_err(),
            ConfigError::Duplicate { line: 2, .. }
        ));
        assert!(matches!(parse_str("just words").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(parse_str("train.epochs = ten").unwrap_err(), ConfigError::Value { .. }));
    }

    #[test]
    fn pruner_defaults_follow_epochs() {
        let c = parse_str("train.epochs = 50\npruner = weight\nweight.p_final = 0.5\n").unwrap();
        let PrunerSpec::Weight(w) = c.pruner else { panic!() };
        assert_eq!(w.t0, 5.0);
        assert_eq!(w.steps as f64 * w.interval, 30.0);
        assert_eq!(w.regrow_until, 40.0);
        let c = parse_str("train.epochs = 50\npruner = token\ntoken.stages = 0, 2\n").unwrap();
        let PrunerSpec::Token(t) = c.pruner else { panic!() };
        assert_eq!(t.prune.stages, vec![0, 2]);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = parse_str("output.dir = a").unwrap();
        let b = parse_str("output.dir = b").unwrap();
        let c = parse_str("train.seed = 3").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert!(a.run_dir().starts_with("a"));
    }
}
