//! Graph-classification data: validated graphs, JSONL ingestion, synthetic
//! motif datasets, splits and padded batches.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("asymmetric at ({0},{1})")]
    Asymmetric(usize, usize),
    #[error("adjacency entry ({0},{1}) is not 0 or 1")]
    NonBinary(usize, usize),
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("edge ({0},{1}) must satisfy i < j < n")]
    BadEdge(usize, usize),
    #[error("duplicate edge ({0},{1})")]
    DuplicateEdge(usize, usize),
    #[error("expected {expected} feature rows, got {got}")]
    FeatureRows { expected: usize, got: usize },
    #[error("feature width {got} differs from {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: i64, classes: usize },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<GraphError>,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("could not sample a motif-free graph after {0} attempts")]
    Infeasible(usize),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("split {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Undirected graph with node features and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    adjacency: Vec<bool>,
    features: Tensor,
    label: usize,
    split_hint: Option<Split>,
}

impl Graph {
    /// Builds a graph from a dense 0/1 adjacency matrix.
    pub fn from_adjacency(adjacency: &[Vec<u8>], features: Tensor, label: usize) -> Result<Self> {
        let n = adjacency.len();
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(GraphError::Param(format!(
                    "adjacency row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
        }
        let mut adj = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = adjacency[i][j];
                if v > 1 {
                    return Err(GraphError::NonBinary(i, j));
                }
                if v != adjacency[j][i] {
                    let (a, b) = if i < j { (i, j) } else { (j, i) };
                    return Err(GraphError::Asymmetric(a, b));
                }
                if i == j && v == 1 {
                    return Err(GraphError::SelfLoop(i));
                }
                adj[i * n + j] = v == 1;
            }
        }
        Self::checked(n, adj, features, label)
    }

    /// Builds a graph from undirected `i < j` edge pairs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], features: Tensor, label: usize) -> Result<Self> {
        let mut adj = vec![false; n * n];
        for &(i, j) in edges {
            if i >= j || j >= n {
                return Err(GraphError::BadEdge(i, j));
            }
            if adj[i * n + j] {
                return Err(GraphError::DuplicateEdge(i, j));
            }
            adj[i * n + j] = true;
            adj[j * n + i] = true;
        }
        Self::checked(n, adj, features, label)
    }

    fn checked(n: usize, adjacency: Vec<bool>, features: Tensor, label: usize) -> Result<Self> {
        if features.rows() != n || features.shape().len() != 2 {
            return Err(GraphError::FeatureRows {
                expected: n,
                got: features.rows(),
            });
        }
        Ok(Self {
            n,
            adjacency,
            features,
            label,
            split_hint: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn split_hint(&self) -> Option<Split> {
        self.split_hint
    }

    pub fn with_split_hint(mut self, split: Option<Split>) -> Self {
        self.split_hint = split;
        self
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.has_edge(i, j)).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&b| b).count() / 2
    }

    /// Same graph with nodes relabelled: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.n;
        let mut adj = vec![false; n * n];
        let d = self.feature_dim();
        let mut feats = vec![0.0; n * d];
        for a in 0..n {
            for b in 0..n {
                adj[a * n + b] = self.has_edge(perm[a], perm[b]);
            }
            feats[a * d..(a + 1) * d].copy_from_slice(self.features.row(perm[a]));
        }
        Graph {
            n,
            adjacency: adj,
            features: Tensor::matrix(n, d, feats).expect("shape preserved"),
            label: self.label,
            split_hint: self.split_hint,
        }
    }

    /// Pads to `n_max` nodes; padded rows are zero and invalid.
    pub fn to_padded(&self, n_max: usize) -> PaddedGraph {
        assert!(n_max >= self.n, "cannot pad {} nodes to {n_max}", self.n);
        let d = self.feature_dim();
        let mut adjacency = vec![0.0; n_max * n_max];
        let mut features = vec![0.0; n_max * d];
        for i in 0..self.n {
            for j in 0..self.n {
                if self.has_edge(i, j) {
                    adjacency[i * n_max + j] = 1.0;
                }
            }
            features[i * d..(i + 1) * d].copy_from_slice(self.features.row(i));
        }
        let mut validity = vec![false; n_max];
        validity[..self.n].fill(true);
        PaddedGraph {
            n_valid: self.n,
            adjacency,
            features: Tensor::matrix(n_max, d, features).expect("padded shape"),
            validity,
            label: self.label,
        }
    }

    fn to_record(&self) -> GraphRecord {
        GraphRecord {
            n: self.n,
            edges: Some(self.edges().into_iter().map(|(i, j)| [i, j]).collect()),
            adj: None,
            x: self.features.to_rows(),
            y: self.label as i64,
            split: self.split_hint,
        }
    }
}

/// A graph laid out in an `n_max`-node frame with a per-node validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedGraph {
    pub n_valid: usize,
    /// Row-major `n_max × n_max` 0/1 adjacency (no self-loops).
    pub adjacency: Vec<f64>,
    pub features: Tensor,
    pub validity: Vec<bool>,
    pub label: usize,
}

impl PaddedGraph {
    pub fn n_frame(&self) -> usize {
        self.validity.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub graphs: Vec<PaddedGraph>,
    pub labels: Vec<usize>,
    /// Position of each graph in the list the batch was drawn from.
    pub indices: Vec<usize>,
    pub n_max: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

/// Splits `graphs` into padded batches, optionally shuffled with a seed.
pub fn make_batches(graphs: &[Graph], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    let all: Vec<usize> = (0..graphs.len()).collect();
    make_batches_from(graphs, &all, batch_size, shuffle_seed)
}

/// As [`make_batches`] over the subset `indices` of `graphs`.
pub fn make_batches_from(
    graphs: &[Graph],
    indices: &[usize],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order = indices.to_vec();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let n_max = chunk.iter().map(|&i| graphs[i].n()).max().unwrap_or(0);
            Batch {
                graphs: chunk.iter().map(|&i| graphs[i].to_padded(n_max)).collect(),
                labels: chunk.iter().map(|&i| graphs[i].label()).collect(),
                indices: chunk.to_vec(),
                n_max,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphRecord {
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adj: Option<Vec<Vec<u8>>>,
    x: Vec<Vec<f64>>,
    y: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn record_to_graph(rec: GraphRecord, num_classes: Option<usize>, width: &mut Option<usize>) -> Result<Graph> {
    if rec.y < 0 || num_classes.is_some_and(|c| rec.y as usize >= c) {
        return Err(GraphError::Label {
            label: rec.y,
            classes: num_classes.unwrap_or(0),
        });
    }
    if rec.x.len() != rec.n {
        return Err(GraphError::FeatureRows {
            expected: rec.n,
            got: rec.x.len(),
        });
    }
    let d = rec.x.first().map_or(0, Vec::len);
    let expected = *width.get_or_insert(d);
    for row in &rec.x {
        if row.len() != expected {
            return Err(GraphError::FeatureWidth {
                expected,
                got: row.len(),
            });
        }
    }
    let features = Tensor::matrix(rec.n, expected, rec.x.concat()).map_err(|e| GraphError::Param(e.to_string()))?;
    let graph = match (rec.edges, rec.adj) {
        (_, Some(adj)) => {
            if adj.len() != rec.n {
                return Err(GraphError::Param(format!("adjacency has {} rows, n = {}", adj.len(), rec.n)));
            }
            Graph::from_adjacency(&adj, features, rec.y as usize)?
        }
        (edges, None) => {
            let edges: Vec<(usize, usize)> = edges.unwrap_or_default().into_iter().map(|[i, j]| (i, j)).collect();
            Graph::from_edges(rec.n, &edges, features, rec.y as usize)?
        }
    };
    Ok(graph.with_split_hint(rec.split))
}

/// Reads one graph per line. Blank lines are skipped.
pub fn parse_jsonl(reader: impl BufRead, num_classes: Option<usize>) -> Result<Vec<Graph>> {
    let mut out = Vec::new();
    let mut width = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let g = record_to_graph(rec, num_classes, &mut width).map_err(|e| GraphError::Line {
            line: line_no,
            source: Box::new(e),
        })?;
        out.push(g);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, num_classes: Option<usize>) -> Result<Vec<Graph>> {
    let f = fs::File::open(path)?;
    parse_jsonl(BufReader::new(f), num_classes)
}

pub fn to_jsonl(graphs: &[Graph]) -> String {
    let mut s = String::new();
    for g in graphs {
        s.push_str(&serde_json::to_string(&g.to_record()).expect("record serialises"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(graphs: &[Graph], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(graphs).as_bytes())?;
    Ok(())
}

/// Hex SHA-256 of the canonical JSONL encoding.
pub fn dataset_hash(graphs: &[Graph]) -> String {
    let digest = Sha256::digest(to_jsonl(graphs).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn num_classes(graphs: &[Graph]) -> usize {
    graphs.iter().map(|g| g.label() + 1).max().unwrap_or(0)
}

/// Train/validation/test indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Seeded random split with the given validation and test fractions.
    pub fn random(count: usize, valid_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || valid_fraction + test_fraction >= 1.0
        {
            return Err(GraphError::Param(format!(
                "split fractions valid={valid_fraction} test={test_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * count as f64).round() as usize;
        let n_valid = (valid_fraction * count as f64).round() as usize;
        let test = order[..n_test].to_vec();
        let valid = order[n_test..n_test + n_valid].to_vec();
        let train = order[n_test + n_valid..].to_vec();
        Ok(Self { train, valid, test, seed })
    }

    /// Uses per-graph split tags when every graph carries one.
    pub fn from_hints(graphs: &[Graph]) -> Option<Self> {
        let mut split = Self {
            train: vec![],
            valid: vec![],
            test: vec![],
            seed: 0,
        };
        for (i, g) in graphs.iter().enumerate() {
            match g.split_hint()? {
                Split::Train => split.train.push(i),
                Split::Valid => split.valid.push(i),
                Split::Test => split.test.push(i),
            }
        }
        Some(split)
    }

    /// Checks the three lists are disjoint and cover `0..count`.
    pub fn validate(&self, count: usize) -> Result<()> {
        let mut seen = vec![false; count];
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= count {
                return Err(GraphError::Split(format!("index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(GraphError::Split(format!("index {i} appears twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GraphError::Split(format!("index {missing} is not covered")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motif {
    Triangle,
    Clique4,
}

impl Motif {
    pub fn size(self) -> usize {
        match self {
            Motif::Triangle => 3,
            Motif::Clique4 => 4,
        }
    }
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motif::Triangle => "triangle",
            Motif::Clique4 => "clique4",
        })
    }
}

impl std::str::FromStr for Motif {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangle" => Ok(Motif::Triangle),
            "clique4" => Ok(Motif::Clique4),
            other => Err(GraphError::Param(format!("unknown motif {other:?}"))),
        }
    }
}

/// Exhaustive search for a clique of the motif's size.
pub fn contains_motif(g: &Graph, motif: Motif) -> bool {
    let n = g.n();
    let e = |a: usize, b: usize| g.has_edge(a, b);
    for i in 0..n {
        for j in i + 1..n {
            if !e(i, j) {
                continue;
            }
            for k in j + 1..n {
                if !(e(i, k) && e(j, k)) {
                    continue;
                }
                match motif {
                    Motif::Triangle => return true,
                    Motif::Clique4 => {
                        if (k + 1..n).any(|l| e(i, l) && e(j, l) && e(k, l)) {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}

/// Parameters of the synthetic motif-detection dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Node feature width: random-walk return probabilities first, then
    /// standard-normal noise channels.
    pub feature_dim: usize,
    pub motif: Motif,
    pub positive_fraction: f64,
    pub edge_prob: f64,
    /// Number of leading random-walk channels (steps 2, 3, ...).
    pub walk_channels: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 500,
            n_min: 8,
            n_max: 20,
            feature_dim: 8,
            motif: Motif::Triangle,
            positive_fraction: 0.5,
            edge_prob: 0.15,
            walk_channels: 3,
            seed: 0,
        }
    }
}

const NEGATIVE_RETRIES: usize = 2000;

fn sample_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Diagonal of the random-walk matrix `(D⁻¹A)^k` for `k = 2..2+channels`.
pub fn walk_return_features(g: &Graph, channels: usize) -> Vec<Vec<f64>> {
    let n = g.n();
    let deg: Vec<f64> = (0..n).map(|i| g.degree(i) as f64).collect();
    let mut rw = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if g.has_edge(i, j) {
                rw[i * n + j] = 1.0 / deg[i];
            }
        }
    }
    let mut power = rw.clone();
    let mut out = vec![Vec::with_capacity(channels); n];
    for _ in 0..channels {
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = power[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += a * rw[k * n + j];
                }
            }
        }
        power = next;
        for (i, row) in out.iter_mut().enumerate() {
            row.push(power[i * n + i]);
        }
    }
    out
}

fn synth_features(rng: &mut ChaCha8Rng, g: &Graph, spec: &SynthSpec) -> Tensor {
    let walk = spec.walk_channels.min(spec.feature_dim);
    let walks = walk_return_features(g, walk);
    let mut data = Vec::with_capacity(g.n() * spec.feature_dim);
    for row in walks {
        data.extend_from_slice(&row);
        for _ in walk..spec.feature_dim {
            data.push(rng.sample::<f64, _>(StandardNormal));
        }
    }
    Tensor::matrix(g.n(), spec.feature_dim, data).expect("feature shape")
}

/// Generates a labelled motif-detection dataset; label 1 iff the motif occurs.
pub fn synth_motif_dataset(spec: &SynthSpec) -> Result<Vec<Graph>> {
    let m = spec.motif.size();
    if spec.n_min < m || spec.n_max < spec.n_min {
        return Err(GraphError::Param(format!(
            "node range [{}, {}] cannot hold a {}-node motif",
            spec.n_min, spec.n_max, m
        )));
    }
    if !(spec.positive_fraction > 0.0 && spec.positive_fraction < 1.0) {
        return Err(GraphError::Param("positive_fraction must lie in (0, 1)".into()));
    }
    if spec.feature_dim == 0 {
        return Err(GraphError::Param("feature_dim must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let positives = (spec.positive_fraction * spec.count as f64).round() as usize;
    let mut labels: Vec<usize> = (0..spec.count).map(|i| usize::from(i < positives)).collect();
    labels.shuffle(&mut rng);
    let mut out = Vec::with_capacity(spec.count);
    for label in labels {
        let n = rng.random_range(spec.n_min..=spec.n_max);
        let structure = if label == 1 {
            let mut edges: BTreeSet<(usize, usize)> = sample_edges(&mut rng, n, spec.edge_prob).into_iter().collect();
            let mut nodes: Vec<usize> = (0..n).collect();
            nodes.shuffle(&mut rng);
            let mut planted = nodes[..m].to_vec();
            planted.sort_unstable();
            for a in 0..m {
                for b in a + 1..m {
                    edges.insert((planted[a], planted[b]));
                }
            }
            let edges: Vec<_> = edges.into_iter().collect();
            let placeholder = Tensor::zeros(&[n, 0]);
            Graph::from_edges(n, &edges, placeholder, 1)?
        } else {
            let mut found = None;
            for _ in 0..NEGATIVE_RETRIES {
                let edges = sample_edges(&mut rng, n, spec.edge_prob);
                let g = Graph::from_edges(n, &edges, Tensor::zeros(&[n, 0]), 0)?;
                if !contains_motif(&g, spec.motif) {
                    found = Some(g);
                    break;
                }
            }
            found.ok_or(GraphError::Infeasible(NEGATIVE_RETRIES))?
        };
        let features = synth_features(&mut rng, &structure, spec);
        let g = Graph { features, ..structure };
        debug_assert_eq!(contains_motif(&g, spec.motif), g.label == 1);
        out.push(g);
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn parse_num<T: std::str::FromStr>(s: &str, file: &str, line: usize) -> Result<T> {
    s.trim().parse().map_err(|_| GraphError::Parse {
        line,
        message: format!("{file}: cannot parse {s:?}"),
    })
}

/// Converts a TU-format directory (`<DS>_A.txt`, `<DS>_graph_indicator.txt`,
/// `<DS>_graph_labels.txt`, optional `<DS>_node_labels.txt` /
/// `<DS>_node_attributes.txt`) into graphs. Node labels become one-hot
/// features, attributes are used verbatim, otherwise a constant feature.
/// Duplicate directed edges are merged and self-loops dropped; graph labels
/// are remapped to `0..C` in sorted order.
pub fn convert_tu(dir: &Path) -> Result<Vec<Graph>> {
    let prefix = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|s| s.strip_suffix("_A.txt")).map(str::to_owned))
        .next()
        .ok_or_else(|| GraphError::Param(format!("no *_A.txt file in {}", dir.display())))?;
    let file = |suffix: &str| dir.join(format!("{prefix}_{suffix}.txt"));

    let indicator: Vec<usize> = read_lines(&file("graph_indicator"))?
        .iter()
        .enumerate()
        .map(|(i, l)| parse_num(l, "graph_indicator", i + 1))
        .collect::<Result<_>>()?;
    let raw_labels: Vec<i64> = read_lines(&file("graph_labels"))?
        .iter()
        .enumerate()
        .map(|(i, l)| parse_num(l, "graph_labels", i + 1))
        .collect::<Result<_>>()?;
    let label_map: BTreeMap<i64, usize> = raw_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let graph_count = raw_labels.len();
    let total_nodes = indicator.len();

    let features: Vec<Vec<f64>> = if file("node_attributes").exists() {
        read_lines(&file("node_attributes"))?
            .iter()
            .enumerate()
            .map(|(i, l)| l.split(',').map(|v| parse_num(v, "node_attributes", i + 1)).collect())
            .collect::<Result<_>>()?
    } else if file("node_labels").exists() {
        let labels: Vec<i64> = read_lines(&file("node_labels"))?
            .iter()
            .enumerate()
            .map(|(i, l)| parse_num(l, "node_labels", i + 1))
            .collect::<Result<_>>()?;
        let kinds: BTreeMap<i64, usize> = labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect();
        labels
            .iter()
            .map(|l| {
                let mut row = vec![0.0; kinds.len()];
                row[kinds[l]] = 1.0;
                row
            })
            .collect()
    } else {
        vec![vec![1.0]; total_nodes]
    };
    if features.len() != total_nodes {
        return Err(GraphError::FeatureRows {
            expected: total_nodes,
            got: features.len(),
        });
    }

    // global node id (0-based) -> (graph, local id)
    let mut local = vec![(0usize, 0usize); total_nodes];
    let mut sizes = vec![0usize; graph_count];
    for (node, &gid) in indicator.iter().enumerate() {
        if gid == 0 || gid > graph_count {
            return Err(GraphError::Parse {
                line: node + 1,
                message: format!("graph_indicator: graph id {gid} out of range"),
            });
        }
        local[node] = (gid - 1, sizes[gid - 1]);
        sizes[gid - 1] += 1;
    }
    let mut edges: Vec<HashSet<(usize, usize)>> = vec![HashSet::new(); graph_count];
    for (i, l) in read_lines(&file("A"))?.iter().enumerate() {
        let mut parts = l.split(',');
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            return Err(GraphError::Parse {
                line: i + 1,
                message: "A: expected 'i, j'".into(),
            });
        };
        let a: usize = parse_num(a, "A", i + 1)?;
        let b: usize = parse_num(b, "A", i + 1)?;
        if a == 0 || b == 0 || a > total_nodes || b > total_nodes {
            return Err(GraphError::Parse {
                line: i + 1,
                message: format!("A: node id out of range ({a}, {b})"),
            });
        }
        let ((ga, la), (gb, lb)) = (local[a - 1], local[b - 1]);
        if ga != gb {
            return Err(GraphError::Parse {
                line: i + 1,
                message: "A: edge spans two graphs".into(),
            });
        }
        if la != lb {
            edges[ga].insert((la.min(lb), la.max(lb)));
        }
    }
    let width = features.first().map_or(1, Vec::len);
    let mut node_rows: Vec<Vec<f64>> = vec![Vec::new(); graph_count];
    for (node, row) in features.into_iter().enumerate() {
        node_rows[local[node].0].extend(row);
    }
    let mut out = Vec::with_capacity(graph_count);
    for gid in 0..graph_count {
        let mut e: Vec<_> = edges[gid].iter().copied().collect();
        e.sort_unstable();
        let feats = Tensor::matrix(sizes[gid], width, std::mem::take(&mut node_rows[gid]))
            .map_err(|err| GraphError::Param(err.to_string()))?;
        out.push(Graph::from_edges(sizes[gid], &e, feats, label_map[&raw_labels[gid]])?);
    }
    Ok(out)
}
