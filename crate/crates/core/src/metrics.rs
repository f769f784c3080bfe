//! Redundancy diagnostics over recorded activations: attention profiles,
//! head-to-head distances (Jensen-Shannon and distance correlation) and
//! layer-to-layer linear CKA.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Representation;
use crate::tensor::Tensor;

/// Row sums must be within this of 1.
pub const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("row {row} has a negative or non-finite entry")]
    BadEntry { row: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("nothing to compare")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Attention probabilities of one head on one graph, valid nodes only.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub graph: usize,
    pub block: usize,
    pub head: usize,
    pub probs: Tensor,
    /// Original node id of each row and column.
    pub nodes: Vec<usize>,
}

impl AttentionRecord {
    /// Checks the row-stochastic invariant.
    pub fn check(&self) -> Result<()> {
        if self.probs.rows() != self.nodes.len() || self.probs.cols() != self.nodes.len() {
            return Err(MetricError::Shape(format!(
                "attention {:?} with {} nodes",
                self.probs.shape(),
                self.nodes.len()
            )));
        }
        check_rows(&self.probs)
    }
}

pub fn check_rows(p: &Tensor) -> Result<()> {
    for r in 0..p.rows() {
        let row = p.row(r);
        if row.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(MetricError::BadEntry { row: r });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(MetricError::NotNormalized { row: r, sum });
        }
    }
    Ok(())
}

/// Received attention of every token: column means over the rows of one
/// record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub graph: usize,
    pub block: usize,
    pub head: usize,
    pub nodes: Vec<usize>,
    pub received: Vec<f64>,
}

pub fn attention_profile(records: &[AttentionRecord]) -> Vec<AttentionProfile> {
    records
        .iter()
        .map(|r| {
            let n = r.probs.rows();
            let mut received = vec![0.0; r.probs.cols()];
            for i in 0..n {
                for (acc, &x) in received.iter_mut().zip(r.probs.row(i)) {
                    *acc += x;
                }
            }
            if n > 0 {
                received.iter_mut().for_each(|x| *x /= n as f64);
            }
            AttentionProfile {
                graph: r.graph,
                block: r.block,
                head: r.head,
                nodes: r.nodes.clone(),
                received,
            }
        })
        .collect()
}

/// Long-format CSV: graph, block, head, node, received.
pub fn profiles_csv(profiles: &[AttentionProfile]) -> String {
    let mut out = String::from("graph,block,head,node,received\n");
    for p in profiles {
        for (node, v) in p.nodes.iter().zip(&p.received) {
            let _ = writeln!(out, "{},{},{},{},{}", p.graph, p.block, p.head, node, v);
        }
    }
    out
}

fn kl_bits(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).log2())
        .sum()
}

/// Jensen-Shannon divergence in bits between two distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MetricError::Shape(format!("{} vs {} entries", p.len(), q.len())));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = 0.5 * kl_bits(p, &m) + 0.5 * kl_bits(q, &m);
    Ok(d.clamp(0.0, 1.0))
}

/// Mean over rows of the square-rooted divergence.
pub fn js_distance_rows(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    check_rows(a)?;
    check_rows(b)?;
    if a.rows() == 0 {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for r in 0..a.rows() {
        total += js_divergence(a.row(r), b.row(r))?.sqrt();
    }
    Ok(total / a.rows() as f64)
}

/// Per-graph row-averaged distance, then the mean over graphs.
pub fn js_distance(head_a: &[Tensor], head_b: &[Tensor]) -> Result<f64> {
    if head_a.len() != head_b.len() {
        return Err(MetricError::Shape(format!("{} vs {} graphs", head_a.len(), head_b.len())));
    }
    if head_a.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (a, b) in head_a.iter().zip(head_b) {
        total += js_distance_rows(a, b)?;
    }
    Ok(total / head_a.len() as f64)
}

fn centered_distances(samples: &[&[f64]]) -> Vec<f64> {
    let n = samples.len();
    let mut d = vec![0.0; n * n];
    for j in 0..n {
        for k in j + 1..n {
            let dist = samples[j]
                .iter()
                .zip(samples[k])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[j * n + k] = dist;
            d[k * n + j] = dist;
        }
    }
    let row_means: Vec<f64> = (0..n).map(|j| d[j * n..(j + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for j in 0..n {
        for k in 0..n {
            d[j * n + k] -= row_means[j] + row_means[k] - grand;
        }
    }
    d
}

/// Sample distance correlation between paired observations `x[i]`, `y[i]`.
/// A constant sample has no distance variance; that case returns 0 and logs a
/// warning.
pub fn distance_correlation(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::Shape(format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFewSamples { needed: 2, got: x.len() });
    }
    let xs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let ys: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
    let a = centered_distances(&xs);
    let b = centered_distances(&ys);
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let cov = dot(&a, &b);
    let var_x = dot(&a, &a);
    let var_y = dot(&b, &b);
    let denom = (var_x * var_y).sqrt();
    if denom <= 0.0 {
        log::warn!("distance correlation of a constant sample; reporting 0");
        return Ok(0.0);
    }
    Ok((cov.max(0.0) / denom).sqrt().clamp(0.0, 1.0))
}

/// Within each graph the attention rows are the paired observations; the
/// per-graph correlations are averaged. Graphs with fewer than two valid
/// nodes are skipped.
pub fn dcor(head_a: &[Tensor], head_b: &[Tensor]) -> Result<f64> {
    if head_a.len() != head_b.len() {
        return Err(MetricError::Shape(format!("{} vs {} graphs", head_a.len(), head_b.len())));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (a, b) in head_a.iter().zip(head_b) {
        if a.shape() != b.shape() {
            return Err(MetricError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        if a.rows() < 2 {
            continue;
        }
        total += distance_correlation(&a.to_rows(), &b.to_rows())?;
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::TooFewSamples { needed: 2, got: 0 });
    }
    Ok(total / used as f64)
}

fn centered_columns(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    for c in 0..d {
        let mean = (0..n).map(|r| out[r * d + c]).sum::<f64>() / n as f64;
        for r in 0..n {
            out[r * d + c] -= mean;
        }
    }
    out
}

/// `‖AᵀB‖_F²` for row-major `A` (n×p) and `B` (n×q).
fn cross_frobenius_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut m = vec![0.0; p * q];
    for r in 0..n {
        let ar = &a[r * p..(r + 1) * p];
        let br = &b[r * q..(r + 1) * q];
        for (i, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut m[i * q..(i + 1) * q];
            for (acc, &y) in row.iter_mut().zip(br) {
                *acc += x * y;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA between two representations of the same samples (rows).
/// A zero-norm denominator returns 0 and logs a warning.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let n = x.rows();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let (p, q) = (x.cols(), y.cols());
    let xc = centered_columns(x);
    let yc = centered_columns(y);
    let num = cross_frobenius_sq(&yc, q, &xc, p, n);
    let xx = cross_frobenius_sq(&xc, p, &xc, p, n).sqrt();
    let yy = cross_frobenius_sq(&yc, q, &yc, q, n).sqrt();
    let denom = xx * yy;
    if denom <= 0.0 {
        log::warn!("linear CKA with a zero-norm representation; reporting 0");
        return Ok(0.0);
    }
    Ok((num / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RedundancyMetric {
    Js,
    Dcor,
    Cka,
}

impl RedundancyMetric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Js => "js",
            Self::Dcor => "dcor",
            Self::Cka => "cka",
        }
    }
}

/// Symmetric labelled matrix. JS and dCor hold distances (zero diagonal),
/// CKA holds similarities (unit diagonal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyMatrix {
    pub metric: RedundancyMetric,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Number of graphs the entries were averaged over.
    pub graphs: usize,
}

impl RedundancyMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..n).all(|j| self.values[i][j] == self.values[j][i]))
    }

    /// Comment header with the metric and graph count, then a labelled grid.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# metric={} graphs={}\n", self.metric.name(), self.graphs);
        out.push_str("label");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self, title: &str) -> String {
        heatmap_svg(title, &self.labels, &self.values)
    }
}

/// Fills a symmetric matrix from a pairwise function over the upper triangle.
fn symmetric(n: usize, diag: f64, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    let mut v = vec![vec![diag; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let x = f(i, j)?;
            v[i][j] = x;
            v[j][i] = x;
        }
    }
    Ok(v)
}

/// Renormalized sub-distribution over the given positions.
fn restrict_attention(r: &AttentionRecord, keep: &[usize]) -> Tensor {
    let pos: BTreeMap<usize, usize> = r.nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let idx: Vec<usize> = keep.iter().map(|n| pos[n]).collect();
    let mut rows = Vec::with_capacity(idx.len());
    for &i in &idx {
        let mut row: Vec<f64> = idx.iter().map(|&j| r.probs.get(i, j)).collect();
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row = vec![1.0 / idx.len() as f64; idx.len()];
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(&[0, 0]))
}

/// Pairwise head distances over every recorded (block, head). When two heads
/// saw different node sets (token pruning between their blocks), both are
/// compared on the shared nodes with rows renormalized.
pub fn head_redundancy(records: &[AttentionRecord], metric: RedundancyMetric) -> Result<RedundancyMatrix> {
    if metric == RedundancyMetric::Cka {
        return Err(MetricError::Shape("CKA is a layer metric".into()));
    }
    let mut by_head: BTreeMap<(usize, usize), BTreeMap<usize, &AttentionRecord>> = BTreeMap::new();
    for r in records {
        r.check()?;
        by_head.entry((r.block, r.head)).or_default().insert(r.graph, r);
    }
    if by_head.is_empty() {
        return Err(MetricError::Empty);
    }
    let heads: Vec<(usize, usize)> = by_head.keys().copied().collect();
    let graphs: BTreeSet<usize> = records.iter().map(|r| r.graph).collect();
    let values = symmetric(heads.len(), 0.0, |i, j| {
        let (ga, gb) = (&by_head[&heads[i]], &by_head[&heads[j]]);
        let mut xa = Vec::new();
        let mut xb = Vec::new();
        for (g, ra) in ga {
            let Some(rb) = gb.get(g) else { continue };
            if ra.nodes == rb.nodes {
                xa.push(ra.probs.clone());
                xb.push(rb.probs.clone());
            } else {
                let sb: BTreeSet<usize> = rb.nodes.iter().copied().collect();
                let shared: Vec<usize> = ra.nodes.iter().copied().filter(|n| sb.contains(n)).collect();
                if shared.is_empty() {
                    continue;
                }
                xa.push(restrict_attention(ra, &shared));
                xb.push(restrict_attention(rb, &shared));
            }
        }
        match metric {
            RedundancyMetric::Js => js_distance(&xa, &xb),
            _ => dcor(&xa, &xb).map(|c| 1.0 - c),
        }
    })?;
    Ok(RedundancyMatrix {
        metric,
        labels: heads.iter().map(|(b, h)| format!("b{b}h{h}")).collect(),
        values,
        graphs: graphs.len(),
    })
}

/// Pairwise CKA between sublayer outputs. `per_graph[g]` holds the recorded
/// representations of graph `g`; samples are the nodes both positions saw,
/// concatenated over graphs.
pub fn layer_similarity(per_graph: &[Vec<Representation>], names: &[String]) -> Result<RedundancyMatrix> {
    let positions: BTreeSet<usize> = per_graph.iter().flatten().map(|r| r.sublayer).collect();
    if positions.is_empty() {
        return Err(MetricError::Empty);
    }
    let positions: Vec<usize> = positions.into_iter().collect();
    let find = |g: &[Representation], p: usize| g.iter().find(|r| r.sublayer == p).cloned();
    let values = symmetric(positions.len(), 1.0, |i, j| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for g in per_graph {
            let (Some(a), Some(b)) = (find(g, positions[i]), find(g, positions[j])) else {
                continue;
            };
            let pos_b: BTreeMap<usize, usize> = b.nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
            for (ra, n) in a.nodes.iter().enumerate() {
                if let Some(&rb) = pos_b.get(n) {
                    xs.push(a.value.row(ra).to_vec());
                    ys.push(b.value.row(rb).to_vec());
                }
            }
        }
        if xs.is_empty() {
            return Err(MetricError::Empty);
        }
        let x = Tensor::from_rows(&xs).map_err(|e| MetricError::Shape(e.to_string()))?;
        let y = Tensor::from_rows(&ys).map_err(|e| MetricError::Shape(e.to_string()))?;
        linear_cka(&x, &y)
    })?;
    Ok(RedundancyMatrix {
        metric: RedundancyMetric::Cka,
        labels: positions
            .iter()
            .map(|&p| names.get(p).cloned().unwrap_or_else(|| format!("pos{p}")))
            .collect(),
        values,
        graphs: per_graph.len(),
    })
}

/// Square heatmap with a white-to-blue linear ramp over `[min, max]` and the
/// value printed in each cell.
pub fn heatmap_svg(title: &str, labels: &[String], values: &[Vec<f64>]) -> String {
    let n = labels.len();
    let cell = 44usize;
    let margin = 90usize;
    let size = margin + n * cell + 10;
    let (lo, hi) = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="10">"#,
        size + 20
    );
    let _ = writeln!(s, r#"<text x="{}" y="16" font-size="13">{}</text>"#, margin, escape(title));
    for (i, l) in labels.iter().enumerate() {
        let c = margin + i * cell + cell / 2;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, margin - 4, margin + i * cell + cell / 2 + 3, escape(l));
        let _ = writeln!(
            s,
            r#"<text x="{c}" y="{}" text-anchor="start" transform="rotate(-45 {c} {})">{}</text>"#,
            margin - 4,
            margin - 4,
            escape(l)
        );
    }
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            let r = (255.0 * (1.0 - 0.85 * t)).round() as u8;
            let g = (255.0 * (1.0 - 0.6 * t)).round() as u8;
            let (x, y) = (margin + j * cell, margin + i * cell);
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},255)" stroke="white"/>"#);
            let ink = if t > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.2}</text>"#,
                x + cell / 2,
                y + cell / 2 + 3,
                v
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
