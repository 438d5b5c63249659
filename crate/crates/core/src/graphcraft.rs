//! Token graphs inferred from market activity.
//!
//! * static: thresholded Pearson correlation of `log(1+s)` over the training
//!   hours;
//! * dynamic: correlation windows ending at each training pump hour, with
//!   edges accumulated as a running mean and persisted;
//! * adaptive: row-softmax of `relu(E1 E2^T)` over learnable node
//!   embeddings, sparsified at `epsilon` on every forward pass.
//!
//! Edges are `(src, dst)` pairs; messages flow from `src` to `dst`. For the
//! adaptive graph, entry `A[i][j]` becomes edge `(j, i)`, i.e. row `i` lists
//! the nodes `i` aggregates from.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use crate::numcore::tensor::gemm;
use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::panel::{fmt_ts, CandleField, Panel, SplitIndex};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("correlation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("quantile threshold needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("quantile level {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error("training hours are empty")]
    EmptyTraining,
    #[error("dynamic lookback must be >= 2, got {0}")]
    BadLookback(usize),
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Scalar series used for correlation graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Volume,
    NumTrades,
}

impl SignalKind {
    pub fn field(self) -> CandleField {
        match self {
            Self::Volume => CandleField::Volume,
            Self::NumTrades => CandleField::NumTrades,
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Volume => "volume",
            Self::NumTrades => "num_trades",
        })
    }
}

impl FromStr for SignalKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "volume" => Ok(Self::Volume),
            "num_trades" | "trades" => Ok(Self::NumTrades),
            _ => Err(GraphError::Unknown {
                what: "signal",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphStrategy {
    /// G1
    Static,
    /// G2
    Dynamic,
    /// G3
    Adaptive,
    /// No cross-token edges.
    Identity,
}

impl fmt::Display for GraphStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Static => "G1",
            Self::Dynamic => "G2",
            Self::Adaptive => "G3",
            Self::Identity => "identity",
        })
    }
}

impl FromStr for GraphStrategy {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "g1" | "static" => Ok(Self::Static),
            "g2" | "dynamic" => Ok(Self::Dynamic),
            "g3" | "adaptive" | "self-adaptive" => Ok(Self::Adaptive),
            "identity" | "none" => Ok(Self::Identity),
            _ => Err(GraphError::Unknown {
                what: "graph strategy",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub directed: bool,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: Vec::new(),
            weights: Vec::new(),
            directed: false,
        }
    }

    /// `A = I`: one unit self-loop per node.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            edges: (0..n).map(|i| (i, i)).collect(),
            weights: vec![1.0; n],
            directed: false,
        }
    }

    /// Undirected graph from `(i, j, w)` with `i < j`, emitted both ways and
    /// sorted by `(src, dst)`.
    pub fn from_undirected(n: usize, pairs: &[(usize, usize, f64)]) -> Self {
        let mut both: Vec<((usize, usize), f64)> = Vec::with_capacity(2 * pairs.len());
        for &(i, j, w) in pairs {
            both.push(((i, j), w));
            both.push(((j, i), w));
        }
        both.sort_by(|a, b| a.0.cmp(&b.0));
        Self {
            n,
            edges: both.iter().map(|e| e.0).collect(),
            weights: both.iter().map(|e| e.1).collect(),
            directed: false,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, src: usize, dst: usize) -> Option<f64> {
        self.edges
            .iter()
            .position(|e| *e == (src, dst))
            .map(|k| self.weights[k])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GraphError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["src", "dst", "weight"])?;
        for (&(s, d), wt) in self.edges.iter().zip(&self.weights) {
            wr.write_record([s.to_string(), d.to_string(), wt.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Column-wise Pearson correlation of a `[samples, nodes]` matrix with a zero
/// diagonal. Constant columns correlate to 0 with every partner.
pub fn pearson_matrix(s: &Tensor) -> Result<Tensor, GraphError> {
    let (rows, cols) = match s.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(NumError::ShapeMismatch {
                op: "pearson_matrix",
                lhs: other.to_vec(),
                rhs: vec![],
            }
            .into())
        }
    };
    if rows < 2 {
        return Err(GraphError::TooFewSamples(rows));
    }
    let data = s.data();
    let mut centered = data.to_vec();
    let mut dead = vec![false; cols];
    for j in 0..cols {
        let col = (0..rows).map(|r| data[r * cols + j]);
        let mean = col.clone().sum::<f64>() / rows as f64;
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        dead[j] = lo == hi;
        for r in 0..rows {
            centered[r * cols + j] -= mean;
        }
    }
    let mut cov = vec![0.0; cols * cols];
    gemm(cols, rows, cols, &centered, true, &centered, false, &mut cov, false);
    let mut out = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            if i == j || dead[i] || dead[j] {
                continue;
            }
            let denom = (cov[i * cols + i] * cov[j * cols + j]).sqrt();
            out[i * cols + j] = if denom > 0.0 {
                (cov[i * cols + j] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    // enforce exact symmetry
    for i in 0..cols {
        for j in i + 1..cols {
            out[j * cols + i] = out[i * cols + j];
        }
    }
    Ok(Tensor::new(vec![cols, cols], out)?)
}

/// Linear-interpolation quantile of a non-empty sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

fn upper_triangle(c: &Tensor) -> Vec<f64> {
    let n = c.shape()[0];
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(c.at2(i, j));
        }
    }
    out
}

/// `max(tau_min, Q_rho(upper triangle of C))`.
pub fn quantile_threshold(c: &Tensor, rho: f64, tau_min: f64) -> Result<f64, GraphError> {
    let n = c.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(GraphError::BadQuantile(rho));
    }
    Ok(tau_min.max(quantile(&upper_triangle(c), rho)))
}

/// Pairs `i < j` with `C_ij > tau` (strict).
fn strong_pairs(c: &Tensor, tau: f64) -> Vec<(usize, usize, f64)> {
    let n = c.shape()[0];
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let v = c.at2(i, j);
            if v > tau {
                out.push((i, j, v));
            }
        }
    }
    out
}

/// `log(1 + s)` for the given hours as a `[hours, tokens]` matrix. Missing
/// candles count as zero activity.
pub fn signal_matrix(panel: &Panel, kind: SignalKind, hours: &[usize]) -> Tensor {
    let n = panel.n_tokens();
    let mut data = Vec::with_capacity(hours.len() * n);
    for &t in hours {
        for i in 0..n {
            let s = panel.candle(i, t).map_or(0.0, |c| kind.field().get(c));
            data.push(s.max(0.0).ln_1p());
        }
    }
    Tensor::new(vec![hours.len(), n], data).expect("sized")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationGraphConfig {
    pub signal: SignalKind,
    pub rho: f64,
    pub tau_min: f64,
}

pub fn build_static_graph(
    panel: &Panel,
    train: Range<usize>,
    cfg: &CorrelationGraphConfig,
) -> Result<Adjacency, GraphError> {
    if train.is_empty() {
        return Err(GraphError::EmptyTraining);
    }
    let hours: Vec<usize> = train.collect();
    let c = pearson_matrix(&signal_matrix(panel, cfg.signal, &hours))?;
    let tau = quantile_threshold(&c, cfg.rho, cfg.tau_min)?;
    Ok(Adjacency::from_undirected(panel.n_tokens(), &strong_pairs(&c, tau)))
}

/// Piecewise-constant graph indexed by pump hours inside the training block.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTimeline {
    pub snapshots: Vec<(usize, Adjacency)>,
    pub fallback: Adjacency,
}

impl GraphTimeline {
    /// Active graph at hour `t`: identity before the first training event,
    /// the latest snapshot at or before `t` inside training, and the last
    /// training snapshot for any later hour.
    pub fn graph_at(&self, t: usize, split: &SplitIndex) -> &Adjacency {
        let cutoff = if t >= split.train.end { usize::MAX } else { t };
        let k = self.snapshots.partition_point(|(p, _)| *p <= cutoff);
        if k == 0 {
            &self.fallback
        } else {
            &self.snapshots[k - 1].1
        }
    }

    pub fn write_csv<W: Write>(&self, panel: &Panel, w: W) -> Result<(), GraphError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["snapshot_ts", "src", "dst", "weight"])?;
        for (p, a) in &self.snapshots {
            let ts = fmt_ts(panel.timestamp(*p));
            for (&(s, d), wt) in a.edges.iter().zip(&a.weights) {
                wr.write_record([ts.clone(), s.to_string(), d.to_string(), wt.to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn build_dynamic_timeline(
    panel: &Panel,
    train: Range<usize>,
    pump_hours: &[usize],
    lookback: usize,
    cfg: &CorrelationGraphConfig,
) -> Result<GraphTimeline, GraphError> {
    if lookback < 2 {
        return Err(GraphError::BadLookback(lookback));
    }
    let n = panel.n_tokens();
    let mut events: Vec<usize> = pump_hours.iter().copied().filter(|p| train.contains(p)).collect();
    events.sort_unstable();
    events.dedup();
    let mut sum = vec![0.0; n * n];
    let mut count = vec![0u32; n * n];
    let mut snapshots = Vec::new();
    for p in events {
        let hours: Vec<usize> = (p.saturating_sub(lookback)..=p).filter(|t| train.contains(t)).collect();
        if hours.len() < 2 {
            log::warn!("skipping pump hour {p}: only {} usable window rows", hours.len());
            continue;
        }
        let c = pearson_matrix(&signal_matrix(panel, cfg.signal, &hours))?;
        let tau = quantile_threshold(&c, cfg.rho, cfg.tau_min)?;
        for (i, j, v) in strong_pairs(&c, tau) {
            sum[i * n + j] += v;
            count[i * n + j] += 1;
        }
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if count[i * n + j] > 0 {
                    pairs.push((i, j, sum[i * n + j] / count[i * n + j] as f64));
                }
            }
        }
        snapshots.push((p, Adjacency::from_undirected(n, &pairs)));
    }
    Ok(GraphTimeline {
        snapshots,
        fallback: Adjacency::identity(n),
    })
}

/// Self-adaptive graph on a tape: dense row-stochastic matrix plus the
/// differentiable weights of the retained edges.
pub struct AdaptiveGraph {
    pub dense: Var,
    pub edges: Vec<(usize, usize)>,
    pub weights: Var,
}

pub fn adaptive_adjacency(tape: &mut Tape, e1: Var, e2: Var, epsilon: f64) -> Result<AdaptiveGraph, GraphError> {
    let n = tape.shape(e1)[0];
    let e2t = tape.transpose(e2)?;
    let m = tape.matmul(e1, e2t)?;
    let m = tape.relu(m)?;
    let dense = tape.row_softmax(m)?;
    let mut edges = Vec::new();
    let mut flat = Vec::new();
    for (k, v) in tape.value(dense).data().iter().enumerate() {
        if *v > epsilon {
            let (i, j) = (k / n, k % n);
            edges.push((j, i));
            flat.push(k);
        }
    }
    let col = tape.reshape(dense, &[n * n, 1])?;
    let picked = tape.gather_rows(col, &flat)?;
    let weights = tape.reshape(picked, &[flat.len()])?;
    Ok(AdaptiveGraph { dense, edges, weights })
}

/// Non-differentiable evaluation of the adaptive graph.
pub fn adaptive_adjacency_values(e1: &Tensor, e2: &Tensor, epsilon: f64) -> Result<(Tensor, Adjacency), GraphError> {
    let mut tape = Tape::new();
    let a = tape.leaf(e1.clone());
    let b = tape.leaf(e2.clone());
    let g = adaptive_adjacency(&mut tape, a, b, epsilon)?;
    let adj = Adjacency {
        n: e1.shape()[0],
        edges: g.edges.clone(),
        weights: tape.value(g.weights).data().to_vec(),
        directed: true,
    };
    Ok((tape.value(g.dense).clone(), adj))
}
