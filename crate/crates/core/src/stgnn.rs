//! Spatio-temporal graph network.
//!
//! Per window step: input projection, two graph-attention layers over the
//! active token graph, then a pre-norm Transformer encoder over the window
//! axis of every node and a sigmoid head on the last time slot.
//!
//! A batch of `B` anchors is processed as one disjoint graph whose node rows
//! are ordered `(anchor, token, step)`; the graph of block `(b, u)` only
//! connects rows of that block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graphcraft::{adaptive_adjacency, Adjacency, GraphError, GraphStrategy};
use crate::numcore::{NumError, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("edge ({src}, {dst}) out of range for {n} nodes")]
    BadEdgeIndex { src: usize, dst: usize, n: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub strategy: GraphStrategy,
    pub n_features: usize,
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub dropout: f64,
    pub temporal_layers: usize,
    pub d_embed: usize,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            strategy: GraphStrategy::Static,
            n_features: crate::features::N_FEATURES,
            d_model: 64,
            heads: 2,
            window: 5,
            dropout: 0.3,
            temporal_layers: 1,
            d_embed: 48,
            epsilon: 0.005,
        }
    }
}

pub const MODEL_CONFIG_KEYS: [&str; 9] = [
    "strategy",
    "F",
    "D",
    "H",
    "W",
    "dropout",
    "temporal_layers",
    "d_embed",
    "epsilon",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("F", self.n_features),
            ("D", self.d_model),
            ("H", self.heads),
            ("W", self.window),
            ("temporal_layers", self.temporal_layers),
            ("d_embed", self.d_embed),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{k} must be >= 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "D={} not divisible by H={}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(ModelError::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strategy={}", self.strategy);
        let _ = writeln!(s, "F={}", self.n_features);
        let _ = writeln!(s, "D={}", self.d_model);
        let _ = writeln!(s, "H={}", self.heads);
        let _ = writeln!(s, "W={}", self.window);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "temporal_layers={}", self.temporal_layers);
        let _ = writeln!(s, "d_embed={}", self.d_embed);
        let _ = writeln!(s, "epsilon={}", self.epsilon);
        s
    }

    /// Sets one `key=value` entry; `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, k: &str, v: &str) -> Result<bool, ModelError> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T, ModelError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| ModelError::Config(format!("{k}: {e}")))
        }
        match k {
            "strategy" => {
                self.strategy = GraphStrategy::from_str(v).map_err(|e| ModelError::Config(format!("{k}: {e}")))?
            }
            "F" => self.n_features = num(k, v)?,
            "D" => self.d_model = num(k, v)?,
            "H" => self.heads = num(k, v)?,
            "W" => self.window = num(k, v)?,
            "dropout" => self.dropout = num(k, v)?,
            "temporal_layers" => self.temporal_layers = num(k, v)?,
            "d_embed" => self.d_embed = num(k, v)?,
            "epsilon" => self.epsilon = num(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    /// Missing keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text).map_err(ModelError::Config)? {
            if !cfg.set(&k, &v)? {
                return Err(ModelError::Config(format!(
                    "unknown key `{k}` (valid: {})",
                    MODEL_CONFIG_KEYS.join(", ")
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `key=value` lines in file order; later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Model inputs for `B` anchors.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub n_nodes: usize,
    pub window: usize,
    pub n_features: usize,
    /// `[B, N, W, F]` row-major.
    pub features: Vec<f64>,
    /// Either one graph shared by every step, or `B * W` graphs ordered
    /// `(anchor, step)`. Ignored by the adaptive and identity strategies.
    pub graphs: Vec<&'a Adjacency>,
}

impl Batch<'_> {
    pub fn n_anchors(&self) -> usize {
        self.features.len() / (self.n_nodes * self.window * self.n_features).max(1)
    }

    fn graph(&self, b: usize, u: usize) -> Option<&Adjacency> {
        match self.graphs.len() {
            0 => None,
            1 => Some(self.graphs[0]),
            _ => Some(self.graphs[b * self.window + u]),
        }
    }
}

struct EdgeSet {
    src: Vec<usize>,
    dst: Vec<usize>,
    weight: Option<Var>,
}

/// Rows touched by `idx` and each entry's position among them; `None` when
/// every one of `rows` is touched.
fn compact(idx: &[usize], rows: usize) -> (Option<Vec<usize>>, Vec<usize>) {
    let mut slot = vec![usize::MAX; rows];
    for &i in idx {
        slot[i] = 0;
    }
    let mut used = Vec::new();
    for (r, s) in slot.iter_mut().enumerate() {
        if *s == 0 {
            *s = used.len();
            used.push(r);
        }
    }
    let pos = idx.iter().map(|&i| slot[i]).collect();
    if used.len() == rows {
        (None, pos)
    } else {
        (Some(used), pos)
    }
}

/// Linear map of only the rows in `used`.
fn lin_rows(tape: &mut Tape, store: &ParamStore, x: Var, used: &Option<Vec<usize>>, name: &str) -> Result<Var, NumError> {
    match used {
        Some(r) => {
            let xr = tape.gather_rows(x, r)?;
            lin(tape, store, xr, name)
        }
        None => lin(tape, store, x, name),
    }
}

/// Intermediate tape handles exposed for inspection.
pub struct ForwardTrace {
    pub logits: Var,
    pub spatial: Var,
    /// Last-slot temporal output `[B*N, D]`.
    pub temporal: Var,
    /// Per temporal layer and head: `[B*N, W, W]` attention (`[B*N, 1, W]`
    /// in the final layer).
    pub attention: Vec<Var>,
    pub adaptive_dense: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StGnn {
    pub cfg: ModelConfig,
    pub n_nodes: usize,
}

fn lin(tape: &mut Tape, store: &ParamStore, x: Var, name: &str) -> Result<Var, NumError> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    match store.index_of(&format!("{name}.b")) {
        Some(_) => {
            let b = tape.param(store, &format!("{name}.b"))?;
            tape.add_tiled(y, b)
        }
        None => Ok(y),
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var, NumError> {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(x, p, &mut **r),
        _ => Ok(x),
    }
}

impl StGnn {
    pub fn new(cfg: ModelConfig, n_nodes: usize) -> Result<Self, ModelError> {
        cfg.validate()?;
        if n_nodes == 0 {
            return Err(ModelError::Config("graph needs at least one node".into()));
        }
        Ok(Self { cfg, n_nodes })
    }

    fn spatial_width(&self) -> usize {
        self.cfg.heads * self.cfg.d_model
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore, ModelError> {
        let c = &self.cfg;
        let (d, hw) = (c.d_model, self.spatial_width());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let linear = |s: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool, rng: &mut ChaCha8Rng| {
            s.insert_xavier(format!("{name}.w"), &[i, o], rng)?;
            if bias {
                s.insert(format!("{name}.b"), Tensor::zeros(&[o]))?;
            }
            Ok::<(), NumError>(())
        };
        linear(&mut s, "in", c.n_features, d, true, &mut rng)?;
        for l in 0..2 {
            // a key bias only shifts every logit of a destination equally
            for part in ["q", "k", "v", "root"] {
                if part == "root" || c.strategy != GraphStrategy::Identity {
                    linear(&mut s, &format!("gat{l}.{part}"), d, hw, part != "k", &mut rng)?;
                }
            }
            if c.strategy != GraphStrategy::Identity {
                linear(&mut s, &format!("gat{l}.edge"), 1, hw, false, &mut rng)?;
            }
            linear(&mut s, &format!("gat{l}.merge"), hw, d, true, &mut rng)?;
        }
        s.insert_normal("pos", &[c.window, d], 0.02, &mut rng)?;
        for k in 0..c.temporal_layers {
            s.insert(format!("tl{k}.ln1.g"), Tensor::full(&[d], 1.0))?;
            s.insert(format!("tl{k}.ln1.b"), Tensor::zeros(&[d]))?;
            for part in ["q", "k", "v"] {
                linear(&mut s, &format!("tl{k}.{part}"), d, d, part != "k", &mut rng)?;
            }
            linear(&mut s, &format!("tl{k}.attn_out"), d, d, true, &mut rng)?;
            s.insert(format!("tl{k}.ln2.g"), Tensor::full(&[d], 1.0))?;
            s.insert(format!("tl{k}.ln2.b"), Tensor::zeros(&[d]))?;
            linear(&mut s, &format!("tl{k}.ff1"), d, 4 * d, true, &mut rng)?;
            linear(&mut s, &format!("tl{k}.ff2"), 4 * d, d, true, &mut rng)?;
        }
        s.insert("final_ln.g", Tensor::full(&[d], 1.0))?;
        s.insert("final_ln.b", Tensor::zeros(&[d]))?;
        linear(&mut s, "head", d, 1, true, &mut rng)?;
        if c.strategy == GraphStrategy::Adaptive {
            s.insert_normal("E1", &[self.n_nodes, c.d_embed], 0.1, &mut rng)?;
            s.insert_normal("E2", &[self.n_nodes, c.d_embed], 0.1, &mut rng)?;
        }
        Ok(s)
    }

    pub fn parameter_count(&self) -> usize {
        self.init_params(0).map(|s| s.num_scalars()).unwrap_or(0)
    }

    fn check_batch(&self, batch: &Batch, window: usize) -> Result<(), ModelError> {
        let c = &self.cfg;
        if batch.n_nodes != self.n_nodes || batch.window != window || batch.n_features != c.n_features {
            return Err(ModelError::Batch(format!(
                "batch dims N={} W={} F={} do not match model N={} W={window} F={}",
                batch.n_nodes, batch.window, batch.n_features, self.n_nodes, c.n_features
            )));
        }
        let unit = batch.n_nodes * batch.window * batch.n_features;
        if batch.features.is_empty() || batch.features.len() % unit != 0 {
            return Err(ModelError::Batch(format!(
                "feature length {} is not a positive multiple of {unit}",
                batch.features.len()
            )));
        }
        let needs_graphs = matches!(c.strategy, GraphStrategy::Static | GraphStrategy::Dynamic);
        let b = batch.n_anchors();
        if needs_graphs && batch.graphs.len() != 1 && batch.graphs.len() != b * window {
            return Err(ModelError::Batch(format!(
                "expected 1 or {} graphs, got {}",
                b * window,
                batch.graphs.len()
            )));
        }
        Ok(())
    }

    fn edge_set(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<(EdgeSet, Option<Var>), ModelError> {
        let (n, w, b) = (self.n_nodes, batch.window, batch.n_anchors());
        let row = |bb: usize, i: usize, u: usize| (bb * n + i) * w + u;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        match self.cfg.strategy {
            GraphStrategy::Identity => Ok((EdgeSet { src, dst, weight: None }, None)),
            GraphStrategy::Adaptive => {
                let e1 = tape.param(store, "E1")?;
                let e2 = tape.param(store, "E2")?;
                let g = adaptive_adjacency(tape, e1, e2, self.cfg.epsilon)?;
                let ne = g.edges.len();
                let mut pick = Vec::with_capacity(b * w * ne);
                for bb in 0..b {
                    for u in 0..w {
                        for (k, &(s, d)) in g.edges.iter().enumerate() {
                            src.push(row(bb, s, u));
                            dst.push(row(bb, d, u));
                            pick.push(k);
                        }
                    }
                }
                let weight = if ne == 0 {
                    None
                } else {
                    let col = tape.reshape(g.weights, &[ne, 1])?;
                    Some(tape.gather_rows(col, &pick)?)
                };
                Ok((EdgeSet { src, dst, weight }, Some(g.dense)))
            }
            GraphStrategy::Static | GraphStrategy::Dynamic => {
                let mut wts = Vec::new();
                for bb in 0..b {
                    for u in 0..w {
                        let a = batch.graph(bb, u).expect("checked");
                        if a.n != n {
                            return Err(ModelError::Batch(format!("graph has {} nodes, model {n}", a.n)));
                        }
                        for (&(s, d), &wt) in a.edges.iter().zip(&a.weights) {
                            if s >= n || d >= n {
                                return Err(ModelError::BadEdgeIndex { src: s, dst: d, n });
                            }
                            src.push(row(bb, s, u));
                            dst.push(row(bb, d, u));
                            wts.push(wt);
                        }
                    }
                }
                let weight = if wts.is_empty() {
                    None
                } else {
                    let len = wts.len();
                    Some(tape.leaf(Tensor::new(vec![len, 1], wts)?))
                };
                Ok((EdgeSet { src, dst, weight }, None))
            }
        }
    }

    fn graph_attn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        h: Var,
        edges: &EdgeSet,
    ) -> Result<Var, NumError> {
        let rows = tape.shape(h)[0];
        let (heads, hd) = (self.cfg.heads, self.cfg.d_model);
        let hw = heads * hd;
        let p = format!("gat{layer}");
        let root = lin(tape, store, h, &format!("{p}.root"))?;
        let out = match edges.weight {
            None => root,
            Some(a) => {
                // q, k, v only for rows that appear as a destination or source
                let (src_rows, src_pos) = compact(&edges.src, rows);
                let (dst_rows, dst_pos) = compact(&edges.dst, rows);
                let q = lin_rows(tape, store, h, &dst_rows, &format!("{p}.q"))?;
                let k = lin_rows(tape, store, h, &src_rows, &format!("{p}.k"))?;
                let v = lin_rows(tape, store, h, &src_rows, &format!("{p}.v"))?;
                let we = tape.param(store, &format!("{p}.edge.w"))?;
                let ef = tape.matmul(a, we)?;
                let kj = tape.gather_rows(k, &src_pos)?;
                let kj = tape.add(kj, ef)?;
                let vj = tape.gather_rows(v, &src_pos)?;
                let vj = tape.add(vj, ef)?;
                let qi = tape.gather_rows(q, &dst_pos)?;
                let prod = tape.mul(qi, kj)?;
                // column block h of width hd sums into head h
                let mut blk = vec![0.0; hw * heads];
                for c in 0..hw {
                    blk[c * heads + c / hd] = 1.0;
                }
                let blk_t = Tensor::new(vec![hw, heads], blk)?;
                let mut expand = vec![0.0; heads * hw];
                for c in 0..hw {
                    expand[(c / hd) * hw + c] = 1.0;
                }
                let blk = tape.leaf(blk_t);
                let expand = tape.leaf(Tensor::new(vec![heads, hw], expand)?);
                let logits = tape.matmul(prod, blk)?;
                let logits = tape.scale(logits, 1.0 / (hd as f64).sqrt())?;
                let ne = edges.dst.len();
                let flat = tape.reshape(logits, &[ne * heads])?;
                let seg: Vec<usize> = edges
                    .dst
                    .iter()
                    .flat_map(|&d| (0..heads).map(move |hh| d * heads + hh))
                    .collect();
                let alpha = tape.segment_softmax(flat, &seg, rows * heads)?;
                let alpha = tape.reshape(alpha, &[ne, heads])?;
                let alpha = tape.matmul(alpha, expand)?;
                let msg = tape.mul(alpha, vj)?;
                let agg = tape.scatter_add_rows(msg, &edges.dst, rows)?;
                tape.add(root, agg)?
            }
        };
        debug_assert_eq!(tape.shape(out)[1], hw);
        lin(tape, store, out, &format!("{p}.merge"))
    }

    /// Spatial embeddings `[B*N*W, D]` in `(anchor, token, step)` row order.
    pub fn spatial_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Var, Option<Var>), ModelError> {
        self.check_batch(batch, self.cfg.window)?;
        self.spatial(tape, store, batch, rng)
    }

    fn spatial(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let rows = batch.features.len() / self.cfg.n_features;
        let x = tape.leaf(Tensor::new(vec![rows, self.cfg.n_features], batch.features.clone())?);
        let (edges, dense) = self.edge_set(tape, store, batch)?;
        let h = lin(tape, store, x, "in")?;
        let h = self.graph_attn(tape, store, 0, h, &edges)?;
        let h = tape.relu(h)?;
        let h = maybe_dropout(tape, h, self.cfg.dropout, rng)?;
        let h = self.graph_attn(tape, store, 1, h, &edges)?;
        let h = tape.relu(h)?;
        Ok((h, dense))
    }

    /// Adds positional parameters and runs the temporal encoder over every
    /// window slot; returns the `[B*N*W, D]` output and the attention tensors.
    pub fn temporal_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Var,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        self.temporal(tape, store, s, rng, false)
    }

    /// With `last_only` the final layer computes queries, feed-forward and
    /// the closing norm for the last slot only (`[B*N, D]` output); keys and
    /// values still span the whole window.
    fn temporal(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: Var,
        rng: &mut Option<&mut dyn RngCore>,
        last_only: bool,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let (d, w, heads) = (self.cfg.d_model, self.cfg.window, self.cfg.heads);
        let rows = tape.shape(s)[0];
        let seqs = rows / w;
        let hd = d / heads;
        let last: Vec<usize> = (0..seqs).map(|q| q * w + w - 1).collect();
        let pos = tape.param(store, "pos")?;
        let mut x = tape.add_tiled(s, pos)?;
        let mut attn = Vec::new();
        let n_layers = self.cfg.temporal_layers;
        for k in 0..n_layers {
            let narrow = last_only && k + 1 == n_layers;
            let qlen = if narrow { 1 } else { w };
            let qrows = seqs * qlen;
            let g1 = tape.param(store, &format!("tl{k}.ln1.g"))?;
            let b1 = tape.param(store, &format!("tl{k}.ln1.b"))?;
            let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
            let hq = if narrow { tape.gather_rows(h, &last)? } else { h };
            let qa = lin(tape, store, hq, &format!("tl{k}.q"))?;
            let ka = lin(tape, store, h, &format!("tl{k}.k"))?;
            let va = lin(tape, store, h, &format!("tl{k}.v"))?;
            let mut outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let q = tape.slice_cols(qa, hh * hd, (hh + 1) * hd)?;
                let kk = tape.slice_cols(ka, hh * hd, (hh + 1) * hd)?;
                let v = tape.slice_cols(va, hh * hd, (hh + 1) * hd)?;
                let q = tape.reshape(q, &[seqs, qlen, hd])?;
                let kk = tape.reshape(kk, &[seqs, w, hd])?;
                let v = tape.reshape(v, &[seqs, w, hd])?;
                let sc = tape.bmm(q, kk, true)?;
                let sc = tape.scale(sc, 1.0 / (hd as f64).sqrt())?;
                let a = tape.row_softmax(sc)?;
                attn.push(a);
                let o = tape.bmm(a, v, false)?;
                outs.push(tape.reshape(o, &[qrows, hd])?);
            }
            let o = tape.concat_cols(&outs)?;
            let o = lin(tape, store, o, &format!("tl{k}.attn_out"))?;
            let o = maybe_dropout(tape, o, self.cfg.dropout, rng)?;
            if narrow {
                x = tape.gather_rows(x, &last)?;
            }
            x = tape.add(x, o)?;
            let g2 = tape.param(store, &format!("tl{k}.ln2.g"))?;
            let b2 = tape.param(store, &format!("tl{k}.ln2.b"))?;
            let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
            let f = lin(tape, store, h, &format!("tl{k}.ff1"))?;
            let f = tape.relu(f)?;
            let f = lin(tape, store, f, &format!("tl{k}.ff2"))?;
            let f = maybe_dropout(tape, f, self.cfg.dropout, rng)?;
            x = tape.add(x, f)?;
        }
        let g = tape.param(store, "final_ln.g")?;
        let b = tape.param(store, "final_ln.b")?;
        Ok((tape.layer_norm(x, g, b, LN_EPS)?, attn))
    }

    /// Full forward pass. `rng` enables dropout (training mode).
    pub fn forward_trace(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardTrace, ModelError> {
        let (spatial, adaptive_dense) = self.spatial_encode(tape, store, batch, &mut rng)?;
        let (temporal, attention) = self.temporal(tape, store, spatial, &mut rng, true)?;
        let seqs = tape.shape(temporal)[0];
        let y = lin(tape, store, temporal, "head")?;
        let logits = tape.reshape(y, &[seqs])?;
        Ok(ForwardTrace {
            logits,
            spatial,
            temporal,
            attention,
            adaptive_dense,
        })
    }

    /// Logits `[B*N]` in `(anchor, token)` order.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        Ok(self.forward_trace(tape, store, batch, rng)?.logits)
    }

    /// Eval-mode logits for anchors cut from one span of consecutive hours,
    /// in `(anchor, token)` order. `span` holds `[1, N, S, F]` features with
    /// one graph or `S` graphs; anchor `k` ends at span offset `ends[k]`.
    /// Each hour is encoded spatially once, so overlapping windows share work.
    pub fn span_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        span: &Batch,
        ends: &[usize],
    ) -> Result<Var, ModelError> {
        let (n, w, len) = (self.n_nodes, self.cfg.window, span.window);
        self.check_batch(span, len)?;
        if span.n_anchors() != 1 {
            return Err(ModelError::Batch(format!("span holds {} blocks, expected 1", span.n_anchors())));
        }
        if let Some(&bad) = ends.iter().find(|&&e| e + 1 < w || e >= len) {
            return Err(ModelError::Batch(format!("anchor end {bad} outside span of {len} with window {w}")));
        }
        let (spatial, _) = self.spatial(tape, store, span, &mut None)?;
        let mut rows = Vec::with_capacity(ends.len() * n * w);
        for &e in ends {
            for i in 0..n {
                rows.extend((e + 1 - w..=e).map(|t| i * len + t));
            }
        }
        let windows = tape.gather_rows(spatial, &rows)?;
        let (temporal, _) = self.temporal(tape, store, windows, &mut None, true)?;
        let y = lin(tape, store, temporal, "head")?;
        Ok(tape.reshape(y, &[ends.len() * n])?)
    }

    /// Eval-mode probabilities `[B*N]`.
    pub fn predict(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, store, batch, None)?;
        let y = tape.sigmoid(l)?;
        Ok(tape.value(y).data().to_vec())
    }
}

/// `1{p >= gamma}`.
pub fn classify(p: &[f64], gamma: f64) -> Vec<bool> {
    p.iter().map(|v| *v >= gamma).collect()
}
