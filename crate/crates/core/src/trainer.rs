//! Training loop, threshold selection and the multi-seed protocol.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::features::{build_feature_matrix, standardize, FeatureError, FeaturePanel, Standardizer};
use crate::graphcraft::{
    build_dynamic_timeline, build_static_graph, Adjacency, CorrelationGraphConfig, GraphError, GraphStrategy,
    GraphTimeline, SignalKind,
};
use crate::metrics::{pr_curve, prf1, Confusion, MetricsError};
use crate::numcore::{adam_step, AdamConfig, NumError, ParamStore, Tape};
use crate::panel::{chronological_split, Block, Panel, PanelError, SplitIndex};
use crate::stgnn::{parse_kv, Batch, ModelConfig, ModelError, StGnn, MODEL_CONFIG_KEYS};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no positive labels among training anchors")]
    NoPositivesInTrain,
    #[error("{0} block has no usable anchors")]
    EmptyBlock(&'static str),
    #[error("batch has no valid cells")]
    EmptyBatch,
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub signal: SignalKind,
    pub rho: f64,
    pub tau_min: f64,
    pub lookback: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_anchors: usize,
    pub pos_weight_cap: f64,
    pub seeds: Vec<u64>,
    /// Fraction of all-negative training anchors kept each epoch.
    pub neg_keep: f64,
    pub embargo: usize,
    pub fractions: (f64, f64, f64),
    pub min_events: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            signal: SignalKind::NumTrades,
            rho: 0.9,
            tau_min: 0.15,
            lookback: 12,
            lr: 1e-3,
            max_epochs: 100,
            patience: 10,
            batch_anchors: 32,
            pos_weight_cap: 200.0,
            seeds: (0..9).collect(),
            neg_keep: 1.0,
            embargo: 5,
            fractions: (0.6, 0.2, 0.2),
            min_events: 5,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: [&str; 16] = [
    "signal",
    "rho",
    "tau_min",
    "lookback",
    "lr",
    "max_epochs",
    "patience",
    "batch_anchors",
    "pos_weight_cap",
    "seeds",
    "neg_keep",
    "embargo",
    "train_frac",
    "val_frac",
    "test_frac",
    "min_events",
];

/// Every key accepted in a run config.
pub fn run_config_keys() -> Vec<&'static str> {
    MODEL_CONFIG_KEYS.iter().chain(TRAIN_CONFIG_KEYS.iter()).copied().collect()
}

impl TrainConfig {
    pub fn graph_config(&self) -> CorrelationGraphConfig {
        CorrelationGraphConfig {
            signal: self.signal,
            rho: self.rho,
            tau_min: self.tau_min,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.batch_anchors == 0 || self.max_epochs == 0 {
            return bad("batch_anchors and max_epochs must be >= 1");
        }
        if !(self.neg_keep > 0.0 && self.neg_keep <= 1.0) {
            return bad("neg_keep must lie in (0, 1]");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.lr > 0.0) || !(self.pos_weight_cap >= 1.0) {
            return bad("lr must be > 0 and pos_weight_cap >= 1");
        }
        if self.lookback < 2 {
            return bad("lookback must be >= 2");
        }
        Ok(())
    }

    /// Applies one `key=value`; unknown keys are rejected with the valid list.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), TrainError> {
        if self.model.set(k, v)? {
            return Ok(());
        }
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, TrainError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| TrainError::Config(format!("{k}: {e}")))
        }
        match k {
            "signal" => self.signal = v.parse().map_err(|e: GraphError| TrainError::Config(e.to_string()))?,
            "rho" => self.rho = num(k, v)?,
            "tau_min" => self.tau_min = num(k, v)?,
            "lookback" => self.lookback = num(k, v)?,
            "lr" => self.lr = num(k, v)?,
            "max_epochs" => self.max_epochs = num(k, v)?,
            "patience" => self.patience = num(k, v)?,
            "batch_anchors" => self.batch_anchors = num(k, v)?,
            "pos_weight_cap" => self.pos_weight_cap = num(k, v)?,
            "seeds" => self.seeds = parse_seeds(v).map_err(TrainError::Config)?,
            "neg_keep" => self.neg_keep = num(k, v)?,
            "embargo" => self.embargo = num(k, v)?,
            "train_frac" => self.fractions.0 = num(k, v)?,
            "val_frac" => self.fractions.1 = num(k, v)?,
            "test_frac" => self.fractions.2 = num(k, v)?,
            "min_events" => self.min_events = num(k, v)?,
            _ => {
                return Err(TrainError::Config(format!(
                    "unknown key `{k}` (valid: {})",
                    run_config_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainError> {
        for (k, v) in parse_kv(text).map_err(TrainError::Config)? {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(s, "signal={}", self.signal);
        let _ = writeln!(s, "rho={}", self.rho);
        let _ = writeln!(s, "tau_min={}", self.tau_min);
        let _ = writeln!(s, "lookback={}", self.lookback);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "batch_anchors={}", self.batch_anchors);
        let _ = writeln!(s, "pos_weight_cap={}", self.pos_weight_cap);
        let _ = writeln!(s, "seeds={}", seeds.join(","));
        let _ = writeln!(s, "neg_keep={}", self.neg_keep);
        let _ = writeln!(s, "embargo={}", self.embargo);
        let _ = writeln!(s, "train_frac={}", self.fractions.0);
        let _ = writeln!(s, "val_frac={}", self.fractions.1);
        let _ = writeln!(s, "test_frac={}", self.fractions.2);
        let _ = writeln!(s, "min_events={}", self.min_events);
        s
    }
}

/// `0,1,2` or a range `0..9`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = v.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("seeds: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("seeds: {e}"))?;
        return Ok((a..b).collect());
    }
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|e| format!("seeds: {e}")))
        .collect()
}

/// Mean over valid cells of the weighted binary cross-entropy, from logits.
pub fn bce_loss(logits: &[f64], targets: &[f64], valid: &[bool], pos_weight: f64) -> Result<f64, TrainError> {
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&x, &y), &v) in logits.iter().zip(targets).zip(valid) {
        if v {
            sum += pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(sum / n as f64)
}

/// Graph source resolved per timestamp.
#[derive(Clone, Debug)]
pub enum GraphSource {
    Fixed(Adjacency),
    Timeline(GraphTimeline),
    Learned,
}

/// Panel-derived inputs shared by every seed.
pub struct Prepared {
    pub tokens: Vec<String>,
    pub features: FeaturePanel,
    pub standardizer: Standardizer,
    pub split: SplitIndex,
    pub labels: Vec<bool>,
    pub graphs: GraphSource,
    pub window: usize,
    test_reads: AtomicUsize,
}

impl Prepared {
    pub fn new(panel: &Panel, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let split = chronological_split(panel.n_hours(), cfg.fractions, cfg.embargo)?;
        let raw = build_feature_matrix(panel);
        let (features, standardizer) = standardize(&raw, split.train.clone());
        let graphs = match cfg.model.strategy {
            GraphStrategy::Static => GraphSource::Fixed(build_static_graph(panel, split.train.clone(), &cfg.graph_config())?),
            GraphStrategy::Dynamic => GraphSource::Timeline(build_dynamic_timeline(
                panel,
                split.train.clone(),
                &panel.event_hours(),
                cfg.lookback,
                &cfg.graph_config(),
            )?),
            GraphStrategy::Adaptive | GraphStrategy::Identity => GraphSource::Learned,
        };
        let (n, t_len) = (panel.n_tokens(), panel.n_hours());
        let mut labels = vec![false; n * t_len];
        for i in 0..n {
            for t in 0..t_len {
                labels[i * t_len + t] = panel.label(i, t);
            }
        }
        Ok(Self {
            tokens: panel.tokens().to_vec(),
            features,
            standardizer,
            split,
            labels,
            graphs,
            window: cfg.model.window,
            test_reads: AtomicUsize::new(0),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn label(&self, i: usize, t: usize) -> bool {
        self.labels[i * self.features.n_hours() + t]
    }

    fn anchor_valid(&self, t: usize) -> bool {
        (0..self.n_tokens()).any(|i| self.features.valid(i, t))
    }

    /// Anchors with `W-1` hours of history inside their own block and at
    /// least one valid node.
    fn block_anchors(&self, b: Block) -> Vec<usize> {
        let r = self.split.range(b);
        (r.start + self.window - 1..r.end).filter(|&t| self.anchor_valid(t)).collect()
    }

    pub fn train_anchors(&self) -> Vec<usize> {
        self.block_anchors(Block::Train)
    }

    pub fn val_anchors(&self) -> Vec<usize> {
        self.block_anchors(Block::Val)
    }

    /// Test anchors; every call is counted.
    pub fn test_anchors(&self) -> Vec<usize> {
        self.test_reads.fetch_add(1, Ordering::SeqCst);
        self.block_anchors(Block::Test)
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::SeqCst)
    }

    fn graph_at(&self, t: usize) -> Option<&Adjacency> {
        match &self.graphs {
            GraphSource::Fixed(a) => Some(a),
            GraphSource::Timeline(tl) => Some(tl.graph_at(t, &self.split)),
            GraphSource::Learned => None,
        }
    }

    /// Model inputs, targets and validity for the given anchors, flattened
    /// `(anchor, token)`.
    pub fn batch(&self, anchors: &[usize]) -> (Batch<'_>, Vec<f64>, Vec<bool>) {
        let (n, w, f) = (self.n_tokens(), self.window, self.features.n_features());
        let mut feats = Vec::with_capacity(anchors.len() * n * w * f);
        let mut targets = Vec::with_capacity(anchors.len() * n);
        let mut valid = Vec::with_capacity(anchors.len() * n);
        let mut graphs = Vec::new();
        for &a in anchors {
            for i in 0..n {
                for t in a + 1 - w..=a {
                    feats.extend_from_slice(self.features.row(i, t));
                }
                targets.push(if self.label(i, a) { 1.0 } else { 0.0 });
                valid.push(self.features.valid(i, a));
            }
            match &self.graphs {
                GraphSource::Fixed(g) if graphs.is_empty() => graphs.push(g),
                GraphSource::Timeline(_) => {
                    for t in a + 1 - w..=a {
                        graphs.push(self.graph_at(t).expect("timeline"));
                    }
                }
                _ => {}
            }
        }
        let batch = Batch {
            n_nodes: n,
            window: w,
            n_features: f,
            features: feats,
            graphs,
        };
        (batch, targets, valid)
    }

    /// Like [`Prepared::batch`], but the features cover the hour span from
    /// the first anchor's window to the last anchor, for
    /// [`StGnn::span_logits`]; also returns each anchor's span offset.
    /// Anchors must be ascending.
    pub fn span(&self, anchors: &[usize]) -> (Batch<'_>, Vec<usize>, Vec<f64>, Vec<bool>) {
        let (n, w, f) = (self.n_tokens(), self.window, self.features.n_features());
        let first = anchors[0] + 1 - w;
        let last = anchors[anchors.len() - 1];
        let len = last + 1 - first;
        let mut feats = Vec::with_capacity(n * len * f);
        for i in 0..n {
            for t in first..=last {
                feats.extend_from_slice(self.features.row(i, t));
            }
        }
        let graphs = match &self.graphs {
            GraphSource::Fixed(g) => vec![g],
            GraphSource::Timeline(_) => (first..=last).map(|t| self.graph_at(t).expect("timeline")).collect(),
            GraphSource::Learned => Vec::new(),
        };
        let mut targets = Vec::with_capacity(anchors.len() * n);
        let mut valid = Vec::with_capacity(anchors.len() * n);
        for &a in anchors {
            for i in 0..n {
                targets.push(if self.label(i, a) { 1.0 } else { 0.0 });
                valid.push(self.features.valid(i, a));
            }
        }
        let batch = Batch {
            n_nodes: n,
            window: len,
            n_features: f,
            features: feats,
            graphs,
        };
        (batch, anchors.iter().map(|a| a - first).collect(), targets, valid)
    }

    fn pos_weight(&self, anchors: &[usize], cap: f64) -> Result<f64, TrainError> {
        let (mut pos, mut neg) = (0u64, 0u64);
        for &a in anchors {
            for i in 0..self.n_tokens() {
                if self.features.valid(i, a) {
                    if self.label(i, a) {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
        }
        if pos == 0 {
            return Err(TrainError::NoPositivesInTrain);
        }
        Ok((neg as f64 / pos as f64).min(cap).max(1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

pub struct FitResult {
    pub seed: u64,
    pub params: ParamStore,
    pub gamma: f64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub pos_weight: f64,
    pub parameter_count: usize,
}

/// Probabilities, targets and validity over a set of anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub anchors: Vec<usize>,
    pub probs: Vec<f64>,
    pub labels: Vec<bool>,
    pub valid: Vec<bool>,
    pub loss: f64,
}

impl Scored {
    pub fn token_of(&self, n_tokens: usize) -> Vec<usize> {
        (0..self.probs.len()).map(|k| k % n_tokens).collect()
    }

    pub fn valid_pairs(&self) -> (Vec<f64>, Vec<bool>) {
        self.probs
            .iter()
            .zip(&self.labels)
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|((p, y), _)| (*p, *y))
            .unzip()
    }
}

/// Eval-mode scoring over anchors, batched and fanned out over threads.
pub fn score(
    prep: &Prepared,
    model: &StGnn,
    params: &ParamStore,
    anchors: &[usize],
    batch_anchors: usize,
    pos_weight: f64,
) -> Result<Scored, TrainError> {
    let chunks: Vec<&[usize]> = anchors.chunks(batch_anchors.max(1)).collect();
    let parts: Vec<Result<(Vec<f64>, Vec<f64>, Vec<bool>), TrainError>> = chunks
        .par_iter()
        .map(|chunk| {
            let (span, ends, targets, valid) = prep.span(chunk);
            let mut tape = Tape::new();
            let l = model.span_logits(&mut tape, params, &span, &ends)?;
            Ok((tape.value(l).data().to_vec(), targets, valid))
        })
        .collect();
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut valid = Vec::new();
    for p in parts {
        let (l, t, v) = p?;
        logits.extend(l);
        targets.extend(t);
        valid.extend(v);
    }
    let loss = if valid.iter().any(|v| *v) {
        bce_loss(&logits, &targets, &valid, pos_weight)?
    } else {
        f64::NAN
    };
    Ok(Scored {
        anchors: anchors.to_vec(),
        probs: logits.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        labels: targets.iter().map(|y| *y > 0.5).collect(),
        valid,
        loss,
    })
}

/// F1-maximising threshold over midpoints of the sorted unique
/// probabilities (bounded by 0 and 1) and 0.5; ties go to the larger
/// threshold. Returns `(gamma, f1)`.
pub fn select_threshold(probs: &[f64], labels: &[bool]) -> (f64, f64) {
    let positives = labels.iter().filter(|l| **l).count() as u64;
    if positives == 0 {
        log::warn!("no positives for threshold selection; using 0.5");
        return (0.5, 0.0);
    }
    // descending scores with labels
    let mut obs: Vec<(f64, bool)> = probs.iter().copied().zip(labels.iter().copied()).collect();
    obs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // 0 and 1 bound the sweep so "flag all" and "flag none" are reachable
    let mut uniq: Vec<f64> = std::iter::once(1.0).chain(obs.iter().map(|o| o.0)).chain([0.0]).collect();
    uniq.dedup();
    let mut cands: Vec<f64> = uniq.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    cands.push(0.5);
    // prefix counts by number of predicted positives
    let mut cum_tp = Vec::with_capacity(obs.len() + 1);
    cum_tp.push(0u64);
    for o in &obs {
        cum_tp.push(cum_tp.last().unwrap() + o.1 as u64);
    }
    let f1_at = |g: f64| {
        let k = obs.partition_point(|o| o.0 >= g);
        let tp = cum_tp[k];
        let c = Confusion {
            tp,
            fp: k as u64 - tp,
            fn_: positives - tp,
            tn: 0,
        };
        prf1(&c).2
    };
    let mut best = (0.5, f64::NEG_INFINITY);
    for g in cands {
        let f = f1_at(g);
        if f > best.1 || (f == best.1 && g > best.0) {
            best = (g, f);
        }
    }
    best
}

fn epoch_anchors(train: &[usize], positive: &[bool], keep: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out: Vec<usize> = train
        .iter()
        .zip(positive)
        .filter(|(_, p)| **p || keep >= 1.0 || rng.random::<f64>() < keep)
        .map(|(a, _)| *a)
        .collect();
    out.shuffle(rng);
    out
}

pub fn fit(prep: &Prepared, cfg: &TrainConfig, seed: u64) -> Result<FitResult, TrainError> {
    let model = StGnn::new(cfg.model.clone(), prep.n_tokens())?;
    let mut params = model.init_params(seed)?;
    let parameter_count = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe_f00d_d00d);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let train = prep.train_anchors();
    let val = prep.val_anchors();
    if train.is_empty() {
        return Err(TrainError::EmptyBlock("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyBlock("validation"));
    }
    let pos_weight = prep.pos_weight(&train, cfg.pos_weight_cap)?;
    let positive: Vec<bool> = train
        .iter()
        .map(|&a| (0..prep.n_tokens()).any(|i| prep.label(i, a) && prep.features.valid(i, a)))
        .collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_anchors(&train, &positive, cfg.neg_keep, &mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_anchors) {
            let (batch, targets, valid) = prep.batch(chunk);
            let n_valid = valid.iter().filter(|v| **v).count();
            if n_valid == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let logits = model.logits(&mut tape, &params, &batch, Some(&mut rng))?;
            let loss = tape.bce_with_logits(logits, &targets, &valid, pos_weight)?;
            loss_sum += tape.value(loss).item() * n_valid as f64;
            loss_n += n_valid;
            params.zero_grad();
            tape.backward(loss, &mut params)?;
            params.fill_missing_grads();
            adam_step(&mut params, &adam)?;
        }
        let scored = score(prep, &model, &params, &val, cfg.batch_anchors * 4, pos_weight)?;
        let (vp, vl) = scored.valid_pairs();
        let (_, val_f1) = select_threshold(&vp, &vl);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_loss: scored.loss,
            val_f1,
        };
        log::debug!("seed {seed} epoch {epoch}: {rec:?}");
        history.push(rec);
        if best.as_ref().is_none_or(|b| scored.loss < b.0) {
            best = Some((scored.loss, params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_params, best_epoch) = best.expect("at least one epoch");
    let scored = score(prep, &model, &best_params, &val, cfg.batch_anchors * 4, pos_weight)?;
    let (vp, vl) = scored.valid_pairs();
    let (gamma, _) = select_threshold(&vp, &vl);
    Ok(FitResult {
        seed,
        params: best_params,
        gamma,
        history,
        best_epoch,
        pos_weight,
        parameter_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestMetrics {
    pub gamma: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pr_auc: f64,
}

pub fn test_metrics(scored: &Scored, gamma: f64) -> TestMetrics {
    let preds: Vec<bool> = scored.probs.iter().map(|p| *p >= gamma).collect();
    let confusion = Confusion::from_predictions(&preds, &scored.labels, &scored.valid);
    let (precision, recall, f1) = prf1(&confusion);
    let pr_auc = pr_curve(&scored.probs, &scored.labels, &scored.valid).map_or(f64::NAN, |c| c.auc);
    TestMetrics {
        gamma,
        confusion,
        precision,
        recall,
        f1,
        pr_auc,
    }
}

/// Scores the test block once with the frozen parameters and threshold.
pub fn evaluate_test(prep: &Prepared, cfg: &TrainConfig, fit: &FitResult) -> Result<(Scored, TestMetrics), TrainError> {
    let model = StGnn::new(cfg.model.clone(), prep.n_tokens())?;
    let anchors = prep.test_anchors();
    if anchors.is_empty() {
        return Err(TrainError::EmptyBlock("test"));
    }
    let scored = score(prep, &model, &fit.params, &anchors, cfg.batch_anchors * 4, fit.pos_weight)?;
    let m = test_metrics(&scored, fit.gamma);
    Ok((scored, m))
}

pub struct SeedRun {
    pub fit: FitResult,
    pub test: Scored,
    pub metrics: TestMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn summarize(metric: &str, values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricSummary {
        metric: metric.to_string(),
        mean,
        std,
        values: values.to_vec(),
    }
}

pub struct ProtocolReport {
    pub runs: Vec<SeedRun>,
    pub failed: Vec<(u64, String)>,
    pub aggregate: Vec<MetricSummary>,
    pub test_reads: usize,
}

impl ProtocolReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.aggregate.iter().find(|m| m.metric == name)
    }

    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(w);
        let mut header = vec!["metric".to_string(), "mean".into(), "std".into()];
        header.extend(self.runs.iter().map(|r| format!("seed_{}", r.fit.seed)));
        wr.write_record(&header)?;
        for m in &self.aggregate {
            let mut row = vec![m.metric.clone(), m.mean.to_string(), m.std.to_string()];
            row.extend(m.values.iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: W) -> Result<(), TrainError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "train_loss", "val_loss", "val_f1"])?;
    for r in history {
        wr.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_f1.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Trains every seed (in parallel), evaluates each once on test with its own
/// frozen threshold and aggregates.
pub fn run_protocol(prep: &Prepared, cfg: &TrainConfig) -> ProtocolReport {
    let before = prep.test_reads();
    let outcomes: Vec<(u64, Result<SeedRun, TrainError>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = fit(prep, cfg, seed).and_then(|fit| {
                let (test, metrics) = evaluate_test(prep, cfg, &fit)?;
                Ok(SeedRun { fit, test, metrics })
            });
            (seed, run)
        })
        .collect();
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => failed.push((seed, e.to_string())),
        }
    }
    let mut report = ProtocolReport::from_runs(runs, failed);
    report.test_reads = prep.test_reads() - before;
    report
}

impl ProtocolReport {
    /// Aggregates per-seed test metrics (in the given seed order).
    pub fn from_runs(runs: Vec<SeedRun>, failed: Vec<(u64, String)>) -> Self {
        let col = |f: fn(&SeedRun) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
        let aggregate = if runs.is_empty() {
            Vec::new()
        } else {
            vec![
                summarize("precision", &col(|r| r.metrics.precision)),
                summarize("recall", &col(|r| r.metrics.recall)),
                summarize("f1", &col(|r| r.metrics.f1)),
                summarize("pr_auc", &col(|r| r.metrics.pr_auc)),
                summarize("gamma", &col(|r| r.metrics.gamma)),
                summarize("best_epoch", &col(|r| r.fit.best_epoch as f64)),
            ]
        };
        ProtocolReport {
            runs,
            failed,
            aggregate,
            test_reads: 0,
        }
    }
}
