//! Per-(token, hour) feature vectors and lookback windows.
//!
//! Nine raw candle columns, eight engineered columns (percentage change of
//! 12-hour rolling statistics) and the UTC hour. A cell is valid only when
//! its candle exists and every engineered ingredient is defined; invalid
//! cells hold zeros.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;

use crate::panel::{fmt_ts, hour_of_day, Candle, CandleField, Panel};

pub const ROLLING_WINDOW: usize = 12;
pub const PCT_EPS: f64 = 1e-12;
const STD_FLOOR: f64 = 1e-8;

pub const FEATURE_NAMES: [&str; 18] = [
    "open",
    "high",
    "low",
    "close",
    "volume",
    "quote_asset_volume",
    "num_trades",
    "taker_buy_base",
    "taker_buy_quote",
    "std_rush_order",
    "avg_rush_order",
    "std_trades",
    "std_volume",
    "std_price",
    "avg_volume",
    "avg_price",
    "avg_price_max",
    "hour_of_the_day",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("rolling window {w} exceeds series length {len}")]
    WindowTooLarge { w: usize, len: usize },
    #[error("rolling window must be >= {min} for {kind:?}")]
    WindowTooSmall { min: usize, kind: RollingKind },
    #[error("anchor {anchor} has fewer than {needed} predecessors for window {w}")]
    InsufficientHistory { anchor: usize, w: usize, needed: usize },
    #[error("anchor {0} outside the panel")]
    AnchorOutOfRange(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RollingKind {
    Mean,
    Std,
}

/// Trailing-window mean or sample standard deviation. Output `t` is `None`
/// until `w` consecutive defined inputs end at `t`.
pub fn rolling_stat(series: &[Option<f64>], w: usize, kind: RollingKind) -> Result<Vec<Option<f64>>, FeatureError> {
    if w == 0 || (kind == RollingKind::Std && w < 2) {
        return Err(FeatureError::WindowTooSmall {
            min: if kind == RollingKind::Std { 2 } else { 1 },
            kind,
        });
    }
    if w > series.len() {
        return Err(FeatureError::WindowTooLarge { w, len: series.len() });
    }
    let mut out = vec![None; series.len()];
    let mut run = 0usize;
    for t in 0..series.len() {
        run = if series[t].is_some() { run + 1 } else { 0 };
        if run < w {
            continue;
        }
        let win = series[t + 1 - w..=t].iter().map(|x| x.expect("inside run"));
        let wf = w as f64;
        out[t] = Some(match kind {
            RollingKind::Mean => win.sum::<f64>() / wf,
            RollingKind::Std => {
                // deviations from the first sample make constant runs exactly 0
                let x0 = series[t + 1 - w].expect("inside run");
                let md = win.clone().map(|x| x - x0).sum::<f64>() / wf;
                let ss: f64 = win.map(|x| (x - x0 - md) * (x - x0 - md)).sum();
                (ss / (wf - 1.0)).sqrt()
            }
        });
    }
    Ok(out)
}

/// `(s[t] - s[t-1]) / s[t-1]`, undefined at `t = 0`, for missing inputs and
/// for denominators within [`PCT_EPS`] of zero.
pub fn pct_change(series: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = vec![None; series.len()];
    for t in 1..series.len() {
        if let (Some(prev), Some(cur)) = (series[t - 1], series[t]) {
            if prev.abs() > PCT_EPS {
                out[t] = Some((cur - prev) / prev);
            }
        }
    }
    out
}

/// Taker-buy share of quote volume; undefined when quote volume is zero.
pub fn buy_pressure(candles: &[Option<&Candle>]) -> Vec<Option<f64>> {
    candles
        .iter()
        .map(|c| {
            c.and_then(|c| (c.quote_asset_volume > 0.0).then(|| c.taker_buy_quote / c.quote_asset_volume))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePanel {
    n_tokens: usize,
    n_hours: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl FeaturePanel {
    pub fn feature_names(&self) -> &'static [&'static str] {
        &FEATURE_NAMES
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_hours(&self) -> usize {
        self.n_hours
    }

    pub fn n_features(&self) -> usize {
        N_FEATURES
    }

    pub fn row(&self, i: usize, t: usize) -> &[f64] {
        let o = (i * self.n_hours + t) * N_FEATURES;
        &self.values[o..o + N_FEATURES]
    }

    pub fn get(&self, i: usize, t: usize, f: usize) -> f64 {
        self.row(i, t)[f]
    }

    pub fn valid(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.n_hours + t]
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn write_csv<W: Write>(&self, panel: &Panel, w: W) -> Result<(), FeatureError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["symbol".to_string(), "timestamp_utc".to_string()];
        header.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
        header.push("flag".into());
        header.push("valid".into());
        wr.write_record(&header)?;
        for (i, sym) in panel.tokens().iter().enumerate() {
            for t in 0..self.n_hours {
                let mut rec = vec![sym.clone(), fmt_ts(panel.timestamp(t))];
                rec.extend(self.row(i, t).iter().map(|v| v.to_string()));
                rec.push(if panel.label(i, t) { "1" } else { "0" }.into());
                rec.push(if self.valid(i, t) { "1" } else { "0" }.into());
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

fn token_features(panel: &Panel, i: usize) -> (Vec<f64>, Vec<bool>) {
    let t_len = panel.n_hours();
    let w = ROLLING_WINDOW;
    let candles: Vec<Option<&Candle>> = (0..t_len).map(|t| panel.candle(i, t)).collect();
    let field = |f: CandleField| panel.series(i, f);
    let roll = |s: &[Option<f64>], kind| {
        if s.len() < w {
            vec![None; s.len()]
        } else {
            rolling_stat(s, w, kind).expect("window checked")
        }
    };
    let bp = buy_pressure(&candles);
    let trades = field(CandleField::NumTrades);
    let volume = field(CandleField::Volume);
    let close = field(CandleField::Close);
    let high = field(CandleField::High);
    let engineered = [
        pct_change(&roll(&bp, RollingKind::Std)),
        pct_change(&roll(&bp, RollingKind::Mean)),
        pct_change(&roll(&trades, RollingKind::Std)),
        pct_change(&roll(&volume, RollingKind::Std)),
        pct_change(&roll(&close, RollingKind::Std)),
        pct_change(&roll(&volume, RollingKind::Mean)),
        pct_change(&roll(&close, RollingKind::Mean)),
        pct_change(&roll(&high, RollingKind::Mean)),
    ];
    let raw_fields = [
        CandleField::Open,
        CandleField::High,
        CandleField::Low,
        CandleField::Close,
        CandleField::Volume,
        CandleField::QuoteAssetVolume,
        CandleField::NumTrades,
        CandleField::TakerBuyBase,
        CandleField::TakerBuyQuote,
    ];
    let mut values = vec![0.0; t_len * N_FEATURES];
    let mut mask = vec![false; t_len];
    for t in 0..t_len {
        let Some(c) = candles[t] else { continue };
        if engineered.iter().any(|e| e[t].is_none()) {
            continue;
        }
        mask[t] = true;
        let row = &mut values[t * N_FEATURES..(t + 1) * N_FEATURES];
        for (k, f) in raw_fields.iter().enumerate() {
            row[k] = f.get(c);
        }
        for (k, e) in engineered.iter().enumerate() {
            row[9 + k] = e[t].expect("checked");
        }
        row[17] = hour_of_day(panel.timestamp(t)) as f64;
    }
    (values, mask)
}

pub fn build_feature_matrix(panel: &Panel) -> FeaturePanel {
    let per_token: Vec<(Vec<f64>, Vec<bool>)> = (0..panel.n_tokens())
        .into_par_iter()
        .map(|i| token_features(panel, i))
        .collect();
    let mut values = Vec::with_capacity(panel.n_tokens() * panel.n_hours() * N_FEATURES);
    let mut mask = Vec::with_capacity(panel.n_tokens() * panel.n_hours());
    for (v, m) in per_token {
        values.extend(v);
        mask.extend(m);
    }
    FeaturePanel {
        n_tokens: panel.n_tokens(),
        n_hours: panel.n_hours(),
        values,
        mask,
    }
}

/// Per-feature affine scaling fitted on a set of hours.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Mean and population std over valid cells in `hours`. Features with
    /// std below 1e-8 get a unit divisor (centred only).
    pub fn fit(fp: &FeaturePanel, hours: Range<usize>) -> Self {
        let mut sum = vec![0.0; N_FEATURES];
        let mut count = 0usize;
        for i in 0..fp.n_tokens {
            for t in hours.clone() {
                if fp.valid(i, t) {
                    sum.iter_mut().zip(fp.row(i, t)).for_each(|(s, v)| *s += v);
                    count += 1;
                }
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; N_FEATURES];
        for i in 0..fp.n_tokens {
            for t in hours.clone() {
                if fp.valid(i, t) {
                    for (k, v) in fp.row(i, t).iter().enumerate() {
                        sq[k] += (v - mean[k]) * (v - mean[k]);
                    }
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, fp: &FeaturePanel) -> FeaturePanel {
        let mut out = fp.clone();
        for cell in 0..fp.n_tokens * fp.n_hours {
            if !fp.mask[cell] {
                continue;
            }
            let row = &mut out.values[cell * N_FEATURES..(cell + 1) * N_FEATURES];
            for k in 0..N_FEATURES {
                row[k] = (row[k] - self.mean[k]) / self.std[k];
            }
        }
        out
    }
}

/// Fits on `train_hours` and applies everywhere.
pub fn standardize(fp: &FeaturePanel, train_hours: Range<usize>) -> (FeaturePanel, Standardizer) {
    let s = Standardizer::fit(fp, train_hours);
    (s.apply(fp), s)
}

/// `N x W x F` slice ending at (and including) hour `anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTensor {
    pub anchor: usize,
    pub window: usize,
    pub n_tokens: usize,
    pub values: Vec<f64>,
    /// Per-node validity of the anchor cell.
    pub anchor_valid: Vec<bool>,
    /// False for nodes whose whole window is masked.
    pub valid_nodes: Vec<bool>,
}

impl WindowTensor {
    pub fn at(&self, i: usize, u: usize) -> &[f64] {
        let o = (i * self.window + u) * N_FEATURES;
        &self.values[o..o + N_FEATURES]
    }
}

pub fn make_window(fp: &FeaturePanel, anchor: usize, w: usize) -> Result<WindowTensor, FeatureError> {
    if anchor >= fp.n_hours {
        return Err(FeatureError::AnchorOutOfRange(anchor));
    }
    if w == 0 || anchor + 1 < w {
        return Err(FeatureError::InsufficientHistory {
            anchor,
            w,
            needed: w.saturating_sub(1),
        });
    }
    let start = anchor + 1 - w;
    let mut values = Vec::with_capacity(fp.n_tokens * w * N_FEATURES);
    let mut valid_nodes = vec![false; fp.n_tokens];
    let mut anchor_valid = vec![false; fp.n_tokens];
    for i in 0..fp.n_tokens {
        for t in start..=anchor {
            values.extend_from_slice(fp.row(i, t));
            valid_nodes[i] |= fp.valid(i, t);
        }
        anchor_valid[i] = fp.valid(i, anchor);
    }
    Ok(WindowTensor {
        anchor,
        window: w,
        n_tokens: fp.n_tokens,
        values,
        anchor_valid,
        valid_nodes,
    })
}
