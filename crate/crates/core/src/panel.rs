//! Hourly candle panels: kline parsing, pump-label alignment, CSV I/O and the
//! chronological train/validation/test split with embargo.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeZone, Timelike, Utc};

pub const HOUR_MS: i64 = 3_600_000;
const HOUR_S: i64 = 3_600;

#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(String),
    #[error("row {row}: candle violates invariants ({reason})")]
    InvalidCandle { row: usize, reason: String },
    #[error("pump event for {symbol} at {time} falls outside the panel grid")]
    EventOffGrid { symbol: String, time: String },
    #[error("pump event references unknown token {0}")]
    UnknownToken(String),
    #[error("panel needs at least one non-empty token series")]
    EmptyPanel,
    #[error("panel of {t} hours is too short for a split with embargo {z}")]
    PanelTooShort { t: usize, z: usize },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("bad timestamp `{0}`")]
    BadTimestamp(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candle {
    pub open_time: DateTime<Utc>,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    pub quote_asset_volume: f64,
    pub num_trades: u64,
    pub taker_buy_base: f64,
    pub taker_buy_quote: f64,
}

impl Candle {
    pub fn check(&self) -> Result<(), String> {
        if !(self.open_time.timestamp() % HOUR_S == 0 && self.open_time.timestamp_subsec_nanos() == 0) {
            return Err(format!("open_time {} is not an hour boundary", fmt_ts(self.open_time)));
        }
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite()) {
            return Err("non-finite price".into());
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(format!(
                "low/high {}/{} do not bracket open/close {}/{}",
                self.low, self.high, self.open, self.close
            ));
        }
        let vols = [self.volume, self.quote_asset_volume, self.taker_buy_base, self.taker_buy_quote];
        if vols.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("negative or non-finite volume".into());
        }
        Ok(())
    }
}

/// Candles of one token sorted by `open_time`, without duplicates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandleSeries(Vec<Candle>);

impl CandleSeries {
    pub fn new(mut candles: Vec<Candle>) -> Result<Self, PanelError> {
        candles.sort_by_key(|c| c.open_time);
        if let Some(w) = candles.windows(2).find(|w| w[0].open_time == w[1].open_time) {
            return Err(PanelError::DuplicateTimestamp(fmt_ts(w[0].open_time)));
        }
        Ok(Self(candles))
    }

    pub fn candles(&self) -> &[Candle] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PumpEvent {
    pub symbol: String,
    pub raw_time: DateTime<Utc>,
    pub snapped_time: DateTime<Utc>,
}

impl PumpEvent {
    pub fn new(symbol: impl Into<String>, raw_time: DateTime<Utc>) -> Self {
        Self {
            symbol: symbol.into(),
            raw_time,
            snapped_time: snap_pump_time(raw_time),
        }
    }
}

pub fn fmt_ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Accepts RFC 3339 or a naive `YYYY-MM-DD[ T]HH:MM[:SS]` taken as UTC.
pub fn parse_ts(s: &str) -> Result<DateTime<Utc>, PanelError> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(n) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(Utc.from_utc_datetime(&n));
        }
    }
    Err(PanelError::BadTimestamp(s.to_string()))
}

pub fn ts_from_ms(ms: i64) -> Option<DateTime<Utc>> {
    Utc.timestamp_millis_opt(ms).single()
}

/// Nearest hour boundary; exactly half past rounds up.
pub fn snap_pump_time(raw: DateTime<Utc>) -> DateTime<Utc> {
    let secs = raw.timestamp();
    let floor = secs.div_euclid(HOUR_S) * HOUR_S;
    let offset_ns = (secs - floor) as i128 * 1_000_000_000 + raw.timestamp_subsec_nanos() as i128;
    let snapped = if offset_ns >= 1_800 * 1_000_000_000 {
        floor + HOUR_S
    } else {
        floor
    };
    Utc.timestamp_opt(snapped, 0).single().expect("in range")
}

/// Parses exchange kline rows (`open_time_ms, open, high, low, close, volume,
/// close_time_ms, quote_asset_volume, num_trades, taker_buy_base,
/// taker_buy_quote, ...`). Row numbers in errors are 1-based.
pub fn parse_kline_rows<S: AsRef<str>>(rows: &[S]) -> Result<CandleSeries, PanelError> {
    let mut candles = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let row_no = i + 1;
        let line = row.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 11 {
            return Err(PanelError::MalformedRow {
                row: row_no,
                reason: format!("expected at least 11 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize, name: &str| -> Result<f64, PanelError> {
            fields[k].parse::<f64>().map_err(|_| PanelError::MalformedRow {
                row: row_no,
                reason: format!("field {name} = `{}` is not a number", fields[k]),
            })
        };
        let open_ms: i64 = fields[0].parse().map_err(|_| PanelError::MalformedRow {
            row: row_no,
            reason: format!("open_time `{}` is not an integer", fields[0]),
        })?;
        let open_time = ts_from_ms(open_ms).ok_or_else(|| PanelError::MalformedRow {
            row: row_no,
            reason: format!("open_time {open_ms} out of range"),
        })?;
        let num_trades: u64 = fields[8].parse().map_err(|_| PanelError::MalformedRow {
            row: row_no,
            reason: format!("num_trades `{}` is not a count", fields[8]),
        })?;
        let candle = Candle {
            open_time,
            open: num(1, "open")?,
            high: num(2, "high")?,
            low: num(3, "low")?,
            close: num(4, "close")?,
            volume: num(5, "volume")?,
            quote_asset_volume: num(7, "quote_asset_volume")?,
            num_trades,
            taker_buy_base: num(9, "taker_buy_base")?,
            taker_buy_quote: num(10, "taker_buy_quote")?,
        };
        candle
            .check()
            .map_err(|reason| PanelError::InvalidCandle { row: row_no, reason })?;
        candles.push(candle);
    }
    CandleSeries::new(candles)
}

/// Aligned token x hour grid with pump labels. Node index = position in
/// `tokens`, which is sorted lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    tokens: Vec<String>,
    start: DateTime<Utc>,
    hours: usize,
    candles: Vec<Option<Candle>>,
    labels: Vec<bool>,
}

impl Panel {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_hours(&self) -> usize {
        self.hours
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn timestamp(&self, t: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::hours(t as i64)
    }

    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        (0..self.hours).map(|t| self.timestamp(t)).collect()
    }

    /// Grid position of `ts`, if it lies on the grid.
    pub fn hour_index(&self, ts: DateTime<Utc>) -> Option<usize> {
        let d = ts.signed_duration_since(self.start);
        if d.num_seconds() < 0 || d.num_seconds() % HOUR_S != 0 || d.subsec_nanos() != 0 {
            return None;
        }
        let t = (d.num_seconds() / HOUR_S) as usize;
        (t < self.hours).then_some(t)
    }

    pub fn token_index(&self, symbol: &str) -> Option<usize> {
        self.tokens.binary_search_by(|s| s.as_str().cmp(symbol)).ok()
    }

    pub fn candle(&self, i: usize, t: usize) -> Option<&Candle> {
        self.candles[i * self.hours + t].as_ref()
    }

    pub fn candle_mut(&mut self, i: usize, t: usize) -> Option<&mut Candle> {
        self.candles[i * self.hours + t].as_mut()
    }

    pub fn label(&self, i: usize, t: usize) -> bool {
        self.labels[i * self.hours + t]
    }

    pub fn set_label(&mut self, i: usize, t: usize, v: bool) {
        self.labels[i * self.hours + t] = v;
    }

    pub fn n_positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn n_present(&self) -> usize {
        self.candles.iter().filter(|c| c.is_some()).count()
    }

    /// Hour indices at which at least one token is labelled.
    pub fn event_hours(&self) -> Vec<usize> {
        (0..self.hours)
            .filter(|&t| (0..self.tokens.len()).any(|i| self.label(i, t)))
            .collect()
    }

    /// Scalar series of token `i` as `f64` (missing hours give `None`).
    pub fn series(&self, i: usize, field: CandleField) -> Vec<Option<f64>> {
        (0..self.hours)
            .map(|t| self.candle(i, t).map(|c| field.get(c)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandleField {
    Open,
    High,
    Low,
    Close,
    Volume,
    QuoteAssetVolume,
    NumTrades,
    TakerBuyBase,
    TakerBuyQuote,
}

impl CandleField {
    pub fn get(self, c: &Candle) -> f64 {
        match self {
            Self::Open => c.open,
            Self::High => c.high,
            Self::Low => c.low,
            Self::Close => c.close,
            Self::Volume => c.volume,
            Self::QuoteAssetVolume => c.quote_asset_volume,
            Self::NumTrades => c.num_trades as f64,
            Self::TakerBuyBase => c.taker_buy_base,
            Self::TakerBuyQuote => c.taker_buy_quote,
        }
    }
}

/// Aligns per-token series on the union of their spans and attaches labels
/// from snapped pump events.
pub fn assemble_panel(
    series: impl IntoIterator<Item = (String, CandleSeries)>,
    events: &[PumpEvent],
) -> Result<Panel, PanelError> {
    let by_symbol: BTreeMap<String, CandleSeries> = series.into_iter().collect();
    let first = by_symbol.values().filter_map(|s| s.candles().first()).map(|c| c.open_time).min();
    let last = by_symbol.values().filter_map(|s| s.candles().last()).map(|c| c.open_time).max();
    let (Some(start), Some(end)) = (first, last) else {
        return Err(PanelError::EmptyPanel);
    };
    let hours = ((end - start).num_seconds() / HOUR_S) as usize + 1;
    let tokens: Vec<String> = by_symbol.keys().cloned().collect();
    let mut candles = vec![None; tokens.len() * hours];
    for (i, s) in by_symbol.values().enumerate() {
        for c in s.candles() {
            let t = ((c.open_time - start).num_seconds() / HOUR_S) as usize;
            candles[i * hours + t] = Some(c.clone());
        }
    }
    let mut panel = Panel {
        tokens,
        start,
        hours,
        candles,
        labels: vec![false; by_symbol.len() * hours],
    };
    for ev in events {
        let i = panel
            .token_index(&ev.symbol)
            .ok_or_else(|| PanelError::UnknownToken(ev.symbol.clone()))?;
        let t = panel.hour_index(ev.snapped_time).ok_or_else(|| PanelError::EventOffGrid {
            symbol: ev.symbol.clone(),
            time: fmt_ts(ev.snapped_time),
        })?;
        panel.set_label(i, t, true);
    }
    Ok(panel)
}

/// Chronological split with the first `embargo` hours of the validation and
/// test blocks discarded. Ranges index the panel's hour grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub embargo: usize,
}

impl SplitIndex {
    pub fn block_of(&self, t: usize) -> Option<Block> {
        if self.train.contains(&t) {
            Some(Block::Train)
        } else if self.val.contains(&t) {
            Some(Block::Val)
        } else if self.test.contains(&t) {
            Some(Block::Test)
        } else {
            None
        }
    }

    pub fn range(&self, b: Block) -> Range<usize> {
        match b {
            Block::Train => self.train.clone(),
            Block::Val => self.val.clone(),
            Block::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Train,
    Val,
    Test,
}

pub fn chronological_split(
    n_hours: usize,
    fractions: (f64, f64, f64),
    embargo: usize,
) -> Result<SplitIndex, PanelError> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(PanelError::BadFractions(fractions));
    }
    if n_hours <= 2 * embargo + 3 {
        return Err(PanelError::PanelTooShort { t: n_hours, z: embargo });
    }
    let n_train = (a * n_hours as f64 + 1e-9).floor() as usize;
    let n_val = (b * n_hours as f64 + 1e-9).floor() as usize;
    let val_start = n_train;
    let test_start = n_train + n_val;
    if n_train == 0 || n_val <= embargo || n_hours - test_start <= embargo {
        return Err(PanelError::PanelTooShort { t: n_hours, z: embargo });
    }
    Ok(SplitIndex {
        train: 0..n_train,
        val: val_start + embargo..test_start,
        test: test_start + embargo..n_hours,
        embargo,
    })
}

pub const PANEL_HEADER: [&str; 12] = [
    "symbol",
    "timestamp_utc",
    "open",
    "high",
    "low",
    "close",
    "volume",
    "quote_asset_volume",
    "num_trades",
    "taker_buy_base",
    "taker_buy_quote",
    "flag",
];

/// Writes rows sorted by (symbol, timestamp). Missing candles produce no row
/// unless labelled, in which case the numeric fields are left empty.
pub fn write_panel_csv<W: Write>(panel: &Panel, w: W) -> Result<(), PanelError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(PANEL_HEADER)?;
    for (i, sym) in panel.tokens.iter().enumerate() {
        for t in 0..panel.hours {
            let flag = if panel.label(i, t) { "1" } else { "0" };
            let ts = fmt_ts(panel.timestamp(t));
            match panel.candle(i, t) {
                Some(c) => wr.write_record([
                    sym.clone(),
                    ts,
                    c.open.to_string(),
                    c.high.to_string(),
                    c.low.to_string(),
                    c.close.to_string(),
                    c.volume.to_string(),
                    c.quote_asset_volume.to_string(),
                    c.num_trades.to_string(),
                    c.taker_buy_base.to_string(),
                    c.taker_buy_quote.to_string(),
                    flag.to_string(),
                ])?,
                None if panel.label(i, t) => {
                    let mut rec = vec![sym.clone(), ts];
                    rec.extend(std::iter::repeat_n(String::new(), 9));
                    rec.push(flag.to_string());
                    wr.write_record(rec)?
                }
                None => {}
            }
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_panel_csv<R: Read>(r: R) -> Result<Panel, PanelError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let mut series: BTreeMap<String, Vec<Candle>> = BTreeMap::new();
    let mut events = Vec::new();
    let mut symbols = BTreeSet::new();
    for (k, rec) in rd.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() < PANEL_HEADER.len() {
            return Err(PanelError::MalformedRow {
                row,
                reason: format!("expected {} fields, found {}", PANEL_HEADER.len(), rec.len()),
            });
        }
        let sym = rec[0].to_string();
        let ts = parse_ts(&rec[1])?;
        symbols.insert(sym.clone());
        let flag = match &rec[11] {
            "0" => false,
            "1" => true,
            other => {
                return Err(PanelError::MalformedRow {
                    row,
                    reason: format!("flag `{other}` is not 0 or 1"),
                })
            }
        };
        if flag {
            events.push(PumpEvent {
                symbol: sym.clone(),
                raw_time: ts,
                snapped_time: ts,
            });
        }
        if rec[2].is_empty() {
            continue;
        }
        let num = |j: usize| -> Result<f64, PanelError> {
            rec[j].parse::<f64>().map_err(|_| PanelError::MalformedRow {
                row,
                reason: format!("field {} = `{}` is not a number", PANEL_HEADER[j], &rec[j]),
            })
        };
        let candle = Candle {
            open_time: ts,
            open: num(2)?,
            high: num(3)?,
            low: num(4)?,
            close: num(5)?,
            volume: num(6)?,
            quote_asset_volume: num(7)?,
            num_trades: rec[8].parse().map_err(|_| PanelError::MalformedRow {
                row,
                reason: format!("num_trades `{}` is not a count", &rec[8]),
            })?,
            taker_buy_base: num(9)?,
            taker_buy_quote: num(10)?,
        };
        candle.check().map_err(|reason| PanelError::InvalidCandle { row, reason })?;
        series.entry(sym).or_default().push(candle);
    }
    let mut built = Vec::new();
    for sym in symbols {
        let candles = series.remove(&sym).unwrap_or_default();
        built.push((sym, CandleSeries::new(candles)?));
    }
    assemble_panel(built, &events)
}

/// Pump schedule CSV with header `symbol,timestamp_utc`.
pub fn read_pump_schedule<R: Read>(r: R) -> Result<Vec<PumpEvent>, PanelError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let mut out = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(PanelError::MalformedRow {
                row: k + 2,
                reason: "expected symbol,timestamp_utc".into(),
            });
        }
        out.push(PumpEvent::new(rec[0].trim(), parse_ts(&rec[1])?));
    }
    Ok(out)
}

pub fn write_pump_schedule<W: Write>(events: &[PumpEvent], w: W) -> Result<(), PanelError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["symbol", "timestamp_utc"])?;
    for e in events {
        wr.write_record([e.symbol.clone(), fmt_ts(e.raw_time)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Hour of day of a grid timestamp.
pub fn hour_of_day(ts: DateTime<Utc>) -> u32 {
    ts.hour()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_ts(s).unwrap()
    }

    fn candle_at(t: DateTime<Utc>, close: f64, trades: u64) -> Candle {
        Candle {
            open_time: t,
            open: close,
            high: close * 1.01,
            low: close * 0.99,
            close,
            volume: 10.0,
            quote_asset_volume: 10.0 * close,
            num_trades: trades,
            taker_buy_base: 4.0,
            taker_buy_quote: 4.0 * close,
        }
    }

    fn hourly(start: &str, n: usize) -> CandleSeries {
        let s = ts(start);
        CandleSeries::new(
            (0..n)
                .map(|k| candle_at(s + chrono::Duration::hours(k as i64), 1.0 + k as f64, 10 + k as u64))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_kline_row() {
        let rows = ["1609459200000,1.0,1.2,0.9,1.1,500,1609462799999,550,50,300,30,0"];
        let s = parse_kline_rows(&rows).unwrap();
        let c = &s.candles()[0];
        assert_eq!(c.open, 1.0);
        assert_eq!(c.close, 1.1);
        assert_eq!(c.num_trades, 50);
        assert_eq!(c.taker_buy_quote, 30.0);
        assert_eq!(c.open_time, ts("2021-01-01T00:00:00Z"));
    }

    #[test]
    fn empty_input_gives_empty_series() {
        let rows: [&str; 0] = [];
        assert!(parse_kline_rows(&rows).unwrap().is_empty());
    }

    #[test]
    fn duplicate_open_time_rejected() {
        let rows = [
            "1609459200000,1,1,1,1,5,0,5,1,1,1",
            "1609459200000,1,1,1,1,5,0,5,1,1,1",
        ];
        assert!(matches!(parse_kline_rows(&rows), Err(PanelError::DuplicateTimestamp(_))));
    }

    #[test]
    fn malformed_rows_report_row_number() {
        let rows = ["1609459200000,1,1,1,1,5,0,5,1,1,1", "1609462800000,1,1,x,1,5,0,5,1,1,1"];
        match parse_kline_rows(&rows) {
            Err(PanelError::MalformedRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        let short = ["1609459200000,1,1,1"];
        assert!(matches!(parse_kline_rows(&short), Err(PanelError::MalformedRow { row: 1, .. })));
    }

    #[test]
    fn snapping_enumeration() {
        assert_eq!(snap_pump_time(ts("2021-03-04T15:59:00Z")), ts("2021-03-04T16:00:00Z"));
        assert_eq!(snap_pump_time(ts("2021-03-04T15:00:00Z")), ts("2021-03-04T15:00:00Z"));
        assert_eq!(snap_pump_time(ts("2021-03-04T15:29:00Z")), ts("2021-03-04T15:00:00Z"));
        assert_eq!(snap_pump_time(ts("2021-03-04T15:29:59Z")), ts("2021-03-04T15:00:00Z"));
        assert_eq!(snap_pump_time(ts("2021-03-04T15:30:00Z")), ts("2021-03-04T16:00:00Z"));
        assert_eq!(snap_pump_time(ts("2021-03-04T15:31:00Z")), ts("2021-03-04T16:00:00Z"));
        assert_eq!(snap_pump_time(ts("2021-03-04T23:45:00Z")), ts("2021-03-05T00:00:00Z"));
    }

    #[test]
    fn grid_is_union_of_spans() {
        let p = assemble_panel(
            vec![
                ("B".to_string(), hourly("2021-01-01T02:00:00Z", 6)),
                ("A".to_string(), hourly("2021-01-01T00:00:00Z", 6)),
            ],
            &[PumpEvent::new("A", ts("2021-01-01T03:10:00Z"))],
        )
        .unwrap();
        assert_eq!(p.n_hours(), 8);
        assert_eq!(p.tokens(), ["A", "B"]);
        assert!(p.candle(1, 0).is_none() && p.candle(1, 2).is_some());
        assert!(p.label(0, 3));
        assert_eq!(p.n_positives(), 1);
    }

    #[test]
    fn off_grid_event_is_reported() {
        let err = assemble_panel(
            vec![("A".to_string(), hourly("2021-01-01T00:00:00Z", 3))],
            &[PumpEvent::new("A", ts("2021-01-02T00:00:00Z"))],
        )
        .unwrap_err();
        assert!(matches!(err, PanelError::EventOffGrid { .. }));
    }

    #[test]
    fn assembly_is_order_invariant() {
        let a = ("A".to_string(), hourly("2021-01-01T00:00:00Z", 4));
        let b = ("B".to_string(), hourly("2021-01-01T01:00:00Z", 4));
        let c = ("C".to_string(), hourly("2021-01-01T03:00:00Z", 2));
        let ev = [PumpEvent::new("C", ts("2021-01-01T04:00:00Z"))];
        let p1 = assemble_panel(vec![a.clone(), b.clone(), c.clone()], &ev).unwrap();
        let p2 = assemble_panel(vec![c, a, b], &ev).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn split_enumeration_t100_z5() {
        let s = chronological_split(100, (0.6, 0.2, 0.2), 5).unwrap();
        // 1-based ts[1..60], ts[66..80], ts[86..100]
        assert_eq!(s.train, 0..60);
        assert_eq!(s.val, 65..80);
        assert_eq!(s.test, 85..100);
        assert_eq!(s.train.len() + s.val.len() + s.test.len() + 2 * 5, 100);
    }

    #[test]
    fn split_without_embargo_is_contiguous() {
        let s = chronological_split(100, (0.6, 0.2, 0.2), 0).unwrap();
        assert_eq!((s.train.end, s.val.start, s.val.end, s.test.start), (60, 60, 80, 80));
    }

    #[test]
    fn split_too_short() {
        assert!(matches!(
            chronological_split(12, (0.6, 0.2, 0.2), 5),
            Err(PanelError::PanelTooShort { .. })
        ));
    }

    proptest! {
        #[test]
        fn split_covers_grid(t in 14usize..5000, z in 0usize..6) {
            if let Ok(s) = chronological_split(t, (0.6, 0.2, 0.2), z) {
                prop_assert_eq!(s.train.len() + s.val.len() + s.test.len() + 2 * z, t);
                prop_assert!(s.train.end <= s.val.start && s.val.end <= s.test.start);
                prop_assert_eq!(s.train.len(), (6 * t) / 10);
            }
        }

        #[test]
        fn panel_csv_round_trip(
            closes in proptest::collection::vec(0.001f64..1e5, 3..30),
            gap in 1usize..3,
            label_at in 0usize..3,
        ) {
            let start = ts("2022-06-01T00:00:00Z");
            let mk = |k: usize| candle_at(start + chrono::Duration::hours(k as i64), closes[k], k as u64 * 7);
            let a: Vec<Candle> = (0..closes.len()).filter(|k| *k != gap).map(mk).collect();
            let b: Vec<Candle> = (1..closes.len()).map(mk).collect();
            let events = [
                PumpEvent::new("AAA", start + chrono::Duration::hours(label_at as i64)),
                PumpEvent::new("BBB", start + chrono::Duration::hours(2)),
            ];
            let p = assemble_panel(
                vec![("AAA".into(), CandleSeries::new(a).unwrap()), ("BBB".into(), CandleSeries::new(b).unwrap())],
                &events,
            ).unwrap();
            let mut buf = Vec::new();
            write_panel_csv(&p, &mut buf).unwrap();
            let back = read_panel_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, p);
        }
    }

    #[test]
    fn schedule_parses_iso_timestamps() {
        let csv = "symbol,timestamp_utc\nAAA,2021-02-03T04:31:00Z\nBBB,2021-02-03 04:10:00\n";
        let ev = read_pump_schedule(csv.as_bytes()).unwrap();
        assert_eq!(ev[0].snapped_time, ts("2021-02-03T05:00:00Z"));
        assert_eq!(ev[1].snapped_time, ts("2021-02-03T04:00:00Z"));
    }
}
