//! Seeded synthetic hourly market with injected pump events.
//!
//! Log activity of every token is its base level plus a cluster-shared AR(1)
//! factor, a daily cycle and idiosyncratic noise. Two kinds of bursts are
//! added on top:
//!
//! * cluster shocks hit every member of a cluster at once and are unlabeled;
//! * pumps hit one token (the labeled hour is the peak), with a weaker
//!   spillover on its cluster partners.
//!
//! Both raise trades, volume and buy pressure, so a single token's series
//! cannot always tell them apart while its neighbours can.

use std::io::Write;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::panel::{assemble_panel, fmt_ts, parse_ts, Candle, CandleSeries, Panel, PanelError, PumpEvent};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("config infeasible: {0}")]
    ConfigInfeasible(String),
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_tokens: usize,
    pub n_hours: usize,
    pub n_pumps: usize,
    pub n_clusters: usize,
    pub seed: u64,
    pub start: DateTime<Utc>,
    /// Peak multiplier range on num_trades for pumps.
    pub pump_trades_factor: (f64, f64),
    /// Peak multiplier range on volume for pumps.
    pub pump_volume_factor: (f64, f64),
    /// Partners receive `factor^spillover`.
    pub spillover: f64,
    /// Unlabeled cluster-wide bursts.
    pub n_shocks: usize,
    pub shock_factor: (f64, f64),
    pub latent_ar: f64,
    pub latent_vol: f64,
    pub idio_vol: f64,
    pub price_drift: f64,
    pub price_vol: f64,
    /// Minimum spacing between two pumps of one token, in hours.
    pub min_gap: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tokens: 20,
            n_hours: 4000,
            n_pumps: 40,
            n_clusters: 4,
            seed: 0,
            start: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
            pump_trades_factor: (5.0, 12.0),
            pump_volume_factor: (5.0, 15.0),
            spillover: 0.35,
            n_shocks: 40,
            shock_factor: (3.0, 10.0),
            latent_ar: 0.95,
            latent_vol: 0.12,
            idio_vol: 0.2,
            price_drift: 0.0,
            price_vol: 0.01,
            min_gap: 24,
        }
    }
}

/// First hour eligible for a pump: 12 hours of rolling history plus one.
pub const FIRST_PUMP_HOUR: usize = 13;
/// Hours a burst may last.
const MAX_BURST: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct InjectedPump {
    pub token: usize,
    pub symbol: String,
    pub hour: usize,
    pub cluster: usize,
    pub spike_factor: f64,
    pub duration: usize,
}

#[derive(Clone, Debug)]
pub struct SynthMarket {
    pub panel: Panel,
    pub events: Vec<PumpEvent>,
    pub pumps: Vec<InjectedPump>,
    pub clusters: Vec<usize>,
}

pub fn token_symbol(i: usize) -> String {
    format!("TK{i:03}")
}

pub fn cluster_of(i: usize, n_tokens: usize, n_clusters: usize) -> usize {
    i * n_clusters / n_tokens
}

pub const SYNTH_CONFIG_KEYS: [&str; 20] = [
    "n_tokens",
    "n_hours",
    "n_pumps",
    "n_clusters",
    "seed",
    "start",
    "pump_trades_min",
    "pump_trades_max",
    "pump_volume_min",
    "pump_volume_max",
    "spillover",
    "n_shocks",
    "shock_min",
    "shock_max",
    "latent_ar",
    "latent_vol",
    "idio_vol",
    "price_drift",
    "price_vol",
    "min_gap",
];

impl SynthConfig {
    /// Applies one `key=value`; unknown keys are rejected with the valid list.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), SynthError> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, SynthError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| SynthError::Config(format!("{k}: {e}")))
        }
        match k {
            "n_tokens" => self.n_tokens = num(k, v)?,
            "n_hours" => self.n_hours = num(k, v)?,
            "n_pumps" => self.n_pumps = num(k, v)?,
            "n_clusters" => self.n_clusters = num(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "start" => self.start = parse_ts(v).map_err(|e| SynthError::Config(format!("{k}: {e}")))?,
            "pump_trades_min" => self.pump_trades_factor.0 = num(k, v)?,
            "pump_trades_max" => self.pump_trades_factor.1 = num(k, v)?,
            "pump_volume_min" => self.pump_volume_factor.0 = num(k, v)?,
            "pump_volume_max" => self.pump_volume_factor.1 = num(k, v)?,
            "spillover" => self.spillover = num(k, v)?,
            "n_shocks" => self.n_shocks = num(k, v)?,
            "shock_min" => self.shock_factor.0 = num(k, v)?,
            "shock_max" => self.shock_factor.1 = num(k, v)?,
            "latent_ar" => self.latent_ar = num(k, v)?,
            "latent_vol" => self.latent_vol = num(k, v)?,
            "idio_vol" => self.idio_vol = num(k, v)?,
            "price_drift" => self.price_drift = num(k, v)?,
            "price_vol" => self.price_vol = num(k, v)?,
            "min_gap" => self.min_gap = num(k, v)?,
            _ => {
                return Err(SynthError::Config(format!(
                    "unknown key `{k}` (valid: {})",
                    SYNTH_CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "n_tokens={}\nn_hours={}\nn_pumps={}\nn_clusters={}\nseed={}\nstart={}\n\
             pump_trades_min={}\npump_trades_max={}\npump_volume_min={}\npump_volume_max={}\n\
             spillover={}\nn_shocks={}\nshock_min={}\nshock_max={}\nlatent_ar={}\nlatent_vol={}\n\
             idio_vol={}\nprice_drift={}\nprice_vol={}\nmin_gap={}\n",
            self.n_tokens,
            self.n_hours,
            self.n_pumps,
            self.n_clusters,
            self.seed,
            fmt_ts(self.start),
            self.pump_trades_factor.0,
            self.pump_trades_factor.1,
            self.pump_volume_factor.0,
            self.pump_volume_factor.1,
            self.spillover,
            self.n_shocks,
            self.shock_factor.0,
            self.shock_factor.1,
            self.latent_ar,
            self.latent_vol,
            self.idio_vol,
            self.price_drift,
            self.price_vol,
            self.min_gap,
        )
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInfeasible(m));
        if self.n_tokens == 0 || self.n_clusters == 0 || self.n_clusters > self.n_tokens {
            return bad(format!(
                "{} tokens cannot form {} clusters",
                self.n_tokens, self.n_clusters
            ));
        }
        if self.n_hours < FIRST_PUMP_HOUR + MAX_BURST + 1 {
            return bad(format!("{} hours leave no room for events", self.n_hours));
        }
        for (name, (lo, hi)) in [
            ("pump_trades_factor", self.pump_trades_factor),
            ("pump_volume_factor", self.pump_volume_factor),
            ("shock_factor", self.shock_factor),
        ] {
            if !(lo > 1.0 && hi >= lo) {
                return bad(format!("{name} range ({lo}, {hi}) must satisfy 1 < lo <= hi"));
            }
        }
        let per_token = (self.n_hours - FIRST_PUMP_HOUR - MAX_BURST) / self.min_gap.max(1);
        let slots = per_token * self.n_tokens;
        if self.n_pumps > slots {
            return bad(format!("{} pumps exceed {slots} available slots", self.n_pumps));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Burst profile: full factor at the first hour, then geometric decay.
fn burst_multiplier(factor: f64, k: usize) -> f64 {
    factor.powf(0.5f64.powi(k as i32))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthMarket, SynthError> {
    cfg.validate()?;
    let (n, t_len) = (cfg.n_tokens, cfg.n_hours);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let clusters: Vec<usize> = (0..n).map(|i| cluster_of(i, n, cfg.n_clusters)).collect();

    // cluster factors
    let mut latent = vec![0.0; cfg.n_clusters * t_len];
    for k in 0..cfg.n_clusters {
        let mut x = 0.0;
        for t in 0..t_len {
            x = cfg.latent_ar * x + cfg.latent_vol * std_normal.sample(&mut rng);
            latent[k * t_len + t] = x;
        }
    }

    // pumps: (token, hour), at least min_gap apart on one token
    let mut pumps: Vec<InjectedPump> = Vec::with_capacity(cfg.n_pumps);
    let hi = t_len - MAX_BURST;
    let mut attempts = 0usize;
    while pumps.len() < cfg.n_pumps {
        attempts += 1;
        if attempts > 1000 * (cfg.n_pumps + 1) {
            return Err(SynthError::ConfigInfeasible(format!(
                "could only place {} of {} pumps",
                pumps.len(),
                cfg.n_pumps
            )));
        }
        let token = rng.random_range(0..n);
        let hour = rng.random_range(FIRST_PUMP_HOUR..hi);
        if pumps
            .iter()
            .any(|p| p.token == token && p.hour.abs_diff(hour) < cfg.min_gap.max(MAX_BURST + 1))
        {
            continue;
        }
        let spike_factor = uniform(&mut rng, cfg.pump_trades_factor);
        let duration = rng.random_range(1..=MAX_BURST);
        pumps.push(InjectedPump {
            token,
            symbol: token_symbol(token),
            hour,
            cluster: clusters[token],
            spike_factor,
            duration,
        });
    }
    pumps.sort_by_key(|p| (p.hour, p.token));

    // log multipliers for trades and volume, and buy-pressure bumps
    let mut trades_boost = vec![0.0; n * t_len];
    let mut volume_boost = vec![0.0; n * t_len];
    let mut buy_boost = vec![0.0f64; n * t_len];
    let mut price_kick = vec![0.0; n * t_len];
    for p in &pumps {
        let vol_factor = uniform(&mut rng, cfg.pump_volume_factor);
        for k in 0..p.duration {
            let t = p.hour + k;
            for j in 0..n {
                let share = if j == p.token {
                    1.0
                } else if clusters[j] == p.cluster {
                    cfg.spillover
                } else {
                    continue;
                };
                trades_boost[j * t_len + t] += share * burst_multiplier(p.spike_factor, k).ln();
                volume_boost[j * t_len + t] += share * burst_multiplier(vol_factor, k).ln();
                buy_boost[j * t_len + t] = buy_boost[j * t_len + t].max(share * 0.3 * 0.5f64.powi(k as i32));
            }
            if k == 0 {
                price_kick[p.token * t_len + t] += 0.08;
            }
        }
    }
    for _ in 0..cfg.n_shocks {
        let k = rng.random_range(0..cfg.n_clusters);
        let hour = rng.random_range(FIRST_PUMP_HOUR..hi);
        let factor = uniform(&mut rng, cfg.shock_factor);
        let duration = rng.random_range(1..=MAX_BURST);
        for d in 0..duration {
            for j in (0..n).filter(|j| clusters[*j] == k) {
                // members react with some dispersion
                let f = burst_multiplier(factor, d).ln() * rng.random_range(0.7..1.3);
                trades_boost[j * t_len + hour + d] += f;
                volume_boost[j * t_len + hour + d] += f * rng.random_range(0.9..1.2);
                buy_boost[j * t_len + hour + d] = buy_boost[j * t_len + hour + d].max(0.25 * 0.5f64.powi(d as i32));
            }
        }
    }

    let mut series = Vec::with_capacity(n);
    for i in 0..n {
        let base_trades: f64 = rng.random_range(4.0..7.0);
        let trade_size: f64 = rng.random_range(5.0..500.0);
        let mut log_price: f64 = rng.random_range(-3.0..3.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut candles = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let c = i * t_len + t;
            let daily = 0.3 * (std::f64::consts::TAU * (t % 24) as f64 / 24.0 + phase).sin();
            let shared = latent[clusters[i] * t_len + t];
            let log_trades = base_trades + shared + daily + cfg.idio_vol * std_normal.sample(&mut rng) + trades_boost[c];
            let num_trades = log_trades.exp().round().max(1.0) as u64;
            let size_noise = (0.1 * std_normal.sample(&mut rng)).exp();
            let volume = num_trades as f64 * trade_size * size_noise * (volume_boost[c] - trades_boost[c]).exp();
            let open = log_price.exp();
            log_price += cfg.price_drift + cfg.price_vol * std_normal.sample(&mut rng) + price_kick[c];
            let close = log_price.exp();
            let wick = |rng: &mut ChaCha8Rng| (0.004 * std_normal.sample(rng)).abs();
            let high = open.max(close) * (1.0 + wick(&mut rng));
            let low = open.min(close) * (1.0 - wick(&mut rng)).max(0.5);
            let vwap = (open + close + high + low) / 4.0;
            let buy_ratio = (0.5 + 0.04 * std_normal.sample(&mut rng) + buy_boost[c]).clamp(0.02, 0.98);
            let taker_buy_base = volume * buy_ratio;
            let candle = Candle {
                open_time: cfg.start + Duration::hours(t as i64),
                open,
                high,
                low,
                close,
                volume,
                quote_asset_volume: volume * vwap,
                num_trades,
                taker_buy_base,
                taker_buy_quote: taker_buy_base * vwap,
            };
            debug_assert!(candle.check().is_ok());
            candles.push(candle);
            // mean-revert the post-pump price so kicks do not accumulate
            log_price -= 0.5 * price_kick[c];
        }
        series.push((token_symbol(i), CandleSeries::new(candles)?));
    }

    let events: Vec<PumpEvent> = pumps
        .iter()
        .map(|p| PumpEvent::new(p.symbol.clone(), cfg.start + Duration::hours(p.hour as i64)))
        .collect();
    let panel = assemble_panel(series, &events)?;
    Ok(SynthMarket {
        panel,
        events,
        pumps,
        clusters,
    })
}

pub fn write_ground_truth<W: Write>(m: &SynthMarket, w: W) -> Result<(), SynthError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["symbol", "timestamp_utc", "cluster", "spike_factor"])?;
    for p in &m.pumps {
        wr.write_record([
            p.symbol.clone(),
            fmt_ts(m.panel.timestamp(p.hour)),
            p.cluster.to_string(),
            p.spike_factor.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
