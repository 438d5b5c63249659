//! Hourly kline download from a spot-exchange style REST endpoint.

use chrono::{DateTime, Utc};
use serde_json::Value;
use std::time::Duration;

const HOUR_MS: i64 = 3_600_000;
const EXCERPT_LEN: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("http {status}: {excerpt}")]
    HttpError { status: u16, excerpt: String },
    #[error("rate limited (retry after {retry_after:?}s)")]
    RateLimited { retry_after: Option<u64> },
    #[error("transport: {0}")]
    Transport(String),
    #[error("end time precedes start time")]
    BadRange,
}

#[derive(Clone, Debug)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<u64>,
}

pub trait Transport: Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, FetchError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, FetchError> {
        let mut resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse().ok());
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        Ok(HttpResponse { status, body, retry_after })
    }
}

#[derive(Clone, Debug)]
pub struct FetchOptions {
    pub page_limit: usize,
    pub attempts: usize,
    pub backoff: Duration,
    /// Upper bound on a server supplied Retry-After.
    pub max_retry_after: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        FetchOptions {
            page_limit: 1000,
            attempts: 3,
            backoff: Duration::from_millis(500),
            max_retry_after: Duration::from_secs(60),
        }
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

fn get_with_retry(
    transport: &dyn Transport,
    url: &str,
    opts: &FetchOptions,
) -> Result<String, FetchError> {
    let attempts = opts.attempts.max(1);
    let mut last = FetchError::Transport("no attempt made".into());
    for k in 0..attempts {
        let wait = opts.backoff * 2u32.saturating_pow(k as u32);
        match transport.get(url) {
            Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
            Ok(r) if r.status == 429 || r.status == 418 => {
                let pause = r
                    .retry_after
                    .map(Duration::from_secs)
                    .unwrap_or(wait)
                    .min(opts.max_retry_after);
                last = FetchError::RateLimited { retry_after: r.retry_after };
                if k + 1 < attempts {
                    std::thread::sleep(pause);
                }
            }
            Ok(r) if r.status >= 500 => {
                last = FetchError::HttpError { status: r.status, excerpt: excerpt(&r.body) };
                if k + 1 < attempts {
                    std::thread::sleep(wait);
                }
            }
            Ok(r) => {
                return Err(FetchError::HttpError { status: r.status, excerpt: excerpt(&r.body) })
            }
            Err(e) => {
                last = e;
                if k + 1 < attempts {
                    std::thread::sleep(wait);
                }
            }
        }
    }
    Err(last)
}

fn field_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Converts one JSON page into comma-joined kline rows.
pub fn page_rows(body: &str) -> Result<Vec<(i64, String)>, FetchError> {
    let bad = || FetchError::HttpError { status: 200, excerpt: excerpt(body) };
    let v: Value = serde_json::from_str(body).map_err(|_| bad())?;
    let arr = v.as_array().ok_or_else(bad)?;
    let mut out = Vec::with_capacity(arr.len());
    for row in arr {
        let fields = row.as_array().ok_or_else(bad)?;
        if fields.len() < 11 {
            return Err(bad());
        }
        let open = fields[0].as_i64().ok_or_else(bad)?;
        let text: Option<Vec<String>> = fields.iter().map(field_text).collect();
        out.push((open, text.ok_or_else(bad)?.join(",")));
    }
    Ok(out)
}

/// Downloads 1h klines for `symbol` over `[start, end]` and returns rows in
/// the layout accepted by `panel::parse_kline_rows`.
pub fn fetch_klines(
    transport: &dyn Transport,
    endpoint: &str,
    symbol: &str,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    opts: &FetchOptions,
) -> Result<Vec<String>, FetchError> {
    if end < start {
        return Err(FetchError::BadRange);
    }
    let end_ms = end.timestamp_millis();
    let mut cursor = start.timestamp_millis();
    let limit = opts.page_limit.clamp(1, 1000);
    let mut rows = Vec::new();
    let mut last_open: Option<i64> = None;
    while cursor <= end_ms {
        let url = format!(
            "{endpoint}?symbol={symbol}&interval=1h&startTime={cursor}&endTime={end_ms}&limit={limit}"
        );
        let body = get_with_retry(transport, &url, opts)?;
        let page = page_rows(&body)?;
        if page.is_empty() {
            break;
        }
        for (open, row) in page {
            if last_open.is_some_and(|l| open <= l) {
                continue;
            }
            if open > end_ms {
                break;
            }
            last_open = Some(open);
            rows.push(row);
        }
        match last_open {
            Some(l) if l + HOUR_MS > cursor => cursor = l + HOUR_MS,
            _ => break,
        }
    }
    Ok(rows)
}
