//! Precision, recall, F1, precision-recall curves and per-token reports.
//!
//! Masked observations (`valid[i] == false`) never enter a count.

use std::fmt::Write as _;
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no positive labels among valid observations")]
    NoPositives,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_predictions(preds: &[bool], labels: &[bool], valid: &[bool]) -> Self {
        let mut c = Self::default();
        for ((&p, &y), &v) in preds.iter().zip(labels).zip(valid) {
            if !v {
                continue;
            }
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(precision, recall, f1)` with every 0/0 taken as 0.
pub fn prf1(c: &Confusion) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// One point per distinct probability, thresholds descending.
    pub points: Vec<PrPoint>,
    pub positives: u64,
    pub auc: f64,
}

/// Curve over the valid observations; a point predicts positive for
/// `p >= threshold`.
pub fn pr_curve(probs: &[f64], labels: &[bool], valid: &[bool]) -> Result<PrCurve, MetricsError> {
    if probs.len() != labels.len() || probs.len() != valid.len() {
        return Err(MetricsError::Length(format!(
            "{} probs, {} labels, {} mask",
            probs.len(),
            labels.len(),
            valid.len()
        )));
    }
    let mut obs: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((p, y), _)| (*p, *y))
        .collect();
    let positives = obs.iter().filter(|o| o.1).count() as u64;
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    obs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut k = 0;
    while k < obs.len() {
        let thr = obs[k].0;
        while k < obs.len() && obs[k].0 == thr {
            if obs[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(PrPoint {
            threshold: thr,
            tp,
            fp,
            recall: ratio(tp, positives),
            precision: ratio(tp, tp + fp),
        });
    }
    let auc = trapezoid_auc(&points);
    Ok(PrCurve { points, positives, auc })
}

/// Trapezoid over recall, starting from recall 0 at the first point's
/// precision.
fn trapezoid_auc(points: &[PrPoint]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let (mut r0, mut p0) = (0.0, first.precision);
    let mut auc = 0.0;
    for pt in points {
        auc += (pt.recall - r0) * (pt.precision + p0) / 2.0;
        r0 = pt.recall;
        p0 = pt.precision;
    }
    auc
}

impl PrCurve {
    /// `(precision, recall)` of the rule `p >= gamma`.
    pub fn at(&self, gamma: f64) -> (f64, f64) {
        match self.points.iter().rev().find(|p| p.threshold >= gamma) {
            Some(p) => (p.precision, p.recall),
            None => (0.0, 0.0),
        }
    }

    /// Points with `recall >= min_recall` (presentation filter).
    pub fn view_min_recall(&self, min_recall: f64) -> Vec<PrPoint> {
        self.points.iter().copied().filter(|p| p.recall >= min_recall).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W, min_recall: f64) -> Result<(), MetricsError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["threshold", "recall", "precision"])?;
        for p in self.view_min_recall(min_recall) {
            wr.write_record([p.threshold.to_string(), p.recall.to_string(), p.precision.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenReport {
    pub symbol: String,
    pub events: u64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics per token over observations tagged with `token_of[k]`; tokens
/// with fewer than `min_events` valid positives are left out.
pub fn per_token_report(
    preds: &[bool],
    labels: &[bool],
    valid: &[bool],
    token_of: &[usize],
    tokens: &[String],
    min_events: u64,
) -> Vec<TokenReport> {
    let mut conf = vec![Confusion::default(); tokens.len()];
    for k in 0..preds.len() {
        let c = Confusion::from_predictions(&preds[k..=k], &labels[k..=k], &valid[k..=k]);
        conf[token_of[k]].add(&c);
    }
    tokens
        .iter()
        .zip(conf)
        .filter(|(_, c)| c.tp + c.fn_ >= min_events)
        .map(|(s, c)| {
            let (precision, recall, f1) = prf1(&c);
            TokenReport {
                symbol: s.clone(),
                events: c.tp + c.fn_,
                confusion: c,
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

pub fn write_token_report<W: Write>(rows: &[TokenReport], w: W) -> Result<(), MetricsError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["symbol", "events", "tp", "fp", "fn", "tn", "precision", "recall", "f1"])?;
    for r in rows {
        let c = &r.confusion;
        wr.write_record([
            r.symbol.clone(),
            r.events.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Line chart of precision against recall for each named curve, restricted
/// to `recall >= min_recall`.
pub fn pr_chart_svg(curves: &[(String, Vec<PrPoint>)], min_recall: f64) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let (w, h, m) = (480.0, 360.0, 48.0);
    let sx = |r: f64| m + (r - min_recall) / (1.0 - min_recall).max(1e-9) * (w - 2.0 * m);
    let sy = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">precision</text>"#, h / 2.0, h / 2.0);
    for k in 0..=4 {
        let r = min_recall + (1.0 - min_recall) * k as f64 / 4.0;
        let p = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{r:.2}</text>"#, sx(r), h - m + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{p:.2}</text>"#, m - 4.0, sy(p) + 4.0);
    }
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<_> = pts.iter().filter(|p| p.recall >= min_recall).collect();
        if !pts.is_empty() {
            let path: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.recall), sy(p.precision)))
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - m - 110.0,
            m + 14.0 * (i as f64 + 1.0),
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
