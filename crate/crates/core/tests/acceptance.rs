//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any check fails.

use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pumpwatch_core::features::{build_feature_matrix, Standardizer};
use pumpwatch_core::graphcraft::{
    adaptive_adjacency, adaptive_adjacency_values, build_dynamic_timeline, build_static_graph, pearson_matrix,
    quantile_threshold, Adjacency, CorrelationGraphConfig, GraphStrategy, SignalKind,
};
use pumpwatch_core::metrics::{pr_curve, prf1, Confusion};
use pumpwatch_core::numcore::{gradient_check, GradCheckOptions, ParamStore, Tape, Tensor};
use pumpwatch_core::panel::{assemble_panel, chronological_split, Candle, CandleSeries, Panel, PumpEvent};
use pumpwatch_core::stgnn::{Batch, ModelConfig, ModelError, StGnn};
use pumpwatch_core::synthmarket::{generate, SynthConfig};
use pumpwatch_core::trainer::{run_protocol, Prepared, ProtocolReport, TrainConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- oracles

fn oracle_pearson(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            if i == j {
                continue;
            }
            let mi = (0..rows).map(|r| x[r * cols + i]).sum::<f64>() / rows as f64;
            let mj = (0..rows).map(|r| x[r * cols + j]).sum::<f64>() / rows as f64;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for r in 0..rows {
                let a = x[r * cols + i] - mi;
                let b = x[r * cols + j] - mj;
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
            }
            out[i * cols + j] = if sxx == 0.0 || syy == 0.0 { 0.0 } else { sxy / (sxx * syy).sqrt() };
        }
    }
    out
}

fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= v.len() {
        return v[lo];
    }
    v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo])
}

fn upper(c: &[f64], n: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j, c[i * n + j]));
        }
    }
    out
}

fn oracle_signal(panel: &Panel, hours: &[usize]) -> Vec<f64> {
    let n = panel.n_tokens();
    let mut out = Vec::with_capacity(hours.len() * n);
    for &t in hours {
        for i in 0..n {
            let s = panel.candle(i, t).map_or(0.0, |c| c.num_trades as f64);
            out.push((1.0 + s).ln());
        }
    }
    out
}

fn undirected_pairs(a: &Adjacency) -> Vec<(usize, usize, f64)> {
    let mut v: Vec<_> = a
        .edges
        .iter()
        .zip(&a.weights)
        .filter(|((s, d), _)| s < d)
        .map(|(&(s, d), &w)| (s, d, w))
        .collect();
    v.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    v
}

fn candle(t: chrono::DateTime<Utc>, trades: u64, price: f64) -> Candle {
    let vol = trades as f64 * 3.0;
    Candle {
        open_time: t,
        open: price,
        high: price * 1.01,
        low: price * 0.99,
        close: price,
        volume: vol,
        quote_asset_volume: vol * price,
        num_trades: trades,
        taker_buy_base: vol * 0.5,
        taker_buy_quote: vol * price * 0.5,
    }
}

// ---------------------------------------------------------------- criteria

fn c2_correlation() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let rows = rng.random_range(2..=40);
        let cols = rng.random_range(2..=20);
        let mut x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        if k % 10 == 0 {
            for r in 0..rows {
                x[r * cols] = 1.5;
            }
        }
        let c = pearson_matrix(&Tensor::new(vec![rows, cols], x.clone()).unwrap()).map_err(|e| e.to_string())?;
        let o = oracle_pearson(rows, cols, &x);
        for i in 0..cols {
            ensure(c.at2(i, i) == 0.0, || format!("panel {k}: nonzero diagonal"))?;
            for j in 0..cols {
                let v = c.at2(i, j);
                ensure(v == c.at2(j, i), || format!("panel {k}: asymmetric at ({i},{j})"))?;
                ensure((-1.0..=1.0).contains(&v), || format!("panel {k}: {v} out of range"))?;
                worst = worst.max((v - o[i * cols + j]).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(worst < 1e-12, || format!("max |delta| {worst:.3e}"))?;
    ensure(secs < 5.0, || format!("runtime {secs:.2}s"))?;
    Ok(format!("50 panels, max |delta| {worst:.1e}, symmetric, zero diagonal, in [-1,1], {secs:.2}s"))
}

fn c3_quantile() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..1000 {
        let n = rng.random_range(2..=12);
        let levels = rng.random_range(1..=8);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.random_range(0..levels) as f64 / levels as f64 * 2.0 - 1.0;
                c[i * n + j] = v;
                c[j * n + i] = v;
            }
        }
        let rho = rng.random_range(0.01..0.99);
        let tau_min = rng.random_range(-1.0..0.5);
        let got = quantile_threshold(&Tensor::new(vec![n, n], c.clone()).unwrap(), rho, tau_min)
            .map_err(|e| e.to_string())?;
        let vals: Vec<f64> = upper(&c, n).into_iter().map(|p| p.2).collect();
        let want = tau_min.max(oracle_quantile(&vals, rho));
        ensure((got - want).abs() < 1e-12, || format!("multiset {k}: {got} vs {want}"))?;
    }
    let mut detail = Vec::new();
    for rho in [0.75, 0.90, 0.95] {
        for seed in 0..5 {
            let m = generate(&SynthConfig {
                n_tokens: 16,
                n_hours: 400,
                n_pumps: 8,
                seed,
                ..SynthConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let cfg = CorrelationGraphConfig { signal: SignalKind::NumTrades, rho, tau_min: -1.0 };
            let g = build_static_graph(&m.panel, 0..240, &cfg).map_err(|e| e.to_string())?;
            let hours: Vec<usize> = (0..240).collect();
            let n = m.panel.n_tokens();
            let c = oracle_pearson(240, n, &oracle_signal(&m.panel, &hours));
            let pairs = upper(&c, n);
            let total = pairs.len();
            let tau = oracle_quantile(&pairs.iter().map(|p| p.2).collect::<Vec<_>>(), rho);
            let above = pairs.iter().filter(|p| p.2 > tau).count();
            let ties = pairs.iter().filter(|p| (p.2 - tau).abs() < 1e-12).count();
            let kept = g.n_edges() / 2;
            ensure(kept == above, || format!("rho {rho}: kept {kept}, oracle {above}"))?;
            let bound = (1.0 - rho) * total as f64 + ties as f64 + 1.0;
            ensure(kept as f64 <= bound, || format!("rho {rho}: kept {kept} > bound {bound}"))?;
            if seed == 0 {
                detail.push(format!("rho {rho}: {kept}/{total}"));
            }
        }
    }
    Ok(format!("1000 multisets match; G1 edges {}", detail.join(", ")))
}

fn scripted_g2_panel() -> (Panel, Vec<usize>) {
    let start = Utc.with_ymd_and_hms(2022, 3, 1, 0, 0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let symbols = ["AAA", "BBB", "CCC", "DDD", "EEE", "FFF"];
    let t_len = 100;
    let common: Vec<f64> = (0..t_len).map(|_| rng.random_range(0.0..1.0)).collect();
    let series = symbols.iter().enumerate().map(|(i, s)| {
        let load = [0.9, 0.8, 0.7, 0.2, 0.1, 0.0][i];
        let candles = (0..t_len)
            .map(|t| {
                let x = load * common[t] + (1.0 - load) * rng.random_range(0.0..1.0);
                candle(start + Duration::hours(t as i64), (20.0 + 200.0 * x) as u64, 1.0 + i as f64)
            })
            .collect();
        (s.to_string(), CandleSeries::new(candles).unwrap())
    });
    let series: Vec<_> = series.collect();
    let pumps = [(0usize, 20usize), (3, 35), (1, 50)];
    let events: Vec<PumpEvent> = pumps
        .iter()
        .map(|&(i, t)| PumpEvent::new(symbols[i], start + Duration::hours(t as i64) + Duration::minutes(10)))
        .collect();
    let panel = assemble_panel(series, &events).unwrap();
    (panel, pumps.iter().map(|p| p.1).collect())
}

fn c4_dynamic() -> Check {
    let (panel, pumps) = scripted_g2_panel();
    let split = chronological_split(panel.n_hours(), (0.6, 0.2, 0.2), 5).map_err(|e| e.to_string())?;
    let lookback = 12;
    let cfg = CorrelationGraphConfig { signal: SignalKind::NumTrades, rho: 0.75, tau_min: 0.0 };
    let tl = build_dynamic_timeline(&panel, split.train.clone(), &panel.event_hours(), lookback, &cfg)
        .map_err(|e| e.to_string())?;
    ensure(tl.snapshots.len() == 3, || format!("{} snapshots", tl.snapshots.len()))?;
    let n = panel.n_tokens();
    let mut sums = vec![0.0; n * n];
    let mut counts = vec![0usize; n * n];
    let mut prev: Vec<(usize, usize)> = Vec::new();
    let mut worst = 0.0f64;
    for (k, &p) in pumps.iter().enumerate() {
        let hours: Vec<usize> = (p - lookback..=p).collect();
        let c = oracle_pearson(hours.len(), n, &oracle_signal(&panel, &hours));
        let pairs = upper(&c, n);
        let tau = cfg.tau_min.max(oracle_quantile(&pairs.iter().map(|x| x.2).collect::<Vec<_>>(), cfg.rho));
        for (i, j, v) in pairs {
            if v > tau {
                sums[i * n + j] += v;
                counts[i * n + j] += 1;
            }
        }
        let (sp, snap) = &tl.snapshots[k];
        ensure(*sp == p, || format!("snapshot {k} at hour {sp}, expected {p}"))?;
        let got = undirected_pairs(snap);
        let want: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| counts[i * n + j] > 0)
            .map(|(i, j)| (i, j, sums[i * n + j] / counts[i * n + j] as f64))
            .collect();
        ensure(got.len() == want.len(), || format!("snapshot {k}: {} edges vs oracle {}", got.len(), want.len()))?;
        for (g, w) in got.iter().zip(&want) {
            ensure((g.0, g.1) == (w.0, w.1), || format!("snapshot {k}: edge {:?} vs {:?}", g, w))?;
            worst = worst.max((g.2 - w.2).abs());
        }
        let keys: Vec<(usize, usize)> = got.iter().map(|g| (g.0, g.1)).collect();
        ensure(prev.iter().all(|e| keys.contains(e)), || format!("snapshot {k} dropped an edge"))?;
        prev = keys;
    }
    ensure(worst < 1e-12, || format!("weight |delta| {worst:.3e}"))?;
    for t in 0..pumps[0] {
        ensure(*tl.graph_at(t, &split) == Adjacency::identity(n), || format!("hour {t}: not identity"))?;
    }
    let last = &tl.snapshots.last().unwrap().1;
    for t in split.val.clone().chain(split.test.clone()) {
        ensure(tl.graph_at(t, &split) == last, || format!("hour {t}: not last snapshot"))?;
    }
    let sizes: Vec<usize> = tl.snapshots.iter().map(|s| s.1.n_edges() / 2).collect();
    Ok(format!("edge counts {sizes:?} non-decreasing, weights |delta| {worst:.1e}, graph_at identity/last ok"))
}

fn c5_adaptive() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (10, 4);
    let e1 = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let e2 = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (dense, _) = adaptive_adjacency_values(&e1, &e2, 0.005).map_err(|e| e.to_string())?;
    for i in 0..n {
        let s: f64 = (0..n).map(|j| dense.at2(i, j)).sum();
        ensure((s - 1.0).abs() < 1e-9, || format!("row {i} sums to {s}"))?;
    }
    let z = Tensor::zeros(&[n, d]);
    let (dense, _) = adaptive_adjacency_values(&z, &z, 0.005).map_err(|e| e.to_string())?;
    ensure(dense.data().iter().all(|v| (v - 1.0 / n as f64).abs() < 1e-15), || "zero embeddings not uniform".into())?;
    let z84 = Tensor::zeros(&[84, 48]);
    let (_, adj) = adaptive_adjacency_values(&z84, &z84, 0.005).map_err(|e| e.to_string())?;
    ensure(adj.n_edges() == 84 * 84, || format!("N=84 uniform graph has {} edges", adj.n_edges()))?;

    let mut store = ParamStore::new();
    store.insert("e1", e1).map_err(|e| e.to_string())?;
    store.insert("e2", e2).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let a = tape.param(&store, "e1").map_err(|e| e.to_string())?;
    let b = tape.param(&store, "e2").map_err(|e| e.to_string())?;
    let g = adaptive_adjacency(&mut tape, a, b, 0.005).map_err(|e| e.to_string())?;
    let probe = tape.leaf(Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let prod = tape.mul(g.dense, probe).map_err(|e| e.to_string())?;
    let loss = tape.reduce_sum(prod).map_err(|e| e.to_string())?;
    tape.backward(loss, &mut store).map_err(|e| e.to_string())?;
    for name in ["e1", "e2"] {
        let norm: f64 = store.get(name).and_then(|p| p.grad.as_ref()).map_or(0.0, |g| g.data().iter().map(|v| v * v).sum());
        ensure(norm > 0.0, || format!("{name} received no gradient"))?;
    }
    Ok("rows sum to 1, zero embeddings uniform, N=84 fully dense, E1/E2 gradients nonzero".into())
}

fn c6_gradcheck() -> Check {
    let t0 = Instant::now();
    let n = 5;
    let pairs: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 0.6)).collect();
    let g = Adjacency::from_undirected(n, &pairs);
    let mut g_alt = g.clone();
    g_alt.edges.push((4, 0));
    g_alt.weights.push(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let features: Vec<f64> = (0..2 * n * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let targets: Vec<f64> = (0..2 * n).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let valid = vec![true; 2 * n];
    let mut parts = Vec::new();
    for strategy in [GraphStrategy::Static, GraphStrategy::Dynamic, GraphStrategy::Adaptive, GraphStrategy::Identity] {
        let cfg = ModelConfig {
            strategy,
            n_features: 4,
            d_model: 8,
            heads: 2,
            window: 3,
            dropout: 0.0,
            temporal_layers: 1,
            d_embed: 3,
            epsilon: 0.005,
        };
        let m = StGnn::new(cfg, n).map_err(|e| e.to_string())?;
        let mut s = m.init_params(7).map_err(|e| e.to_string())?;
        // zero biases put bias-only rows exactly on a ReLU kink; check at a generic point
        for (_, p) in s.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let graphs = if strategy == GraphStrategy::Dynamic {
            vec![&g, &g_alt, &g, &g_alt, &g, &g]
        } else {
            vec![&g]
        };
        let batch = Batch { n_nodes: n, window: 3, n_features: 4, features: features.clone(), graphs };
        let report = gradient_check::<ModelError, _>(
            &s,
            |s, tape| {
                let l = m.logits(tape, s, &batch, None)?;
                Ok(tape.bce_with_logits(l, &targets, &valid, 3.0)?)
            },
            GradCheckOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let err = report.max_rel_err();
        ensure(err < 1e-4, || format!("{strategy}: max rel err {err:.3e} at {:?}", report.worst()))?;
        parts.push(format!("{strategy} {err:.1e}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("runtime {secs:.1}s"))?;
    Ok(format!("max rel err {}, {secs:.1}s", parts.join(", ")))
}

fn c7_protocol() -> Check {
    let s = chronological_split(100, (0.6, 0.2, 0.2), 5).map_err(|e| e.to_string())?;
    // 1-based ts[1..60], ts[66..80], ts[86..100]
    ensure(s.train == (0..60) && s.val == (65..80) && s.test == (85..100), || format!("{s:?}"))?;

    let m = generate(&SynthConfig { n_tokens: 10, n_hours: 600, n_pumps: 12, seed: 7, ..SynthConfig::default() })
        .map_err(|e| e.to_string())?;
    let split = chronological_split(m.panel.n_hours(), (0.6, 0.2, 0.2), 5).map_err(|e| e.to_string())?;
    let cfg = CorrelationGraphConfig { signal: SignalKind::NumTrades, rho: 0.9, tau_min: 0.15 };
    let snapshot = |p: &Panel| -> Result<_, String> {
        let g1 = build_static_graph(p, split.train.clone(), &cfg).map_err(|e| e.to_string())?;
        let g2 = build_dynamic_timeline(p, split.train.clone(), &p.event_hours(), 12, &cfg).map_err(|e| e.to_string())?;
        let st = Standardizer::fit(&build_feature_matrix(p), split.train.clone());
        Ok((g1, g2, st))
    };
    let before = snapshot(&m.panel)?;
    let mut mutated = m.panel.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..mutated.n_tokens() {
        for t in split.train.end..mutated.n_hours() {
            if let Some(c) = mutated.candle_mut(i, t) {
                let f = rng.random_range(0.1..10.0);
                c.num_trades = (c.num_trades as f64 * f) as u64 + 1;
                c.volume *= f;
                c.quote_asset_volume *= f;
                c.taker_buy_base *= f * 0.5;
                c.taker_buy_quote *= f * 0.5;
                c.close *= f;
                c.open *= f;
                c.high = c.open.max(c.close) * 1.1;
                c.low = c.open.min(c.close) * 0.9;
            }
            mutated.set_label(i, t, rng.random_bool(0.05));
        }
    }
    let after = snapshot(&mutated)?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(before.0 == after.0 && bits(&before.0.weights) == bits(&after.0.weights), || "G1 changed".into())?;
    ensure(before.1 == after.1, || "G2 timeline changed".into())?;
    ensure(
        bits(&before.2.mean) == bits(&after.2.mean) && bits(&before.2.std) == bits(&after.2.std),
        || "standardizer changed".into(),
    )?;
    Ok(format!(
        "split ts[1..60]/[66..80]/[86..100]; val/test mutation leaves G1 ({} edges), G2 ({} snapshots), standardizer bit-identical",
        before.0.n_edges(),
        before.1.snapshots.len()
    ))
}

fn c8_metrics() -> Check {
    let mut tables = 0;
    for tp in 0..=6u64 {
        for fp in 0..=6u64 {
            for fn_ in 0..=6u64 {
                let c = Confusion { tp, fp, fn_, tn: 3 };
                let (p, r, f) = prf1(&c);
                let op = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let or = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                let of = if op + or == 0.0 { 0.0 } else { 2.0 * op * or / (op + or) };
                ensure(
                    (p - op).abs() < 1e-12 && (r - or).abs() < 1e-12 && (f - of).abs() < 1e-12,
                    || format!("table {c:?}: ({p},{r},{f}) vs ({op},{or},{of})"),
                )?;
                tables += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let len = rng.random_range(2..60);
        let coarse = rng.random_bool(0.5);
        let probs: Vec<f64> = (0..len)
            .map(|_| {
                let p: f64 = rng.random_range(0.0..1.0);
                if coarse {
                    (p * 10.0).round() / 10.0
                } else {
                    p
                }
            })
            .collect();
        let labels: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
        let valid: Vec<bool> = (0..len).map(|_| rng.random_bool(0.9)).collect();
        let pos = labels.iter().zip(&valid).filter(|(l, v)| **l && **v).count();
        if pos == 0 {
            continue;
        }
        let mut thresholds: Vec<f64> = probs.iter().zip(&valid).filter(|(_, v)| **v).map(|(p, _)| *p).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut pts = Vec::new();
        for &th in &thresholds {
            let (mut tp, mut fp) = (0usize, 0usize);
            for k in 0..len {
                if valid[k] && probs[k] >= th {
                    if labels[k] {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            pts.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
        }
        let mut auc = 0.0;
        let mut prev = (0.0, pts[0].1);
        for &(r, p) in &pts {
            auc += (r - prev.0) * (p + prev.1) / 2.0;
            prev = (r, p);
        }
        let got = pr_curve(&probs, &labels, &valid).map_err(|e| e.to_string())?.auc;
        worst = worst.max((got - auc).abs());
        done += 1;
    }
    ensure(worst < 1e-12, || format!("PR-AUC max |delta| {worst:.3e}"))?;
    Ok(format!("{tables} confusion tables, 100 score vectors, PR-AUC max |delta| {worst:.1e}"))
}

fn e2e_config(strategy: GraphStrategy) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.strategy = strategy;
    cfg.model.d_model = 32;
    cfg.neg_keep = 0.3;
    cfg.max_epochs = 30;
    cfg.patience = 5;
    cfg.seeds = (0..5).collect();
    cfg
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        (s[k / 2 - 1] + s[k / 2]) / 2.0
    }
}

fn c9_end_to_end() -> Check {
    let t0 = Instant::now();
    let m = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let mut medians = Vec::new();
    for strategy in [GraphStrategy::Static, GraphStrategy::Identity] {
        let cfg = e2e_config(strategy);
        let prep = Prepared::new(&m.panel, &cfg).map_err(|e| e.to_string())?;
        let rep = run_protocol(&prep, &cfg);
        ensure(rep.failed.is_empty(), || format!("{strategy}: failed seeds {:?}", rep.failed))?;
        let f1 = rep.metric("f1").ok_or("no f1")?.values.clone();
        medians.push((strategy, median(&f1), f1));
    }
    let secs = t0.elapsed().as_secs_f64();
    let (g1, id) = (medians[0].1, medians[1].1);
    let summary = format!(
        "median test F1 G1-num_trades {g1:.3} {:?}, identity {id:.3} {:?}, {:.0}s on {} threads",
        medians[0].2.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        medians[1].2.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        secs,
        rayon::current_num_threads()
    );
    ensure(g1 >= 0.60 && g1 >= id && secs < 900.0, || summary.clone())?;
    Ok(summary)
}

fn metric_csvs(rep: &ProtocolReport) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    rep.write_aggregate_csv(&mut out).map_err(|e| e.to_string())?;
    for run in &rep.runs {
        let (probs, labels) = run.test.valid_pairs();
        let valid = vec![true; probs.len()];
        pr_curve(&probs, &labels, &valid)
            .map_err(|e| e.to_string())?
            .write_csv(&mut out, 0.0)
            .map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn c10_determinism() -> Check {
    let m = generate(&SynthConfig { n_tokens: 8, n_hours: 900, n_pumps: 14, seed: 10, ..SynthConfig::default() })
        .map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for strategy in [GraphStrategy::Dynamic, GraphStrategy::Adaptive] {
        let mut cfg = TrainConfig::default();
        cfg.model.strategy = strategy;
        cfg.model.d_model = 8;
        cfg.model.d_embed = 4;
        cfg.max_epochs = 3;
        cfg.seeds = vec![0, 1, 2];
        let run = || -> Result<Vec<u8>, String> {
            let prep = Prepared::new(&m.panel, &cfg).map_err(|e| e.to_string())?;
            metric_csvs(&run_protocol(&prep, &cfg))
        };
        let a = run()?;
        let b = run()?;
        ensure(a == b, || format!("{strategy}: metric CSVs differ between reruns"))?;
        sizes.push(format!("{strategy} {} bytes", a.len()));
    }
    Ok(format!("reruns bit-identical ({})", sizes.join(", ")))
}

fn c11_parameters() -> Check {
    let g1 = StGnn::new(ModelConfig::default(), 84).map_err(|e| e.to_string())?.parameter_count();
    let g2 = StGnn::new(ModelConfig { strategy: GraphStrategy::Dynamic, ..ModelConfig::default() }, 84)
        .map_err(|e| e.to_string())?
        .parameter_count();
    let g3 = StGnn::new(ModelConfig { strategy: GraphStrategy::Adaptive, ..ModelConfig::default() }, 84)
        .map_err(|e| e.to_string())?
        .parameter_count();
    let dev = (g1 as f64 - 135_000.0).abs() / 135_000.0;
    ensure(g1 == g2 && dev <= 0.15 && g3 > g1, || format!("G1 {g1}, G2 {g2}, G3 {g3}"))?;
    Ok(format!("G1 {g1}, G2 {g2} ({:.1}% from 135k), G3 {g3}", dev * 100.0))
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let skip_e2e = std::env::var_os("PUMPWATCH_SKIP_E2E").is_some();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check>)> = vec![
        (2, "correlation oracle", Box::new(c2_correlation)),
        (3, "quantile threshold and G1 edge bound", Box::new(c3_quantile)),
        (4, "G2 timeline", Box::new(c4_dynamic)),
        (5, "G3 adaptive graph", Box::new(c5_adaptive)),
        (6, "gradient check", Box::new(c6_gradcheck)),
        (7, "split and leakage", Box::new(c7_protocol)),
        (8, "metrics", Box::new(c8_metrics)),
        (9, "synthetic end-to-end", Box::new(c9_end_to_end)),
        (10, "determinism", Box::new(c10_determinism)),
        (11, "parameter accounting", Box::new(c11_parameters)),
    ];
    println!("criterion 1 [N/A] full-scale reproduction out of scope; covered by criteria 2-11");
    let mut failed = 0;
    for (id, name, check) in criteria {
        if id == 9 && skip_e2e {
            println!("criterion {id} [SKIP] {name}: PUMPWATCH_SKIP_E2E set");
            continue;
        }
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(&check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("criterion {id} [PASS] {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id} [FAIL] {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
