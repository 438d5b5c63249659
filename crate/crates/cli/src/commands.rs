use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Duration;
use pumpwatch_core::features::build_feature_matrix;
use pumpwatch_core::fetch::{fetch_klines, FetchOptions, UreqTransport};
use pumpwatch_core::graphcraft::{adaptive_adjacency_values, build_dynamic_timeline, build_static_graph};
use pumpwatch_core::metrics::{per_token_report, pr_chart_svg, pr_curve, write_token_report};
use pumpwatch_core::numcore::checkpoint;
use pumpwatch_core::panel::{
    assemble_panel, chronological_split, parse_kline_rows, read_panel_csv, read_pump_schedule, write_panel_csv,
    write_pump_schedule,
};
use pumpwatch_core::stgnn::{classify, parse_kv, ModelError};
use pumpwatch_core::synthmarket::{generate, write_ground_truth, SynthError};
use pumpwatch_core::trainer::{
    evaluate_test, run_protocol, write_history_csv, FitResult, Prepared, SeedRun, TrainError,
};
use pumpwatch_core::{Adjacency, GraphStrategy, Panel, ParamStore, ProtocolReport, StGnn, SynthConfig, TrainConfig};

use crate::manifest::Manifest;
use crate::{CliError, Command, ConfigArgs};

const SEED_ENV: &str = "PUMPWATCH_SEED";

fn data<E: std::fmt::Display>(ctx: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{ctx}: {e}"))
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Usage(m),
        TrainError::Model(ModelError::Config(m)) => CliError::Usage(m),
        e => CliError::Data(e.to_string()),
    }
}

fn synth_err(e: SynthError) -> CliError {
    match e {
        SynthError::Config(m) => CliError::Usage(m),
        e => CliError::Data(e.to_string()),
    }
}

fn read_text(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(data(p.display()))
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(data(p.display()))
}

fn create(p: &Path) -> Result<fs::File, CliError> {
    fs::File::create(p).map_err(data(p.display()))
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("{SEED_ENV}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// File entries followed by `--set` entries, in application order.
fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    if let Some(p) = &args.config {
        let kv = parse_kv(&read_text(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        out.extend(kv);
    }
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Default, then `PUMPWATCH_SEED` (shifts the seed list), then file, then flags.
fn train_config(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(s) = env_seed()? {
        cfg.seeds = (s..s + cfg.seeds.len() as u64).collect();
    }
    for (k, v) in overrides(args)? {
        cfg.set(&k, &v).map_err(train_err)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(train_err)?;
        }
    }
    cfg.validate().map_err(train_err)?;
    Ok(cfg)
}

fn load_panel(p: &Path) -> Result<Panel, CliError> {
    read_panel_csv(fs::File::open(p).map_err(data(p.display()))?).map_err(data(p.display()))
}

pub fn dispatch(cmd: Command, argv: &[String]) -> Result<(), CliError> {
    match cmd {
        Command::Fetch { schedule, out, symbols, endpoint, margin_days } => {
            fetch(&schedule, &out, &symbols, &endpoint, margin_days, argv)
        }
        Command::Ingest { klines, schedule, out } => ingest(&klines, &schedule, &out, argv),
        Command::Features { panel, out, standardize, cfg } => features(&panel, &out, standardize, &cfg, argv),
        Command::Graph { panel, out, strategy, signal, rho, tau_min, lookback, run, seed, cfg } => {
            let flags = [
                ("strategy", strategy),
                ("signal", signal),
                ("rho", rho.map(|v| v.to_string())),
                ("tau_min", tau_min.map(|v| v.to_string())),
                ("lookback", lookback.map(|v| v.to_string())),
            ];
            let cfg = train_config(&cfg, &flags)?;
            graph(&panel, &out, &cfg, run.as_deref(), seed, argv)
        }
        Command::Train { panel, out, cfg } => train(&panel, &out, &train_config(&cfg, &[])?, argv),
        Command::Eval { panel, run, out, min_events } => {
            let out = out.unwrap_or_else(|| run.join("eval"));
            eval(&panel, &run, &out, min_events, argv)
        }
        Command::Synth { out, seed, cfg } => synth(&out, seed, &cfg, argv),
        Command::Report { panel, runs, out, min_recall } => report(&panel, &runs, &out, min_recall, argv),
    }
}

fn fetch(
    schedule: &Path,
    out: &Path,
    extra: &[String],
    endpoint: &str,
    margin_days: i64,
    argv: &[String],
) -> Result<(), CliError> {
    if margin_days < 0 {
        return Err(CliError::Usage("--margin-days must be >= 0".into()));
    }
    let events = read_pump_schedule(fs::File::open(schedule).map_err(data(schedule.display()))?)
        .map_err(data(schedule.display()))?;
    let mut spans: BTreeMap<String, (chrono::DateTime<chrono::Utc>, chrono::DateTime<chrono::Utc>)> = BTreeMap::new();
    for ev in &events {
        let e = spans.entry(ev.symbol.clone()).or_insert((ev.snapped_time, ev.snapped_time));
        e.0 = e.0.min(ev.snapped_time);
        e.1 = e.1.max(ev.snapped_time);
    }
    let full = match (spans.values().map(|s| s.0).min(), spans.values().map(|s| s.1).max()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CliError::Data("pump schedule is empty".into())),
    };
    for s in extra {
        spans.entry(s.clone()).or_insert(full);
    }
    let dir = out.join("klines");
    create_dir(&dir)?;
    let transport = UreqTransport::default();
    let opts = FetchOptions::default();
    let margin = Duration::days(margin_days);
    let mut manifest = Manifest::new("fetch", argv).input(schedule);
    for (sym, (a, b)) in &spans {
        let rows = fetch_klines(&transport, endpoint, sym, *a - margin, *b + margin, &opts)
            .map_err(data(format!("fetch {sym}")))?;
        let rel = format!("klines/{sym}.csv");
        let mut text = rows.join("\n");
        text.push('\n');
        fs::write(out.join(&rel), text).map_err(data(&rel))?;
        manifest.output(rel);
        eprintln!("{sym}: {} rows", rows.len());
    }
    manifest.write(out)
}

fn ingest(klines: &Path, schedule: &Path, out: &Path, argv: &[String]) -> Result<(), CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(klines)
        .map_err(data(klines.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut series = Vec::new();
    for f in &files {
        let sym = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let text = read_text(f)?;
        let rows: Vec<&str> = text.lines().collect();
        series.push((sym, parse_kline_rows(&rows).map_err(data(f.display()))?));
    }
    let events = read_pump_schedule(fs::File::open(schedule).map_err(data(schedule.display()))?)
        .map_err(data(schedule.display()))?;
    let panel = assemble_panel(series, &events).map_err(data("assemble panel"))?;
    create_dir(out)?;
    write_panel_csv(&panel, create(&out.join("panel.csv"))?).map_err(data("panel.csv"))?;
    let mut m = Manifest::new("ingest", argv).input(klines).input(schedule);
    m.output("panel.csv");
    eprintln!(
        "{} tokens x {} hours, {} positives",
        panel.n_tokens(),
        panel.n_hours(),
        panel.n_positives()
    );
    m.write(out)
}

fn features(panel_path: &Path, out: &Path, standardize: bool, args: &ConfigArgs, argv: &[String]) -> Result<(), CliError> {
    let cfg = train_config(args, &[])?;
    let panel = load_panel(panel_path)?;
    let mut fp = build_feature_matrix(&panel);
    if standardize {
        let split = chronological_split(panel.n_hours(), cfg.fractions, cfg.embargo).map_err(data("split"))?;
        fp = pumpwatch_core::features::standardize(&fp, split.train).0;
    }
    create_dir(out)?;
    fp.write_csv(&panel, create(&out.join("features.csv"))?).map_err(data("features.csv"))?;
    let mut m = Manifest::new("features", argv).config(cfg.to_kv()).input(panel_path);
    m.output("features.csv");
    m.write(out)
}

/// Parameters of one trained seed, restored from its directory.
fn load_fit(run: &Path, seed: u64, n_tokens: usize) -> Result<(StGnn, FitResult), CliError> {
    let dir = run.join(format!("seed_{seed}"));
    let model_cfg = pumpwatch_core::ModelConfig::from_kv(&read_text(&dir.join("model.cfg"))?)
        .map_err(data(dir.join("model.cfg").display()))?;
    let model = StGnn::new(model_cfg, n_tokens).map_err(data("model"))?;
    let mut params: ParamStore = model.init_params(0).map_err(data("model"))?;
    checkpoint::load_into(&mut params, &dir.join("checkpoint.bin")).map_err(data(dir.display()))?;
    let fit_kv = parse_kv(&read_text(&dir.join("fit.kv"))?).map_err(CliError::Data)?;
    let get = |k: &str| -> Result<f64, CliError> {
        fit_kv
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{}: missing {k}", dir.join("fit.kv").display())))
    };
    let fit = FitResult {
        seed,
        gamma: get("gamma")?,
        best_epoch: get("best_epoch")? as usize,
        pos_weight: get("pos_weight")?,
        parameter_count: model.parameter_count(),
        history: Vec::new(),
        params,
    };
    Ok((model, fit))
}

fn graph(
    panel_path: &Path,
    out: &Path,
    cfg: &TrainConfig,
    run: Option<&Path>,
    seed: Option<u64>,
    argv: &[String],
) -> Result<(), CliError> {
    let panel = load_panel(panel_path)?;
    let split = chronological_split(panel.n_hours(), cfg.fractions, cfg.embargo).map_err(data("split"))?;
    create_dir(out)?;
    let mut m = Manifest::new("graph", argv).config(cfg.to_kv()).input(panel_path);
    let n = panel.n_tokens();
    let summary = match cfg.model.strategy {
        GraphStrategy::Static => {
            let g = build_static_graph(&panel, split.train.clone(), &cfg.graph_config()).map_err(data("graph"))?;
            g.write_csv(create(&out.join("edges.csv"))?).map_err(data("edges.csv"))?;
            m.output("edges.csv");
            format!("{} directed edges", g.n_edges())
        }
        GraphStrategy::Dynamic => {
            let tl = build_dynamic_timeline(
                &panel,
                split.train.clone(),
                &panel.event_hours(),
                cfg.lookback,
                &cfg.graph_config(),
            )
            .map_err(data("graph"))?;
            tl.write_csv(&panel, create(&out.join("timeline.csv"))?).map_err(data("timeline.csv"))?;
            m.output("timeline.csv");
            format!("{} snapshots", tl.snapshots.len())
        }
        GraphStrategy::Adaptive => {
            let run = run.ok_or_else(|| CliError::Usage("G3 export needs --run <trained run dir>".into()))?;
            let run_cfg = TrainConfig::from_kv(&read_text(&run.join("run.cfg"))?).map_err(train_err)?;
            let seed = seed.unwrap_or(run_cfg.seeds[0]);
            let (_, fit) = load_fit(run, seed, n)?;
            let e = |k: &str| fit.params.value(k).cloned().ok_or_else(|| CliError::Data(format!("checkpoint has no {k}")));
            let (dense, adj) = adaptive_adjacency_values(&e("E1")?, &e("E2")?, run_cfg.model.epsilon).map_err(data("graph"))?;
            adj.write_csv(create(&out.join("edges.csv"))?).map_err(data("edges.csv"))?;
            let mut dense_csv = String::new();
            for i in 0..n {
                let row: Vec<String> = (0..n).map(|j| dense.at2(i, j).to_string()).collect();
                dense_csv.push_str(&row.join(","));
                dense_csv.push('\n');
            }
            fs::write(out.join("dense.csv"), dense_csv).map_err(data("dense.csv"))?;
            m = m.input(&run.join(format!("seed_{seed}/checkpoint.bin")));
            m.output("edges.csv");
            m.output("dense.csv");
            format!("{} directed edges above epsilon", adj.n_edges())
        }
        GraphStrategy::Identity => {
            Adjacency::empty(n).write_csv(create(&out.join("edges.csv"))?).map_err(data("edges.csv"))?;
            m.output("edges.csv");
            "no edges".into()
        }
    };
    eprintln!("{}: {summary}", cfg.model.strategy);
    m.write(out)
}

fn train(panel_path: &Path, out: &Path, cfg: &TrainConfig, argv: &[String]) -> Result<(), CliError> {
    let panel = load_panel(panel_path)?;
    let prep = Prepared::new(&panel, cfg).map_err(train_err)?;
    let rep = run_protocol(&prep, cfg);
    for (seed, e) in &rep.failed {
        eprintln!("seed {seed} failed: {e}");
    }
    if rep.runs.is_empty() {
        return Err(CliError::Data("every seed failed".into()));
    }
    create_dir(out)?;
    let mut m = Manifest::new("train", argv).config(cfg.to_kv()).seeds(&cfg.seeds).input(panel_path);
    fs::write(out.join("run.cfg"), cfg.to_kv()).map_err(data("run.cfg"))?;
    m.output("run.cfg");
    for run in &rep.runs {
        let f = &run.fit;
        let rel = format!("seed_{}", f.seed);
        let dir = out.join(&rel);
        create_dir(&dir)?;
        checkpoint::save(&f.params, &dir.join("checkpoint.bin")).map_err(data(dir.display()))?;
        fs::write(dir.join("model.cfg"), cfg.model.to_kv()).map_err(data("model.cfg"))?;
        let fit_kv = format!(
            "seed={}\ngamma={}\nbest_epoch={}\npos_weight={}\nparameter_count={}\n",
            f.seed, f.gamma, f.best_epoch, f.pos_weight, f.parameter_count
        );
        fs::write(dir.join("fit.kv"), fit_kv).map_err(data("fit.kv"))?;
        write_history_csv(&f.history, create(&dir.join("history.csv"))?).map_err(train_err)?;
        for name in ["checkpoint.bin", "checkpoint.bin.moments", "model.cfg", "fit.kv", "history.csv"] {
            m.output(format!("{rel}/{name}"));
        }
    }
    rep.write_aggregate_csv(create(&out.join("aggregate.csv"))?).map_err(train_err)?;
    m.output("aggregate.csv");
    if let Some(f1) = rep.metric("f1") {
        eprintln!(
            "{} over {} seeds: test F1 {:.3} +- {:.3}, parameters {}",
            cfg.model.strategy,
            rep.runs.len(),
            f1.mean,
            f1.std,
            rep.runs[0].fit.parameter_count
        );
    }
    m.write(out)
}

/// Checkpointed seeds of a run re-scored on the test block.
fn rescore(panel: &Panel, run: &Path) -> Result<(TrainConfig, Prepared, ProtocolReport), CliError> {
    let cfg = TrainConfig::from_kv(&read_text(&run.join("run.cfg"))?).map_err(train_err)?;
    let prep = Prepared::new(panel, &cfg).map_err(train_err)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        if !run.join(format!("seed_{seed}")).is_dir() {
            log::warn!("seed {seed} has no checkpoint; skipped");
            continue;
        }
        let (_, fit) = load_fit(run, seed, panel.n_tokens())?;
        let (test, metrics) = evaluate_test(&prep, &cfg, &fit).map_err(train_err)?;
        runs.push(SeedRun { fit, test, metrics });
    }
    if runs.is_empty() {
        return Err(CliError::Data(format!("{}: no checkpoints", run.display())));
    }
    Ok((cfg, prep, ProtocolReport::from_runs(runs, Vec::new())))
}

fn eval(panel_path: &Path, run: &Path, out: &Path, min_events: u64, argv: &[String]) -> Result<(), CliError> {
    let panel = load_panel(panel_path)?;
    let (cfg, _, rep) = rescore(&panel, run)?;
    create_dir(out)?;
    let seeds: Vec<u64> = rep.runs.iter().map(|r| r.fit.seed).collect();
    let mut m = Manifest::new("eval", argv)
        .config(cfg.to_kv())
        .seeds(&seeds)
        .input(panel_path)
        .input(&run.join("run.cfg"));
    rep.write_aggregate_csv(create(&out.join("metrics.csv"))?).map_err(train_err)?;
    m.output("metrics.csv");
    for r in &rep.runs {
        let s = &r.test;
        m = m.input(&run.join(format!("seed_{}/checkpoint.bin", r.fit.seed)));
        let curve = pr_curve(&s.probs, &s.labels, &s.valid).map_err(data("pr curve"))?;
        let rel = format!("pr_curve_seed_{}.csv", r.fit.seed);
        curve.write_csv(create(&out.join(&rel))?, 0.0).map_err(data(&rel))?;
        m.output(rel);
        let preds = classify(&s.probs, r.fit.gamma);
        let tokens = per_token_report(&preds, &s.labels, &s.valid, &s.token_of(panel.n_tokens()), panel.tokens(), min_events);
        let rel = format!("tokens_seed_{}.csv", r.fit.seed);
        write_token_report(&tokens, create(&out.join(&rel))?).map_err(data(&rel))?;
        m.output(rel);
    }
    for a in &rep.aggregate {
        eprintln!("{:<10} {:.4} +- {:.4}", a.metric, a.mean, a.std);
    }
    m.write(out)
}

fn synth(out: &Path, seed: Option<u64>, args: &ConfigArgs, argv: &[String]) -> Result<(), CliError> {
    let mut cfg = SynthConfig::default();
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    for (k, v) in overrides(args)? {
        cfg.set(&k, &v).map_err(synth_err)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let market = generate(&cfg).map_err(synth_err)?;
    create_dir(out)?;
    let mut m = Manifest::new("synth", argv).config(cfg.to_kv()).seeds(&[cfg.seed]);
    if let Some(p) = &args.config {
        m = m.input(p);
    }
    fs::write(out.join("synth.cfg"), cfg.to_kv()).map_err(data("synth.cfg"))?;
    write_panel_csv(&market.panel, create(&out.join("panel.csv"))?).map_err(data("panel.csv"))?;
    write_pump_schedule(&market.events, create(&out.join("pumps.csv"))?).map_err(data("pumps.csv"))?;
    write_ground_truth(&market, create(&out.join("ground_truth.csv"))?).map_err(synth_err)?;
    for f in ["synth.cfg", "panel.csv", "pumps.csv", "ground_truth.csv"] {
        m.output(f);
    }
    eprintln!(
        "{} tokens x {} hours, {} pumps",
        market.panel.n_tokens(),
        market.panel.n_hours(),
        market.pumps.len()
    );
    m.write(out)
}

fn report(panel_path: &Path, runs: &[PathBuf], out: &Path, min_recall: f64, argv: &[String]) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&min_recall) {
        return Err(CliError::Usage("--min-recall must lie in [0, 1]".into()));
    }
    let panel = load_panel(panel_path)?;
    create_dir(out)?;
    let mut m = Manifest::new("report", argv).input(panel_path);
    let mut curves = Vec::new();
    let mut table = String::from("run,strategy,metric,mean,std\n");
    for run in runs {
        let (cfg, _, rep) = rescore(&panel, run)?;
        m = m.input(&run.join("run.cfg"));
        let name = run
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string();
        let (mut probs, mut labels) = (Vec::new(), Vec::new());
        for r in &rep.runs {
            let (p, l) = r.test.valid_pairs();
            probs.extend(p);
            labels.extend(l);
        }
        let valid = vec![true; probs.len()];
        let curve = pr_curve(&probs, &labels, &valid).map_err(data(format!("{name}: pr curve")))?;
        let rel = format!("pr_curve_{name}.csv");
        curve.write_csv(create(&out.join(&rel))?, min_recall).map_err(data(&rel))?;
        m.output(rel);
        for a in &rep.aggregate {
            table.push_str(&format!("{name},{},{},{},{}\n", cfg.model.strategy, a.metric, a.mean, a.std));
        }
        curves.push((format!("{name} ({})", cfg.model.strategy), curve.view_min_recall(min_recall)));
    }
    fs::write(out.join("report.csv"), table).map_err(data("report.csv"))?;
    fs::write(out.join("pr_chart.svg"), pr_chart_svg(&curves, min_recall)).map_err(data("pr_chart.svg"))?;
    m.output("report.csv");
    m.output("pr_chart.svg");
    m.write(out)
}
