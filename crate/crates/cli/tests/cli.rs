use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pumpwatch_core::graphcraft::{build_dynamic_timeline, build_static_graph, CorrelationGraphConfig, SignalKind};
use pumpwatch_core::panel::{chronological_split, read_panel_csv};

fn pumpwatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pumpwatch"))
        .args(args)
        .env_remove("PUMPWATCH_SEED")
        .output()
        .expect("spawn pumpwatch")
}

fn ok(args: &[&str]) -> Output {
    let out = pumpwatch(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SYNTH: &str = "n_tokens=6\nn_hours=700\nn_pumps=12\nn_clusters=2\nn_shocks=6\n";
const SMALL_TRAIN: &str = "D=8\nH=2\nd_embed=4\nmax_epochs=2\nseeds=0,1\n";

fn small_market(dir: &Path) -> String {
    let cfg = dir.join("small.synth");
    fs::write(&cfg, SMALL_SYNTH).unwrap();
    let out = dir.join("market");
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    out.join("panel.csv").to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = pumpwatch(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let o = pumpwatch(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let o = pumpwatch(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("synth"));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = pumpwatch(&["synth", "--out", dir.path().to_str().unwrap(), "--set", "n_tokenz=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_tokens"), "{}", stderr(&o));
    let o = pumpwatch(&["train", "--panel", "x.csv", "--out", "y", "--set", "dropuot=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("dropout") && e.contains("neg_keep"), "{e}");
}

#[test]
fn missing_input_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pumpwatch(&[
        "graph",
        "--panel",
        dir.path().join("absent.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_klines_are_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("klines");
    fs::create_dir(&k).unwrap();
    fs::write(k.join("AAA.csv"), "1609459200000,1.0,1.2\n").unwrap();
    let sched = dir.path().join("pumps.csv");
    fs::write(&sched, "symbol,timestamp_utc\n").unwrap();
    let o = pumpwatch(&[
        "ingest",
        "--klines",
        k.to_str().unwrap(),
        "--schedule",
        sched.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 1"), "{}", stderr(&o));
}

#[test]
fn ingest_builds_labeled_panel() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("klines");
    fs::create_dir(&k).unwrap();
    let row = |h: i64, trades: u32| {
        format!(
            "{},1.0,1.2,0.9,1.1,500,{},550,{trades},300,330,0",
            1_609_459_200_000i64 + h * 3_600_000,
            1_609_459_200_000i64 + (h + 1) * 3_600_000 - 1
        )
    };
    let a: Vec<String> = (0..6).map(|h| row(h, 50)).collect();
    let b: Vec<String> = (2..8).map(|h| row(h, 60)).collect();
    fs::write(k.join("AAA.csv"), a.join("\n")).unwrap();
    fs::write(k.join("BBB.csv"), b.join("\n")).unwrap();
    let sched = dir.path().join("pumps.csv");
    fs::write(&sched, "symbol,timestamp_utc\nAAA,2021-01-01T02:40:00Z\n").unwrap();
    let out = dir.path().join("panel");
    ok(&[
        "ingest",
        "--klines",
        k.to_str().unwrap(),
        "--schedule",
        sched.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let panel = read_panel_csv(fs::File::open(out.join("panel.csv")).unwrap()).unwrap();
    assert_eq!(panel.n_hours(), 8);
    assert_eq!(panel.tokens(), ["AAA", "BBB"]);
    assert!(panel.label(0, 3));
    assert_eq!(panel.n_positives(), 1);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("AAA.csv") && manifest.contains("config_sha256"));
}

#[test]
fn graph_export_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let panel_path = small_market(dir.path());
    let g1 = dir.path().join("g1");
    ok(&[
        "graph",
        "--panel",
        &panel_path,
        "--out",
        g1.to_str().unwrap(),
        "--strategy",
        "G1",
        "--signal",
        "num_trades",
        "--rho",
        "0.90",
    ]);
    let panel = read_panel_csv(fs::File::open(&panel_path).unwrap()).unwrap();
    let split = chronological_split(panel.n_hours(), (0.6, 0.2, 0.2), 5).unwrap();
    let cfg = CorrelationGraphConfig { signal: SignalKind::NumTrades, rho: 0.9, tau_min: 0.15 };
    let mut want = Vec::new();
    build_static_graph(&panel, split.train.clone(), &cfg).unwrap().write_csv(&mut want).unwrap();
    assert_eq!(fs::read(g1.join("edges.csv")).unwrap(), want);

    let g2 = dir.path().join("g2");
    ok(&["graph", "--panel", &panel_path, "--out", g2.to_str().unwrap(), "--strategy", "G2", "--set", "lookback=24"]);
    let mut want = Vec::new();
    build_dynamic_timeline(&panel, split.train, &panel.event_hours(), 24, &cfg)
        .unwrap()
        .write_csv(&panel, &mut want)
        .unwrap();
    assert_eq!(fs::read(g2.join("timeline.csv")).unwrap(), want);

    let o = pumpwatch(&["graph", "--panel", &panel_path, "--out", g2.to_str().unwrap(), "--strategy", "G3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let panel_path = small_market(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("strategy=G3\n{SMALL_TRAIN}")).unwrap();
    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    for run in [&run_a, &run_b] {
        ok(&[
            "--threads",
            "2",
            "train",
            "--panel",
            &panel_path,
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "neg_keep=0.5",
            "--out",
            run.to_str().unwrap(),
        ]);
    }
    for f in ["seed_0/checkpoint.bin", "seed_1/history.csv", "seed_0/model.cfg", "manifest.json"] {
        assert!(run_a.join(f).exists(), "{f} missing");
    }
    let resolved = fs::read_to_string(run_a.join("run.cfg")).unwrap();
    assert!(resolved.contains("strategy=G3") && resolved.contains("neg_keep=0.5"));
    let agg = fs::read(run_a.join("aggregate.csv")).unwrap();
    assert_eq!(agg, fs::read(run_b.join("aggregate.csv")).unwrap());
    assert_eq!(
        fs::read(run_a.join("seed_1/checkpoint.bin")).unwrap(),
        fs::read(run_b.join("seed_1/checkpoint.bin")).unwrap()
    );

    ok(&["eval", "--panel", &panel_path, "--run", run_a.to_str().unwrap()]);
    assert_eq!(fs::read(run_a.join("eval/metrics.csv")).unwrap(), agg);
    let curve = fs::read_to_string(run_a.join("eval/pr_curve_seed_0.csv")).unwrap();
    assert!(curve.starts_with("threshold,recall,precision"));

    let g3 = dir.path().join("g3");
    ok(&[
        "graph",
        "--panel",
        &panel_path,
        "--out",
        g3.to_str().unwrap(),
        "--strategy",
        "G3",
        "--run",
        run_a.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    let dense = fs::read_to_string(g3.join("dense.csv")).unwrap();
    for line in dense.lines() {
        let s: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    let rep = dir.path().join("report");
    ok(&[
        "report",
        "--panel",
        &panel_path,
        "--run",
        run_a.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(fs::read_to_string(rep.join("pr_chart.svg")).unwrap().contains("<svg"));
    assert!(fs::read_to_string(rep.join("report.csv")).unwrap().contains("run_a,G3,f1,"));
}

#[test]
fn seed_env_sets_synth_default_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed_flag: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_pumpwatch"));
        c.args(["synth", "--set", "n_tokens=4", "--set", "n_hours=200", "--set", "n_pumps=2", "--set", "n_clusters=2"])
            .arg("--out")
            .arg(dir.path().join(out))
            .env("PUMPWATCH_SEED", "5");
        if let Some(s) = seed_flag {
            c.args(["--seed", s]);
        }
        assert!(c.output().unwrap().status.success());
        fs::read_to_string(dir.path().join(out).join("synth.cfg")).unwrap()
    };
    assert!(run(None, "a").contains("seed=5\n"));
    assert!(run(Some("9"), "b").contains("seed=9\n"));
}

#[test]
fn features_export_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let panel_path = small_market(dir.path());
    let out = dir.path().join("feat");
    ok(&["features", "--panel", &panel_path, "--out", out.to_str().unwrap(), "--standardize"]);
    let text = fs::read_to_string(out.join("features.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("symbol,timestamp_utc,") && header.ends_with(",flag,valid"));
    assert_eq!(text.lines().count(), 1 + 6 * 700);
}
