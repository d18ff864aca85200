use std::fs;
use std::net::{Ipv4Addr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use blocksonar::analytics::{Summary, FIGURE_FILES, SUMMARY_JSON};
use blocksonar::chainview::ChainView;
use blocksonar::classify::{BlockClass, Classification, Label, TxClass};
use blocksonar::cli::{manifest_path, RunManifest, RunStatus};
use blocksonar::eventlog::EventLog;
use blocksonar::sim::audit::Audit;
use blocksonar::sim::loopback::LoopbackNetwork;
use blocksonar::sim::{LatencyModel, SimConfig, TopologyKind};
use blocksonar::wire::{InvVector, Magic};
use blocksonar::Hash32;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_blocksonar");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/headline").join(name)
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn manifest(out: &Path, sub: &str) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(manifest_path(out, sub)).unwrap()).unwrap()
}

fn small_sim(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        peers: 20,
        topology: TopologyKind::RandomRegular { degree: 4 },
        max_blocks: Some(15),
        tx_rate_per_s: 20.0,
        fork_probability: 0.15,
        invalid_block_probability: 0.1,
        invalid_tx_fraction: 0.03,
        ..SimConfig::default()
    }
}

fn simulate(dir: &Path, cfg: &SimConfig) {
    let path = dir.join("sim.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();
    ok(dir, &["simulate", "--config", path.to_str().unwrap()]);
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic_and_outputs_load() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    simulate(a.path(), &small_sim(7));
    simulate(b.path(), &small_sim(7));
    for f in ["ledger.jsonl", "events.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    ChainView::load(a.path().join("ledger.jsonl")).unwrap();
    EventLog::open(a.path().join("events.csv")).unwrap();
    Audit::load(a.path()).unwrap();
    let m = manifest(a.path(), "simulate");
    assert_eq!(m.status, RunStatus::Ok);
    assert_eq!(m.rng_seed, Some(7));
    for f in &m.outputs {
        assert!(a.path().join(f).exists(), "{f:?}");
    }
}

#[test]
fn default_simulate_config_works() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["simulate", "--seed", "3"]);
    let chain = ChainView::load(d.path().join("ledger.jsonl")).unwrap();
    assert!(chain.tip_height() > Some(0));
}

#[test]
fn malformed_simulate_config_exits_nonzero() {
    let d = TempDir::new().unwrap();
    let path = d.path().join("bad.toml");
    fs::write(&path, "peers = \"many\"\n").unwrap();
    let o = run(d.path(), &["simulate", "--config", s(&path)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
    assert!(!manifest_path(d.path(), "simulate").exists());
}

#[test]
fn classify_counts_match_simulator_ground_truth() {
    let d = TempDir::new().unwrap();
    simulate(d.path(), &small_sim(11));
    let out = d.path().join("c");
    let stdout = ok(&out, &["classify", "--log", s(&d.path().join("events.csv")), "--ledger", s(&d.path().join("ledger.jsonl"))]);
    let labels = Classification::read_csv(out.join("classification.csv")).unwrap();
    let audit = Audit::load(d.path()).unwrap();
    let log = EventLog::open(d.path().join("events.csv")).unwrap();
    let observed = |h: &Hash32| log.first_seen_ms(h).is_some();
    let count = |l: Label| labels.with_label(l).count();
    let truth_ib = audit.blocks.iter().filter(|b| !b.valid && observed(&b.hash)).count();
    let truth_fb = audit.blocks.iter().filter(|b| b.valid && !b.main_chain && observed(&b.hash)).count();
    let truth_main = audit.blocks.iter().filter(|b| b.main_chain && observed(&b.hash)).count();
    assert_eq!(count(Label::Block(BlockClass::Ib)), truth_ib);
    assert_eq!(count(Label::Block(BlockClass::Fb)), truth_fb);
    assert_eq!(
        count(Label::Block(BlockClass::Mdlb)) + count(Label::Block(BlockClass::Eb)),
        truth_main
    );
    assert!(truth_fb + truth_ib > 0, "scenario should inject forks and invalid blocks");
    assert_eq!(count(Label::Tx(TxClass::It)) as u64, audit.stats.invalid_txs);
    let valid_txs = count(Label::Tx(TxClass::Bt)) + count(Label::Tx(TxClass::Et)) + count(Label::Tx(TxClass::Unconfirmed));
    assert_eq!(valid_txs as u64, audit.stats.generated_txs);
    assert!(stdout.contains("MDLB"));

    // Same inputs, same bytes.
    let again = d.path().join("c2");
    ok(&again, &["classify", "--log", s(&d.path().join("events.csv")), "--ledger", s(&d.path().join("ledger.jsonl"))]);
    assert_eq!(
        fs::read(out.join("classification.csv")).unwrap(),
        fs::read(again.join("classification.csv")).unwrap()
    );
}

#[test]
fn classify_empty_log() {
    let d = TempDir::new().unwrap();
    let log = d.path().join("empty.csv");
    fs::write(&log, "").unwrap();
    let stdout = ok(d.path(), &["classify", "--log", s(&log), "--ledger", s(&fixture("ledger.jsonl"))]);
    let labels = Classification::read_csv(d.path().join("classification.csv")).unwrap();
    assert!(labels.rows.is_empty());
    assert!(stdout.contains("total\t0"));
}

#[test]
fn classify_window_outside_log_span() {
    let d = TempDir::new().unwrap();
    let stdout = ok(
        d.path(),
        &[
            "classify",
            "--log",
            s(&fixture("events.csv")),
            "--ledger",
            s(&fixture("ledger.jsonl")),
            "--window-start-ms",
            "1000",
            "--window-end-ms",
            "2000",
        ],
    );
    assert!(stdout.contains("does not overlap"));
    let labels = Classification::read_csv(d.path().join("classification.csv")).unwrap();
    for row in labels.rows.values() {
        if row.kind == blocksonar::ObjectKind::Block {
            assert!(
                matches!(row.class, Label::Block(BlockClass::Eb | BlockClass::Fb | BlockClass::Ib)),
                "{:?}",
                row.class
            );
        }
    }
    assert_eq!(labels.with_label(Label::Block(BlockClass::Mdlb)).count(), 0);
}

fn analyze_fixture(out: &Path) {
    ok(out, &["analyze", "--log", s(&fixture("events.csv")), "--ledger", s(&fixture("ledger.jsonl"))]);
}

fn summary(dir: &Path) -> Summary {
    serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_JSON)).unwrap()).unwrap()
}

#[test]
fn analyze_fixture_reports_headline_fractions() {
    let d = TempDir::new().unwrap();
    analyze_fixture(d.path());
    let s = summary(d.path());
    let m = s.inclusion_analysis_set.expect("marks");
    assert!((m.not_included_at_1h - 0.43).abs() < 1e-9);
    assert!((m.not_included_at_30d - 0.20).abs() < 1e-9);
    assert!((m.value_included_at_3h - 0.93).abs() < 1e-9);
    assert!((m.value_included_at_30d - 0.999).abs() < 1e-9);
    for f in FIGURE_FILES {
        assert!(d.path().join(f).exists(), "{f}");
    }
    assert!(!s.reference.testable);
    let m = manifest(d.path(), "analyze");
    assert_eq!(m.inputs.len(), 2);
}

#[test]
fn analyze_with_nothing_included_still_succeeds() {
    let d = TempDir::new().unwrap();
    let labels = {
        ok(d.path(), &["classify", "--log", s(&fixture("events.csv")), "--ledger", s(&fixture("ledger.jsonl"))]);
        Classification::read_csv(d.path().join("classification.csv")).unwrap()
    };
    let keep: std::collections::HashSet<Hash32> = labels
        .rows
        .values()
        .filter(|r| r.kind == blocksonar::ObjectKind::Block || r.class == Label::Tx(TxClass::Unconfirmed))
        .map(|r| r.hash)
        .collect();
    let log = EventLog::open(fixture("events.csv")).unwrap();
    let filtered = EventLog::from_events(log.events().iter().filter(|e| keep.contains(&e.hash)).cloned().collect());
    let path = d.path().join("unconfirmed.csv");
    filtered.save(&path).unwrap();
    let out = d.path().join("a");
    ok(&out, &["analyze", "--log", s(&path), "--ledger", s(&fixture("ledger.jsonl"))]);
    let sm = summary(&out);
    assert_eq!(sm.included, 0);
    assert!(sm.censored > 0);
    let missing: Vec<&str> = sm.missing_figures.iter().map(|m| m.file.as_str()).collect();
    assert!(missing.contains(&"delay_hist_seconds.csv"), "{missing:?}");
    assert!(!out.join("delay_hist_seconds.csv").exists());
}

#[test]
fn include_all_sim_reaches_full_inclusion() {
    let d = TempDir::new().unwrap();
    let mut cfg = small_sim(5);
    cfg.fork_probability = 0.0;
    cfg.invalid_block_probability = 0.0;
    cfg.invalid_tx_fraction = 0.0;
    cfg.latency = LatencyModel::Constant { ms: 40.0 };
    simulate(d.path(), &cfg);
    let out = d.path().join("a");
    ok(&out, &["analyze", "--log", s(&d.path().join("events.csv")), "--ledger", s(&d.path().join("ledger.jsonl"))]);
    let sm = summary(&out);
    assert_eq!(sm.censored, 0);
    assert!(sm.included > 0);
    let last = fs::read_to_string(out.join("cumulative_count.csv")).unwrap();
    let frac: f64 = last.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(frac, 1.0);
    // Longest delay: one block interval plus the time for a transaction to
    // reach the miner and the block to come back.
    let max_interval = sm.block_intervals.unwrap().listening.max_s;
    let diameter = 20.0 * 0.04;
    let bound = max_interval + 2.0 * diameter;
    let grid_1: Vec<f64> = last
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut it = l.split(',');
            let t: f64 = it.next()?.parse().ok()?;
            let f: f64 = it.next()?.parse().ok()?;
            (f == 1.0).then_some(t)
        })
        .collect();
    assert!(grid_1[0] <= bound * 1.2, "full at {} > {bound}", grid_1[0]);
}

#[test]
fn report_is_deterministic_and_complete() {
    let d = TempDir::new().unwrap();
    analyze_fixture(d.path());
    let (r1, r2) = (d.path().join("r1"), d.path().join("r2"));
    ok(&r1, &["report", "--analysis", s(d.path())]);
    ok(&r2, &["report", "--analysis", s(d.path())]);
    let text = fs::read_to_string(r1.join("report.txt")).unwrap();
    assert_eq!(text.as_bytes(), fs::read(r2.join("report.txt")).unwrap());
    for needle in ["delta", "43.0 %", "20.0 %", "93.0 %", "99.9 %", "Medium Time", "Percentile 50%"] {
        assert!(text.contains(needle), "{needle}");
    }
    for f in FIGURE_FILES {
        let stem = f.trim_end_matches(".csv");
        for ext in ["dat", "gp"] {
            let p = r1.join("plots").join(format!("{stem}.{ext}"));
            assert_eq!(fs::read(&p).unwrap(), fs::read(r2.join("plots").join(format!("{stem}.{ext}"))).unwrap());
        }
    }
}

#[test]
fn report_names_the_missing_input() {
    let d = TempDir::new().unwrap();
    analyze_fixture(d.path());
    fs::remove_file(d.path().join("fee_vs_delay.csv")).unwrap();
    let o = run(&d.path().join("r"), &["report", "--analysis", s(d.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("fee_vs_delay.csv"));
    assert!(!manifest_path(&d.path().join("r"), "report").exists());
}

fn monitor_config(dir: &Path, seeds: &[String], extra: &str) -> PathBuf {
    let path = dir.join("monitor.toml");
    let seeds: Vec<String> = seeds.iter().map(|s| format!("\"{s}\"")).collect();
    fs::write(
        &path,
        format!("seeds = [{}]\nnetwork = \"simnet\"\nhandshake_timeout_ms = 1000\nflush_interval_ms = 50\n{extra}", seeds.join(", ")),
    )
    .unwrap();
    path
}

#[test]
fn monitor_with_unreachable_seeds_fails() {
    let d = TempDir::new().unwrap();
    let dead = {
        let l = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).unwrap();
        l.local_addr().unwrap().to_string()
    };
    let cfg = monitor_config(d.path(), &[dead], "duration_ms = 20000\n");
    let t = Instant::now();
    let o = run(d.path(), &["monitor", "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no reachable seed"));
    assert!(t.elapsed() < Duration::from_secs(15));
    assert!(!manifest_path(d.path(), "monitor").exists());
}

#[test]
fn monitor_without_seeds_fails() {
    let d = TempDir::new().unwrap();
    let cfg = monitor_config(d.path(), &[], "");
    let o = run(d.path(), &["monitor", "--config", s(&cfg)]);
    assert!(!o.status.success());
}

#[test]
fn monitor_runs_for_its_duration() {
    let d = TempDir::new().unwrap();
    let adj = vec![vec![1], vec![0]];
    let net = LoopbackNetwork::start(&adj, Magic::SIMNET).unwrap();
    let cfg = monitor_config(d.path(), &[net.addresses()[0].to_string()], "duration_ms = 1500\n");
    ok(d.path(), &["monitor", "--config", s(&cfg)]);
    assert_eq!(manifest(d.path(), "monitor").status, RunStatus::Ok);
    assert_eq!(net.handshakes(0) + net.handshakes(1), 2);
    net.shutdown();
}

#[test]
fn interrupted_monitor_closes_log_and_marks_manifest() {
    let d = TempDir::new().unwrap();
    let net = LoopbackNetwork::start(&[vec![1], vec![0]], Magic::SIMNET).unwrap();
    let cfg = monitor_config(d.path(), &[net.addresses()[0].to_string()], "");
    let mut child = Command::new(BIN)
        .arg("--out")
        .arg(d.path())
        .args(["monitor", "--config", s(&cfg)])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let t = Instant::now();
    while net.connected() < 2 {
        assert!(t.elapsed() < Duration::from_secs(20), "monitor never connected");
        thread::sleep(Duration::from_millis(20));
    }
    let hashes: Vec<Hash32> = (1..=5u8).map(|i| Hash32([i; 32])).collect();
    for h in &hashes {
        assert!(net.announce(0, vec![InvVector::tx(*h)]));
        assert!(net.announce(1, vec![InvVector::block(*h)]));
    }
    thread::sleep(Duration::from_millis(500));
    let st = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(st.success());
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
    let m = manifest(d.path(), "monitor");
    assert_eq!(m.status, RunStatus::Interrupted);
    let log = EventLog::open(d.path().join("events.csv")).unwrap();
    assert_eq!(log.len(), 10);
    let text = fs::read_to_string(d.path().join("events.csv")).unwrap();
    assert!(text.ends_with('\n'));
    net.shutdown();
}
