//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    self, AnalyticsError, AnalyzeOptions, Analyzer, FitOptions, FitOutcome, FitWeighting,
    IntervalStats, Summary, FIGURE_FILES, SUMMARY_JSON,
};
use crate::chainview::{ChainError, ChainView};
use crate::classify::{ClassifyError, Classification, Classifier, ListeningWindow};
use crate::crawler::{self, now_ms, BackoffPolicy, CrawlerConfig, CrawlerError, PeerState};
use crate::eventlog::{self, EventLog, EventLogError, EventLogWriter};
use crate::sim::{self, SimConfig, SimError};
use crate::wire::Magic;

pub const CLASSIFICATION_FILE: &str = "classification.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("no reachable seed")]
    NoSeeds,
    #[error("missing input: {0}")]
    MissingInputs(String),
    #[error("invalid config {path}: {reason}")]
    ConfigInvalid { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Crawler(#[from] CrawlerError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    EventLog(#[from] EventLogError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "blocksonar", version, about = "Passive Bitcoin network observatory")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "BLOCKSONAR_OUT", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Listen to the network and record every inv announcement.
    Monitor(MonitorArgs),
    /// Run the gossip simulator.
    Simulate(SimulateArgs),
    /// Label every observed hash.
    Classify(ClassifyArgs),
    /// Compute every figure and summary statistic.
    Analyze(AnalyzeArgs),
    /// Render a plain-text report and gnuplot files from an analysis.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// TOML file with seeds and crawler settings.
    #[arg(long)]
    pub config: PathBuf,
    /// Stop after this many milliseconds (overrides the config).
    #[arg(long)]
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML simulator config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub ledger: PathBuf,
    /// Defaults to the span of the log.
    #[arg(long)]
    pub window_start_ms: Option<u64>,
    #[arg(long)]
    pub window_end_ms: Option<u64>,
    /// Blocks first seen after this are treated as not yet included.
    #[arg(long)]
    pub horizon_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Weighting {
    Counts,
    Uniform,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Output of `classify`; recomputed when omitted.
    #[arg(long)]
    pub classification: Option<PathBuf>,
    #[arg(long, default_value_t = 600.0)]
    pub bin_width_s: f64,
    #[arg(long, default_value_t = 1.0)]
    pub bin_width_blocks: f64,
    #[arg(long, value_enum, default_value_t = Weighting::Counts)]
    pub fit_weighting: Weighting,
    /// Start of the cumulative-curve time grid, seconds.
    #[arg(long, default_value_t = 1.0)]
    pub grid_start_s: f64,
    #[arg(long, default_value_t = 3_600_000)]
    pub rate_bucket_ms: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `analyze`; defaults to --out.
    #[arg(long)]
    pub analysis: Option<PathBuf>,
}

/// Provenance of one run, written last and atomically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub status: RunStatus,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    /// Relative to `out_dir`.
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub rng_seed: Option<u64>,
    pub started_ms: u64,
    pub ended_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Interrupted,
}

pub fn manifest_path(out: &Path, subcommand: &str) -> PathBuf {
    out.join(format!("{subcommand}.manifest.json"))
}

impl RunManifest {
    fn new(subcommand: &str, out_dir: &Path) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            status: RunStatus::Ok,
            config: None,
            inputs: Vec::new(),
            out_dir: out_dir.to_path_buf(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            rng_seed: None,
            started_ms: now_ms(),
            ended_ms: 0,
        }
    }

    fn add_outputs(&mut self, files: impl IntoIterator<Item = PathBuf>) {
        for f in files {
            let rel = f.strip_prefix(&self.out_dir).map(Path::to_path_buf).unwrap_or(f);
            if !self.outputs.contains(&rel) {
                self.outputs.push(rel);
            }
        }
    }

    /// Writes via a temporary file and rename. Refuses to list files that
    /// do not exist.
    fn commit(mut self) -> Result<PathBuf> {
        for f in &self.outputs {
            let p = self.out_dir.join(f);
            if !p.exists() {
                return Err(CliError::MissingInputs(p.display().to_string()));
            }
        }
        self.ended_ms = now_ms();
        let path = manifest_path(&self.out_dir, &self.subcommand);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self)? + "\n").map_err(io_at(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_at(&path))?;
        Ok(path)
    }
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out).map_err(io_at(&cli.out))?;
    match cli.command {
        Command::Monitor(args) => cmd_monitor(&args, &cli.out),
        Command::Simulate(args) => cmd_simulate(&args, &cli.out),
        Command::Classify(args) => cmd_classify(&args, &cli.out),
        Command::Analyze(args) => cmd_analyze(&args, &cli.out),
        Command::Report(args) => cmd_report(&args, &cli.out),
    }
}

/// `monitor` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// `host:port` strings, resolved at start.
    pub seeds: Vec<String>,
    pub duration_ms: Option<u64>,
    /// `mainnet`, `testnet3`, `regtest`, `simnet` or 8 hex digits.
    pub network: String,
    pub max_connections: usize,
    pub handshake_timeout_ms: u64,
    pub getaddr_interval_ms: u64,
    pub backoff: BackoffPolicy,
    pub listen_address: Option<SocketAddr>,
    pub user_agent: Option<String>,
    pub flush_interval_ms: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        let c = CrawlerConfig::default();
        MonitorConfig {
            seeds: Vec::new(),
            duration_ms: None,
            network: "mainnet".into(),
            max_connections: c.max_connections,
            handshake_timeout_ms: c.handshake_timeout_ms,
            getaddr_interval_ms: c.getaddr_interval_ms,
            backoff: c.backoff,
            listen_address: None,
            user_agent: None,
            flush_interval_ms: 1000,
        }
    }
}

impl MonitorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        toml::from_str(&text).map_err(|e| CliError::ConfigInvalid {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    fn crawler_config(&self, path: &Path) -> Result<CrawlerConfig> {
        let invalid = |reason: String| CliError::ConfigInvalid { path: path.to_path_buf(), reason };
        let magic = Magic::from_name(&self.network).ok_or_else(|| invalid(format!("unknown network {}", self.network)))?;
        let mut seeds = Vec::new();
        for s in &self.seeds {
            match s.to_socket_addrs() {
                Ok(addrs) => seeds.extend(addrs),
                Err(e) => log::warn!("cannot resolve seed {s}: {e}"),
            }
        }
        if seeds.is_empty() {
            return Err(CliError::NoSeeds);
        }
        let mut cfg = CrawlerConfig {
            seeds,
            max_connections: self.max_connections,
            handshake_timeout_ms: self.handshake_timeout_ms,
            backoff: self.backoff,
            getaddr_interval_ms: self.getaddr_interval_ms,
            listen_address: self.listen_address,
            magic,
            ..CrawlerConfig::default()
        };
        if let Some(ua) = &self.user_agent {
            cfg.user_agent = ua.clone();
        }
        Ok(cfg)
    }
}

fn cmd_monitor(args: &MonitorArgs, out: &Path) -> Result<PathBuf> {
    let mut manifest = RunManifest::new("monitor", out);
    manifest.config = Some(args.config.clone());
    let config = MonitorConfig::load(&args.config)?;
    let crawler_cfg = config.crawler_config(&args.config)?;
    let duration = args.duration_ms.or(config.duration_ms).map(Duration::from_millis);

    let interrupted = Arc::new(AtomicBool::new(false));
    {
        let flag = Arc::clone(&interrupted);
        if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    }

    let log_path = out.join(sim::LOG_FILE);
    let writer = EventLogWriter::create(&log_path)?;
    let (sink, writer_thread) = eventlog::spawn_writer(writer, Duration::from_millis(config.flush_interval_ms.max(1)));
    let seeds = crawler_cfg.seeds.clone();
    let probe_window = Duration::from_millis(crawler_cfg.handshake_timeout_ms) + Duration::from_secs(2);
    let handle = crawler::bootstrap(crawler_cfg, sink)?;

    let started = Instant::now();
    let mut reachable = false;
    loop {
        if interrupted.load(Ordering::SeqCst) || duration.is_some_and(|d| started.elapsed() >= d) {
            break;
        }
        if !reachable {
            let entries = handle.directory();
            if entries.iter().any(|e| e.state == PeerState::Established) {
                reachable = true;
            } else {
                let seeds_failed = seeds.iter().all(|s| {
                    entries.iter().any(|e| {
                        e.address.socket_addr() == Some(*s) && e.consecutive_failures > 0
                    })
                });
                if seeds_failed || started.elapsed() > probe_window {
                    handle.shutdown();
                    writer_thread.join().expect("writer thread")?;
                    return Err(CliError::NoSeeds);
                }
            }
        }
        thread::sleep(Duration::from_millis(20));
    }
    handle.shutdown();
    let written = writer_thread.join().expect("writer thread")?;
    log::info!("{written} events written to {}", log_path.display());
    if interrupted.load(Ordering::SeqCst) {
        manifest.status = RunStatus::Interrupted;
    }
    manifest.add_outputs([log_path]);
    manifest.commit()
}

fn cmd_simulate(args: &SimulateArgs, out: &Path) -> Result<PathBuf> {
    let mut manifest = RunManifest::new("simulate", out);
    manifest.config = args.config.clone();
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_at(path))?;
            SimConfig::from_toml_str(&text)?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    manifest.rng_seed = Some(config.seed);
    let output = sim::run(&config)?;
    let mut files = output.write(out)?;
    let effective = out.join("config.toml");
    fs::write(&effective, config.to_toml_string()).map_err(io_at(&effective))?;
    files.push(effective);
    let s = &output.audit.stats;
    println!(
        "generated {} txs ({} invalid), included {}, mempool {}, skipped {}; {} blocks, {} on main chain",
        s.generated_txs, s.invalid_txs, s.included, s.mempool, s.policy_skipped, s.valid_blocks + s.invalid_blocks, s.main_chain_blocks
    );
    manifest.add_outputs(files);
    manifest.commit()
}

struct Inputs {
    chain: ChainView,
    log: EventLog,
    window: ListeningWindow,
}

fn load_inputs(input: &InputArgs, manifest: &mut RunManifest) -> Result<Inputs> {
    manifest.inputs.extend([input.log.clone(), input.ledger.clone()]);
    let log = EventLog::open(&input.log).map_err(|e| match e {
        EventLogError::Io(source) => CliError::IoFailure { path: input.log.clone(), source },
        other => CliError::Parse { path: input.log.clone(), reason: other.to_string() },
    })?;
    let chain = ChainView::load(&input.ledger).map_err(|e| match e {
        ChainError::Io(source) => CliError::IoFailure { path: input.ledger.clone(), source },
        other => CliError::Parse { path: input.ledger.clone(), reason: other.to_string() },
    })?;
    let span = ListeningWindow::covering(&log);
    let start = input.window_start_ms.or(span.map(|w| w.start_ms)).unwrap_or(0);
    let end = input
        .window_end_ms
        .or(span.map(|w| w.end_ms))
        .unwrap_or(start + 1);
    let window = ListeningWindow::new(start, end)?;
    Ok(Inputs { chain, log, window })
}

fn cmd_classify(args: &ClassifyArgs, out: &Path) -> Result<PathBuf> {
    let mut manifest = RunManifest::new("classify", out);
    let inputs = load_inputs(&args.input, &mut manifest)?;
    let labels = Classifier::new(&inputs.chain, &inputs.log, inputs.window, args.input.horizon_ms).classify_all();
    let path = out.join(CLASSIFICATION_FILE);
    labels.write_csv(&path).map_err(|e| CliError::Parse { path: path.clone(), reason: e.to_string() })?;
    println!("window [{}, {}) ms", inputs.window.start_ms, inputs.window.end_ms);
    if let Some((lo, hi)) = inputs.log.span() {
        if hi < inputs.window.start_ms || lo >= inputs.window.end_ms {
            println!("note: window does not overlap the log span [{lo}, {hi}]");
        }
    }
    for (label, n) in labels.counts() {
        println!("{label}\t{n}");
    }
    println!("total\t{}", labels.rows.len());
    manifest.add_outputs([path]);
    manifest.commit()
}

fn cmd_analyze(args: &AnalyzeArgs, out: &Path) -> Result<PathBuf> {
    let mut manifest = RunManifest::new("analyze", out);
    let inputs = load_inputs(&args.input, &mut manifest)?;
    let labels = match &args.classification {
        Some(path) => {
            manifest.inputs.push(path.clone());
            Classification::read_csv(path).map_err(|e| CliError::Parse { path: path.clone(), reason: e.to_string() })?
        }
        None => Classifier::new(&inputs.chain, &inputs.log, inputs.window, args.input.horizon_ms).classify_all(),
    };
    let opts = AnalyzeOptions {
        bin_width_s: args.bin_width_s,
        bin_width_blocks: args.bin_width_blocks,
        horizon_ms: args.input.horizon_ms,
        grid_start_s: args.grid_start_s,
        rate_bucket_ms: args.rate_bucket_ms.max(1),
        fit: FitOptions {
            weighting: match args.fit_weighting {
                Weighting::Counts => FitWeighting::Counts,
                Weighting::Uniform => FitWeighting::Uniform,
            },
            ..FitOptions::default()
        },
        ..AnalyzeOptions::default()
    };
    let analyzer = Analyzer::new(&inputs.chain, &inputs.log, &labels, inputs.window, opts);
    let outputs = analyzer.write_outputs(out)?;
    for m in &outputs.missing {
        println!("no {}: {}", m.file, m.reason);
    }
    if let Some(s) = &outputs.summary {
        println!("analysis set {} (included {}, censored {})", s.analysis_set_size, s.included, s.censored);
        if let Some(m) = &s.inclusion_analysis_set {
            println!(
                "not included after 1h {:.3}, after 30d {:.3}",
                m.not_included_at_1h, m.not_included_at_30d
            );
        }
    }
    manifest.add_outputs(outputs.files);
    manifest.commit()
}

fn fmt_opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}{unit}"))
}

fn percent(v: f64) -> String {
    format!("{:.1} %", v * 100.0)
}

/// Plain-text summary laid out like the tables of the original study.
pub fn render_report(s: &Summary) -> String {
    let mut r = String::new();
    let _ = writeln!(r, "blocksonar report");
    let _ = writeln!(r, "=================");
    let _ = writeln!(r);
    let _ = writeln!(r, "listening window   [{}, {}) ms UTC", s.window.start_ms, s.window.end_ms);
    let _ = writeln!(
        r,
        "horizon            {}",
        s.horizon_ms.map_or_else(|| "none".into(), |h| format!("{h} ms UTC"))
    );
    let _ = writeln!(r);
    let _ = writeln!(r, "classes");
    for (label, n) in &s.class_counts {
        let _ = writeln!(r, "  {label:<24}{n:>10}");
    }
    let _ = writeln!(r);
    let e = &s.excluded;
    let _ = writeln!(r, "analysis set       {} transactions", s.analysis_set_size);
    let _ = writeln!(
        r,
        "  excluded         echo {}, invalid {}, unclassified {}, coinbase {}, locktime {}, outside window {}, boundary {}",
        e.echo, e.invalid, e.unclassified, e.coinbase, e.locktime, e.outside_window, e.boundary_interval
    );
    let _ = writeln!(r, "  included         {}", s.included);
    let _ = writeln!(r, "  censored         {}", s.censored);
    let _ = writeln!(r);
    let _ = writeln!(r, "inclusion delay fit, count ~ A exp(-t / delta)");
    for (name, unit, fit) in [("seconds", " s", &s.fit_seconds), ("blocks", " blocks", &s.fit_blocks)] {
        match fit {
            FitOutcome::Fitted(f) => {
                let _ = writeln!(
                    r,
                    "  {name:<8} delta {:.2}{unit}, A {:.3}, rms log residual {:.4}, {} bins",
                    f.delta, f.amplitude, f.rms_log_residual, f.bins_used
                );
            }
            FitOutcome::Unavailable { reason } => {
                let _ = writeln!(r, "  {name:<8} unavailable: {reason}");
            }
        }
    }
    let _ = writeln!(r);
    for (title, marks) in [
        ("inclusion, analysis set", &s.inclusion_analysis_set),
        ("inclusion, all observed valid transactions", &s.inclusion_observed),
    ] {
        let _ = writeln!(r, "{title}");
        match marks {
            Some(m) => {
                let _ = writeln!(r, "  transactions               {}", m.transactions);
                let _ = writeln!(r, "  not included after 1 h     {}", percent(m.not_included_at_1h));
                let _ = writeln!(r, "  not included after 30 d    {}", percent(m.not_included_at_30d));
                let _ = writeln!(r, "  value included within 1 h  {}", percent(m.value_included_at_1h));
                let _ = writeln!(r, "  value included within 3 h  {}", percent(m.value_included_at_3h));
                let _ = writeln!(r, "  value included within 30 d {}", percent(m.value_included_at_30d));
            }
            None => {
                let _ = writeln!(r, "  n/a");
            }
        }
        let _ = writeln!(r);
    }
    let _ = writeln!(r, "block intervals             listening time       blockchain time");
    let (l, b): (Option<IntervalStats>, Option<IntervalStats>) = match &s.block_intervals {
        Some(bi) => (Some(bi.listening), Some(bi.blockchain)),
        None => (None, None),
    };
    let rows: [(&str, fn(&IntervalStats) -> f64, &str); 6] = [
        ("Min", |x| x.min_s, " s"),
        ("Max", |x| x.max_s, " s"),
        ("Medium Time", |x| x.mean_s, " s"),
        ("Variance", |x| x.variance_s2, " s2"),
        ("Std deviation", |x| x.std_dev_s, " s"),
        ("Percentile 50%", |x| x.median_s, " s"),
    ];
    for (name, get, unit) in rows {
        let _ = writeln!(
            r,
            "  {name:<18}{:>22}{:>22}",
            fmt_opt(l.as_ref().map(get), unit),
            fmt_opt(b.as_ref().map(get), unit)
        );
    }
    if let Some(bi) = &s.block_intervals {
        let _ = writeln!(r, "  intervals         {:>22}", bi.intervals);
    }
    let _ = writeln!(r);
    let rf = &s.reference;
    let _ = writeln!(r, "reference magnitudes ({})", rf.note);
    let _ = writeln!(r, "  delta                    {} s, {} blocks", rf.delta_seconds, rf.delta_blocks);
    let _ = writeln!(
        r,
        "  block interval           mean {} s, median {} s, min {} s",
        rf.mean_block_interval_s, rf.median_block_interval_s, rf.min_block_interval_s
    );
    let _ = writeln!(
        r,
        "  block reach              {} of nodes in 1 s, {} in 10 s",
        percent(rf.propagation_fraction_at_1s),
        percent(rf.propagation_fraction_at_10s)
    );
    let _ = writeln!(
        r,
        "  not included             {} after 1 h, {} after 30 d",
        percent(rf.not_included_at_1h),
        percent(rf.not_included_at_30d)
    );
    let _ = writeln!(
        r,
        "  value included           {} within 3 h, {} within 30 d",
        percent(rf.value_included_at_3h),
        percent(rf.value_included_at_30d)
    );
    if !s.missing_figures.is_empty() {
        let _ = writeln!(r);
        let _ = writeln!(r, "missing figures");
        for m in &s.missing_figures {
            let _ = writeln!(r, "  {}: {}", m.file, m.reason);
        }
    }
    r
}

/// Plot script for one figure: `(title, x label, y label, log x, style)`.
fn plot_spec(name: &str) -> (&'static str, &'static str, &'static str, bool) {
    match name {
        "propagation_curves" => ("Peers announcing a new block", "time since first sighting (s)", "peers", true),
        "delay_hist_seconds" => ("Inclusion delay", "delay (s)", "transactions", false),
        "delay_hist_blocks" => ("Inclusion delay", "delay (blocks)", "transactions", false),
        "cumulative_count" => ("Fraction of transactions included", "time (s)", "fraction", true),
        "cumulative_value" => ("Fraction of value included", "time (s)", "fraction", true),
        "value_vs_delay" => ("Mean value vs delay", "delay (blocks)", "mean value (sat)", false),
        "fee_vs_delay" => ("Mean fee vs delay", "delay (blocks)", "mean fee (sat)", false),
        "tx_per_block" => ("Transactions per block interval", "height", "transactions", false),
        _ => ("Transactions per hour", "hour start (ms)", "transactions", false),
    }
}

fn gnuplot_files(analysis: &Path, plots: &Path, csv_name: &str) -> Result<Vec<PathBuf>> {
    let src = analysis.join(csv_name);
    let mut reader = csv::Reader::from_path(&src).map_err(|e| CliError::Parse { path: src.clone(), reason: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Parse { path: src.clone(), reason: e.to_string() })?
        .clone();
    let stem = csv_name.trim_end_matches(".csv");
    let mut dat = format!("# {}\n", headers.iter().collect::<Vec<_>>().join(" "));
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Parse { path: src.clone(), reason: e.to_string() })?;
        let fields: Vec<&str> = rec.iter().map(|f| if f.is_empty() { "NaN" } else { f }).collect();
        dat.push_str(&fields.join(" "));
        dat.push('\n');
    }
    let (title, xl, yl, logx) = plot_spec(stem);
    let (x, y) = match stem {
        "propagation_curves" => ("2", "3"),
        "tx_per_block" => ("2", "5"),
        "tx_per_hour" => ("1", "2"),
        _ => ("1", "2"),
    };
    let mut gp = String::new();
    let _ = writeln!(gp, "set title \"{title}\"");
    let _ = writeln!(gp, "set xlabel \"{xl}\"");
    let _ = writeln!(gp, "set ylabel \"{yl}\"");
    if logx {
        let _ = writeln!(gp, "set logscale x");
    }
    let _ = writeln!(gp, "set datafile missing \"NaN\"");
    let _ = writeln!(gp, "plot \"{stem}.dat\" using {x}:{y} with linespoints notitle");
    let dat_path = plots.join(format!("{stem}.dat"));
    let gp_path = plots.join(format!("{stem}.gp"));
    fs::write(&dat_path, dat).map_err(io_at(&dat_path))?;
    fs::write(&gp_path, gp).map_err(io_at(&gp_path))?;
    Ok(vec![dat_path, gp_path])
}

fn cmd_report(args: &ReportArgs, out: &Path) -> Result<PathBuf> {
    let mut manifest = RunManifest::new("report", out);
    let analysis = args.analysis.clone().unwrap_or_else(|| out.to_path_buf());
    let required: Vec<&str> = FIGURE_FILES
        .iter()
        .copied()
        .chain([analytics::TX_RATE_CSV, SUMMARY_JSON])
        .collect();
    for name in &required {
        if !analysis.join(name).is_file() {
            return Err(CliError::MissingInputs(name.to_string()));
        }
    }
    manifest.inputs.extend(required.iter().map(|n| analysis.join(n)));
    let summary_path = analysis.join(SUMMARY_JSON);
    let summary: Summary = serde_json::from_str(&fs::read_to_string(&summary_path).map_err(io_at(&summary_path))?)
        .map_err(|e| CliError::Parse { path: summary_path.clone(), reason: e.to_string() })?;
    let report_path = out.join(REPORT_FILE);
    fs::write(&report_path, render_report(&summary)).map_err(io_at(&report_path))?;
    let plots = out.join(PLOTS_DIR);
    fs::create_dir_all(&plots).map_err(io_at(&plots))?;
    let mut files = vec![report_path];
    for name in required.iter().filter(|n| n.ends_with(".csv")) {
        files.extend(gnuplot_files(&analysis, &plots, name)?);
    }
    manifest.add_outputs(files);
    manifest.commit()
}
