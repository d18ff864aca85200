//! Discrete-event simulator of a gossiping Bitcoin-like network.
//!
//! Transactions arrive as a Poisson process at random peers and flood hop by
//! hop; miners build blocks from what they have heard, under a
//! [`MinerPolicy`]. A monitor connected to every peer records each
//! announcement it receives. A run yields the ground-truth ledger, the
//! monitor's event log and an [`Audit`] of what was scheduled.
//!
//! In-process runs are single-threaded and bitwise reproducible from the
//! seed. Loopback runs replay the monitor's deliveries over real sockets to
//! the [`crate::crawler`].

pub mod audit;
pub mod loopback;
pub mod topology;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainview::{write_ledger, LedgerBlock, LedgerLine, LedgerTx, LooseTx};
use crate::eventlog::{EventLog, EventLogError, InvEvent};
use crate::types::{Hash32, ObjectKind};

pub use audit::{audit_monitor, Audit, AuditReport, MinedBlock, SentCommand, SimStats};
pub use topology::{build_topology, Graph, TopologyKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    ConfigInvalid(String),
    #[error("topology still disconnected after {0} retries")]
    DisconnectedAfterRetries(usize),
    #[error("loopback network: {0}")]
    Loopback(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    EventLog(#[from] EventLogError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LatencyModel {
    Constant { ms: f64 },
    Uniform { min_ms: f64, max_ms: f64 },
    Exponential { mean_ms: f64 },
}

impl LatencyModel {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let ms = match *self {
            LatencyModel::Constant { ms } => ms,
            LatencyModel::Uniform { min_ms, max_ms } if max_ms > min_ms => {
                rng.random_range(min_ms..max_ms)
            }
            LatencyModel::Uniform { min_ms, .. } => min_ms,
            LatencyModel::Exponential { mean_ms } => {
                rng.sample(Exp::new(1.0 / mean_ms).expect("validated mean"))
            }
        };
        ms.round().max(0.0) as u64
    }

    /// Largest possible hop latency, if bounded.
    pub fn max_ms(&self) -> Option<u64> {
        match *self {
            LatencyModel::Constant { ms } => Some(ms.round() as u64),
            LatencyModel::Uniform { min_ms, max_ms } => Some(max_ms.max(min_ms).round() as u64),
            LatencyModel::Exponential { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LatencyModel::Constant { ms } => ms >= 0.0 && ms.is_finite(),
            LatencyModel::Uniform { min_ms, max_ms } => {
                min_ms >= 0.0 && max_ms >= min_ms && max_ms.is_finite()
            }
            LatencyModel::Exponential { mean_ms } => mean_ms > 0.0 && mean_ms.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::ConfigInvalid(format!("bad latency model {self:?}")))
        }
    }
}

/// Log-uniform distribution over `[min_sats, max_sats]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogUniform {
    pub min_sats: u64,
    pub max_sats: u64,
}

impl LogUniform {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        if self.max_sats <= self.min_sats {
            return self.min_sats;
        }
        let (lo, hi) = ((self.min_sats as f64).ln(), (self.max_sats as f64).ln());
        let x: f64 = rng.random_range(lo..hi);
        (x.exp().round() as u64).clamp(self.min_sats, self.max_sats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyKind {
    IncludeAll,
    /// Never include transactions worth less than `min_value_sats`.
    ValueThreshold { min_value_sats: u64 },
    /// At every block, leave out each eligible transaction with
    /// probability `p`; with `below_value_sats` set, only transactions
    /// worth less than that are at risk.
    SkipProb {
        p: f64,
        #[serde(default)]
        below_value_sats: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinerPolicy {
    #[serde(flatten)]
    pub kind: PolicyKind,
    #[serde(default)]
    pub max_block_txs: Option<usize>,
}

impl Default for MinerPolicy {
    fn default() -> Self {
        MinerPolicy {
            kind: PolicyKind::IncludeAll,
            max_block_txs: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitorMode {
    #[default]
    InProcess,
    LoopbackSockets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub peers: usize,
    pub topology: TopologyKind,
    pub topology_retries: usize,
    /// Per hop between peers.
    pub latency: LatencyModel,
    /// Peer to monitor.
    pub monitor_latency_ms: u64,
    pub block_interval_mean_ms: f64,
    pub tx_rate_per_s: f64,
    pub value: LogUniform,
    pub fee: LogUniform,
    pub miners: usize,
    pub policy: MinerPolicy,
    /// Chance that a second miner also finds a block within the race window.
    pub fork_probability: f64,
    pub race_window_ms: u64,
    /// Chance per block event that some peer also announces an invalid block.
    pub invalid_block_probability: f64,
    pub invalid_tx_fraction: f64,
    pub locktime_fraction: f64,
    /// Blocks and transactions the monitor only hears about `late_delay_ms`
    /// after creation, from a single peer.
    pub late_block_fraction: f64,
    pub late_tx_fraction: f64,
    pub late_delay_ms: u64,
    /// Generation stops at whichever limit comes first; deliveries in
    /// flight still complete.
    pub duration_ms: u64,
    pub max_blocks: Option<u64>,
    pub monitor_mode: MonitorMode,
    /// Loopback replay speed: wall milliseconds per simulated millisecond.
    pub time_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            peers: 50,
            topology: TopologyKind::RandomRegular { degree: 4 },
            topology_retries: 100,
            latency: LatencyModel::Uniform {
                min_ms: 10.0,
                max_ms: 100.0,
            },
            monitor_latency_ms: 0,
            block_interval_mean_ms: 2000.0,
            tx_rate_per_s: 25.0,
            value: LogUniform {
                min_sats: 1_000,
                max_sats: 1_000_000_000,
            },
            fee: LogUniform {
                min_sats: 100,
                max_sats: 100_000,
            },
            miners: 5,
            policy: MinerPolicy::default(),
            fork_probability: 0.0,
            race_window_ms: 200,
            invalid_block_probability: 0.0,
            invalid_tx_fraction: 0.0,
            locktime_fraction: 0.0,
            late_block_fraction: 0.0,
            late_tx_fraction: 0.0,
            late_delay_ms: 5_000,
            duration_ms: 3_600_000,
            max_blocks: Some(100),
            monitor_mode: MonitorMode::InProcess,
            time_scale: 1.0,
        }
    }
}

fn check_fraction(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SimError::ConfigInvalid(format!("{name} = {p} is not in [0, 1]")))
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(SimError::ConfigInvalid(m));
        if self.peers < 2 {
            return invalid("peers must be at least 2".into());
        }
        if self.miners == 0 || self.miners > self.peers {
            return invalid(format!("miners must be in 1..={}", self.peers));
        }
        if !(self.block_interval_mean_ms > 0.0 && self.block_interval_mean_ms.is_finite()) {
            return invalid("block_interval_mean_ms must be positive".into());
        }
        if !(self.tx_rate_per_s >= 0.0 && self.tx_rate_per_s.is_finite()) {
            return invalid("tx_rate_per_s must be non-negative".into());
        }
        if self.value.min_sats == 0 || self.value.min_sats > self.value.max_sats {
            return invalid("value range must satisfy 0 < min <= max".into());
        }
        if self.fee.min_sats == 0 || self.fee.min_sats > self.fee.max_sats {
            return invalid("fee range must satisfy 0 < min <= max".into());
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return invalid("time_scale must be positive".into());
        }
        if self.max_blocks == Some(0) {
            return invalid("max_blocks must be positive".into());
        }
        if let PolicyKind::SkipProb { p, .. } = self.policy.kind {
            check_fraction("policy.p", p)?;
        }
        if self.policy.max_block_txs == Some(0) {
            return invalid("policy.max_block_txs must be positive".into());
        }
        check_fraction("fork_probability", self.fork_probability)?;
        check_fraction("invalid_block_probability", self.invalid_block_probability)?;
        check_fraction("invalid_tx_fraction", self.invalid_tx_fraction)?;
        check_fraction("locktime_fraction", self.locktime_fraction)?;
        check_fraction("late_block_fraction", self.late_block_fraction)?;
        check_fraction("late_tx_fraction", self.late_tx_fraction)?;
        self.latency.validate()
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub ledger: Vec<LedgerLine>,
    /// What the monitor recorded.
    pub log: EventLog,
    pub audit: Audit,
    pub graph: Graph,
    /// Time of the last processed event.
    pub end_ms: u64,
}

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const LOG_FILE: &str = "events.csv";
pub const AUDIT_FILE: &str = "audit.json";
pub const DELIVERIES_FILE: &str = "deliveries.csv";

impl SimOutput {
    /// Writes ledger, event log and audit under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let ledger = dir.join(LEDGER_FILE);
        write_ledger(&ledger, &self.ledger)?;
        let log = dir.join(LOG_FILE);
        self.log.save(&log)?;
        let mut files = vec![ledger, log];
        files.extend(self.audit.save(dir)?);
        Ok(files)
    }
}

/// Runs the configured simulation.
pub fn run(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    match config.monitor_mode {
        MonitorMode::InProcess => run_in_process(config),
        MonitorMode::LoopbackSockets => loopback::run_loopback(config),
    }
}

/// Fake but stable monitor-side identity of peer `i`.
pub fn peer_name(i: usize) -> String {
    let n = i + 1;
    format!("10.{}.{}.{}:8333", (n >> 16) & 0xff, (n >> 8) & 0xff, n & 0xff)
}

const SUBSIDY_SATS: u64 = 5_000_000_000;
const UNKNOWN: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ev {
    TxArrival,
    BlockEvent,
    Mine { miner: usize },
    DeliverTx { peer: usize, tx: u32 },
    DeliverBlock { peer: usize, block: u32 },
    Echo { peer: usize, kind: ObjectKind, hash: Hash32 },
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    time: u64,
    seq: u64,
    ev: Ev,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct TxState {
    hash: Hash32,
    value: u64,
    fee: u64,
    locktime: bool,
    valid: bool,
    late: bool,
    declined: bool,
    containing: Vec<u32>,
}

struct BlockState {
    hash: Hash32,
    parent: Option<u32>,
    height: u64,
    time_ms: u64,
    miner: Option<usize>,
    valid: bool,
    late: bool,
    txs: Vec<u32>,
    coinbase: Hash32,
}

struct Engine<'c> {
    cfg: &'c SimConfig,
    rng: ChaCha8Rng,
    graph: Graph,
    miners: Vec<usize>,
    names: Vec<String>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: u64,
    txs: Vec<TxState>,
    blocks: Vec<BlockState>,
    /// Per peer, per tx: receipt time or `UNKNOWN`.
    tx_recv: Vec<Vec<u64>>,
    block_known: Vec<Vec<bool>>,
    tips: Vec<u32>,
    deliveries: Vec<InvEvent>,
    block_events: u64,
    generating: bool,
}

fn random_hash<R: Rng>(rng: &mut R) -> Hash32 {
    let mut bytes = [0u8; 32];
    rng.fill(&mut bytes);
    Hash32(bytes)
}

impl<'c> Engine<'c> {
    fn new(cfg: &'c SimConfig) -> Result<Self> {
        let mut topo_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let graph = build_topology(cfg.peers, cfg.topology, cfg.topology_retries, &mut topo_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let miners = rand::seq::index::sample(&mut rng, cfg.peers, cfg.miners).into_vec();
        let genesis = BlockState {
            hash: random_hash(&mut rng),
            parent: None,
            height: 0,
            time_ms: 0,
            miner: None,
            valid: true,
            late: false,
            txs: Vec::new(),
            coinbase: random_hash(&mut rng),
        };
        Ok(Engine {
            cfg,
            rng,
            miners,
            names: (0..cfg.peers).map(peer_name).collect(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            txs: Vec::new(),
            blocks: vec![genesis],
            tx_recv: vec![Vec::new(); cfg.peers],
            block_known: vec![vec![true]; cfg.peers],
            tips: vec![0; cfg.peers],
            deliveries: Vec::new(),
            block_events: 0,
            generating: true,
            graph,
        })
    }

    fn schedule(&mut self, time: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, ev });
    }

    fn exp_delay(&mut self, mean_ms: f64) -> u64 {
        let d: f64 = self.rng.sample(Exp::new(1.0 / mean_ms).expect("positive mean"));
        d.round() as u64
    }

    fn schedule_generation(&mut self, at: u64, ev: Ev) {
        if at < self.cfg.duration_ms {
            self.schedule(at, ev);
        }
    }

    fn announce(&mut self, peer: usize, kind: ObjectKind, hash: Hash32) {
        let ts = self.now + self.cfg.monitor_latency_ms;
        self.deliveries.push(InvEvent::new(ts, self.names[peer].clone(), kind, hash));
    }

    fn run(mut self) -> SimOutput {
        if self.cfg.tx_rate_per_s > 0.0 {
            let first = self.exp_delay(1000.0 / self.cfg.tx_rate_per_s);
            self.schedule_generation(first, Ev::TxArrival);
        }
        let first = self.exp_delay(self.cfg.block_interval_mean_ms);
        self.schedule_generation(first, Ev::BlockEvent);
        while let Some(Scheduled { time, ev, .. }) = self.queue.pop() {
            self.now = time;
            match ev {
                Ev::TxArrival => self.on_tx_arrival(),
                Ev::BlockEvent => self.on_block_event(),
                Ev::Mine { miner } => self.mine(miner),
                Ev::DeliverTx { peer, tx } => self.receive_tx(peer, tx),
                Ev::DeliverBlock { peer, block } => self.receive_block(peer, block),
                Ev::Echo { peer, kind, hash } => self.announce(peer, kind, hash),
            }
        }
        self.finish()
    }

    fn on_tx_arrival(&mut self) {
        if !self.generating {
            return;
        }
        let cfg = self.cfg;
        let origin = self.rng.random_range(0..cfg.peers);
        let hash = random_hash(&mut self.rng);
        let value = cfg.value.sample(&mut self.rng);
        let fee = cfg.fee.sample(&mut self.rng);
        let locktime = self.rng.random_bool(cfg.locktime_fraction);
        let valid = !self.rng.random_bool(cfg.invalid_tx_fraction);
        let late = valid && self.rng.random_bool(cfg.late_tx_fraction);
        let idx = self.txs.len() as u32;
        self.txs.push(TxState {
            hash,
            value,
            fee,
            locktime,
            valid,
            late,
            declined: false,
            containing: Vec::new(),
        });
        for recv in &mut self.tx_recv {
            recv.push(UNKNOWN);
        }
        if valid {
            self.receive_tx(origin, idx);
        } else {
            // Peers reject it, so only the origin ever announces it.
            self.tx_recv[origin][idx as usize] = self.now;
            self.announce(origin, ObjectKind::Tx, hash);
        }
        if late {
            let echo_peer = self.rng.random_range(0..cfg.peers);
            let at = self.now + cfg.late_delay_ms;
            self.schedule(at, Ev::Echo { peer: echo_peer, kind: ObjectKind::Tx, hash });
        }
        let next = self.now + self.exp_delay(1000.0 / cfg.tx_rate_per_s);
        self.schedule_generation(next, Ev::TxArrival);
    }

    fn receive_tx(&mut self, peer: usize, tx: u32) {
        let i = tx as usize;
        if self.tx_recv[peer][i] != UNKNOWN {
            return;
        }
        self.tx_recv[peer][i] = self.now;
        if !self.txs[i].late {
            let hash = self.txs[i].hash;
            self.announce(peer, ObjectKind::Tx, hash);
        }
        for k in 0..self.graph.adjacency[peer].len() {
            let q = self.graph.adjacency[peer][k];
            if self.tx_recv[q][i] == UNKNOWN {
                let at = self.now + self.cfg.latency.sample(&mut self.rng);
                self.schedule(at, Ev::DeliverTx { peer: q, tx });
            }
        }
    }

    fn knows_block(&self, peer: usize, block: u32) -> bool {
        self.block_known[peer].get(block as usize).copied().unwrap_or(false)
    }

    fn receive_block(&mut self, peer: usize, block: u32) {
        if self.knows_block(peer, block) {
            return;
        }
        let known = &mut self.block_known[peer];
        if known.len() <= block as usize {
            known.resize(block as usize + 1, false);
        }
        known[block as usize] = true;
        let b = &self.blocks[block as usize];
        if b.height > self.blocks[self.tips[peer] as usize].height {
            self.tips[peer] = block;
        }
        if !b.late {
            let hash = b.hash;
            self.announce(peer, ObjectKind::Block, hash);
        }
        for k in 0..self.graph.adjacency[peer].len() {
            let q = self.graph.adjacency[peer][k];
            if !self.knows_block(q, block) {
                let at = self.now + self.cfg.latency.sample(&mut self.rng);
                self.schedule(at, Ev::DeliverBlock { peer: q, block });
            }
        }
    }

    fn on_block_event(&mut self) {
        if !self.generating {
            return;
        }
        let cfg = self.cfg;
        self.block_events += 1;
        let miner = self.miners[self.rng.random_range(0..self.miners.len())];
        self.mine(miner);
        if self.miners.len() >= 2 && self.rng.random_bool(cfg.fork_probability) {
            let mut rival = miner;
            while rival == miner {
                rival = self.miners[self.rng.random_range(0..self.miners.len())];
            }
            let at = self.now + self.rng.random_range(0..cfg.race_window_ms.max(1));
            self.schedule(at, Ev::Mine { miner: rival });
        }
        if self.rng.random_bool(cfg.invalid_block_probability) {
            let origin = self.rng.random_range(0..cfg.peers);
            self.invalid_block(origin);
        }
        if cfg.max_blocks.is_some_and(|m| self.block_events >= m) {
            self.generating = false;
            return;
        }
        let next = self.now + self.exp_delay(cfg.block_interval_mean_ms);
        self.schedule_generation(next, Ev::BlockEvent);
    }

    fn ancestors(&self, tip: u32) -> Vec<bool> {
        let mut anc = vec![false; self.blocks.len()];
        let mut cur = Some(tip);
        while let Some(b) = cur {
            anc[b as usize] = true;
            cur = self.blocks[b as usize].parent;
        }
        anc
    }

    fn mine(&mut self, miner: usize) {
        let cfg = self.cfg;
        let parent = self.tips[miner];
        let anc = self.ancestors(parent);
        let cap = cfg.policy.max_block_txs.unwrap_or(usize::MAX);
        let mut chosen = Vec::new();
        for i in 0..self.txs.len() {
            if chosen.len() >= cap {
                break;
            }
            let tx = &self.txs[i];
            let eligible = tx.valid
                && self.tx_recv[miner][i] < self.now
                && !tx.containing.iter().any(|&c| anc[c as usize]);
            if !eligible {
                continue;
            }
            let value = tx.value;
            let take = match cfg.policy.kind {
                PolicyKind::IncludeAll => true,
                PolicyKind::ValueThreshold { min_value_sats } => value >= min_value_sats,
                PolicyKind::SkipProb { p, below_value_sats } => {
                    let at_risk = below_value_sats.is_none_or(|v| value < v);
                    !(at_risk && self.rng.random_bool(p))
                }
            };
            if take {
                chosen.push(i as u32);
            } else {
                self.txs[i].declined = true;
            }
        }
        let idx = self.blocks.len() as u32;
        for &t in &chosen {
            self.txs[t as usize].containing.push(idx);
        }
        let late = self.rng.random_bool(cfg.late_block_fraction);
        let hash = random_hash(&mut self.rng);
        let coinbase = random_hash(&mut self.rng);
        self.blocks.push(BlockState {
            hash,
            parent: Some(parent),
            height: self.blocks[parent as usize].height + 1,
            time_ms: self.now,
            miner: Some(miner),
            valid: true,
            late,
            txs: chosen,
            coinbase,
        });
        if late {
            let echo_peer = self.rng.random_range(0..cfg.peers);
            let at = self.now + cfg.late_delay_ms;
            self.schedule(at, Ev::Echo { peer: echo_peer, kind: ObjectKind::Block, hash });
        }
        self.receive_block(miner, idx);
    }

    fn invalid_block(&mut self, origin: usize) {
        let parent = self.tips[origin];
        let hash = random_hash(&mut self.rng);
        let coinbase = random_hash(&mut self.rng);
        self.blocks.push(BlockState {
            hash,
            parent: Some(parent),
            height: self.blocks[parent as usize].height + 1,
            time_ms: self.now,
            miner: Some(origin),
            valid: false,
            late: false,
            txs: Vec::new(),
            coinbase,
        });
        self.announce(origin, ObjectKind::Block, hash);
    }

    fn main_chain(&self) -> Vec<bool> {
        let best = (0..self.blocks.len())
            .filter(|&i| self.blocks[i].valid)
            .min_by_key(|&i| {
                let b = &self.blocks[i];
                (std::cmp::Reverse(b.height), b.time_ms, i)
            })
            .expect("genesis is valid") as u32;
        self.ancestors(best)
    }

    fn finish(self) -> SimOutput {
        let main = self.main_chain();
        let mut stats = SimStats {
            blocks_mined: self.block_events,
            end_ms: self.now,
            ..SimStats::default()
        };
        for tx in &self.txs {
            if !tx.valid {
                stats.invalid_txs += 1;
                continue;
            }
            stats.generated_txs += 1;
            let on_main = tx.containing.iter().filter(|&&c| main[c as usize]).count();
            if on_main > 1 {
                stats.included_more_than_once += 1;
            }
            if on_main >= 1 {
                stats.included += 1;
            } else if tx.declined {
                stats.policy_skipped += 1;
            } else {
                stats.mempool += 1;
            }
        }

        let mut order: Vec<usize> = (0..self.blocks.len()).collect();
        order.sort_by_key(|&i| (self.blocks[i].height, self.blocks[i].time_ms, i));
        let mut ledger = Vec::with_capacity(self.blocks.len() + self.txs.len());
        let mut mined = Vec::with_capacity(self.blocks.len());
        for &i in &order {
            let b = &self.blocks[i];
            let fees: u64 = b.txs.iter().map(|&t| self.txs[t as usize].fee).sum();
            let mut txs = vec![LedgerTx {
                txid: b.coinbase,
                value_sats: SUBSIDY_SATS + fees,
                fee_sats: 0,
                locktime_set: false,
                is_coinbase: true,
            }];
            txs.extend(b.txs.iter().map(|&t| {
                let tx = &self.txs[t as usize];
                LedgerTx {
                    txid: tx.hash,
                    value_sats: tx.value,
                    fee_sats: tx.fee,
                    locktime_set: tx.locktime,
                    is_coinbase: false,
                }
            }));
            if b.valid {
                stats.valid_blocks += 1;
            } else {
                stats.invalid_blocks += 1;
            }
            if main[i] {
                stats.main_chain_blocks += 1;
            }
            mined.push(MinedBlock {
                hash: b.hash,
                height: b.height,
                time_ms: b.time_ms,
                miner: b.miner,
                valid: b.valid,
                main_chain: main[i],
                late: b.late,
            });
            ledger.push(LedgerLine::Block(LedgerBlock {
                hash: b.hash,
                height: b.height,
                prev: b.parent.map_or(Hash32([0; 32]), |p| self.blocks[p as usize].hash),
                time_ms: b.time_ms,
                pow_valid: b.valid,
                main_chain: main[i],
                txs,
            }));
        }
        for (i, tx) in self.txs.iter().enumerate() {
            let loose = if tx.valid {
                tx.containing.is_empty()
            } else {
                // Half the invalid ones are missing from the ledger entirely.
                i % 2 == 0
            };
            if loose {
                ledger.push(LedgerLine::Tx(LooseTx {
                    txid: tx.hash,
                    value_sats: tx.value,
                    fee_sats: tx.fee,
                    locktime_set: tx.locktime,
                    is_coinbase: false,
                    valid: tx.valid,
                }));
            }
        }

        let log = EventLog::from_events(self.deliveries.clone());
        let audit = Audit {
            seed: self.cfg.seed,
            mode: self.cfg.monitor_mode,
            peers: self.names.clone(),
            miners: self.miners.clone(),
            stats,
            blocks: mined,
            monitor_sent: Vec::new(),
            deliveries: self.deliveries,
        };
        SimOutput {
            ledger,
            log,
            audit,
            graph: self.graph,
            end_ms: self.now,
        }
    }
}

/// The single-threaded, deterministic run.
pub fn run_in_process(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    Ok(Engine::new(config)?.run())
}
