//! Peer discovery and passive listening.
//!
//! The crawler dials its seeds, asks every established peer for addresses,
//! dials those in turn and turns each received `inv` vector into an
//! [`InvEvent`]. It answers `ping` and nothing else: no `getdata`, no `inv`,
//! no relaying.

use std::collections::BTreeMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::InvEvent;
use crate::types::ObjectKind;
use crate::wire::{
    self, AddrEntry, InvKind, InvVector, Magic, Message, NetAddress, VersionInfo, WireError,
};

#[derive(Debug, Error)]
pub enum CrawlerError {
    #[error("no seed addresses configured")]
    NoSeeds,
    #[error("invalid crawler configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PeerState {
    New,
    Connecting,
    Established,
    Failed,
    Banned,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerEntry {
    pub address: NetAddress,
    pub state: PeerState,
    pub last_attempt_ms: Option<u64>,
    /// Earliest time the scheduler may dial again.
    pub next_attempt_ms: u64,
    pub consecutive_failures: u32,
    pub advertised_version: Option<VersionInfo>,
}

impl PeerEntry {
    fn new(address: NetAddress) -> Self {
        PeerEntry {
            address,
            state: PeerState::New,
            last_attempt_ms: None,
            next_attempt_ms: 0,
            consecutive_failures: 0,
            advertised_version: None,
        }
    }
}

/// Reconnection policy. The first retry after a disconnect is immediate;
/// the k-th consecutive failure defers the next attempt by
/// `base * 2^(k-1)`, capped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackoffPolicy {
    pub base_ms: u64,
    pub cap_ms: u64,
    pub ban_after: u32,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        BackoffPolicy {
            base_ms: 1_000,
            cap_ms: 300_000,
            ban_after: 20,
        }
    }
}

impl BackoffPolicy {
    pub fn delay_ms(&self, failures: u32) -> u64 {
        if failures == 0 {
            return 0;
        }
        let shift = (failures - 1).min(63);
        self.base_ms
            .checked_mul(1u64 << shift)
            .unwrap_or(u64::MAX)
            .min(self.cap_ms)
    }
}

/// Identity of a directory entry: services bits are not part of it.
type PeerKey = ([u8; 16], u16);

fn key(addr: &NetAddress) -> PeerKey {
    (addr.ip, addr.port)
}

/// Every address the crawler knows about, with its connection state.
#[derive(Clone, Debug, Default)]
pub struct PeerDirectory {
    peers: BTreeMap<PeerKey, PeerEntry>,
    own: Vec<PeerKey>,
    backoff: BackoffPolicy,
}

impl PeerDirectory {
    pub fn new(own_addresses: &[NetAddress], backoff: BackoffPolicy) -> Self {
        PeerDirectory {
            peers: BTreeMap::new(),
            own: own_addresses.iter().map(key).collect(),
            backoff,
        }
    }

    fn is_own(&self, addr: &NetAddress) -> bool {
        self.own.contains(&key(addr))
    }

    /// Inserts `addr` as NEW unless it is known or our own.
    pub fn insert(&mut self, addr: NetAddress) -> bool {
        if self.is_own(&addr) || self.peers.contains_key(&key(&addr)) {
            return false;
        }
        self.peers.insert(key(&addr), PeerEntry::new(addr));
        true
    }

    /// Records the addresses a peer sent; returns how many were new.
    pub fn on_addr(&mut self, source: &NetAddress, entries: &[AddrEntry]) -> usize {
        if !self.is_established(source) {
            return 0;
        }
        entries.iter().filter(|e| self.insert(e.addr)).count()
    }

    pub fn get(&self, addr: &NetAddress) -> Option<&PeerEntry> {
        self.peers.get(&key(addr))
    }

    pub fn is_established(&self, addr: &NetAddress) -> bool {
        self.get(addr).is_some_and(|p| p.state == PeerState::Established)
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn count(&self, state: PeerState) -> usize {
        self.peers.values().filter(|p| p.state == state).count()
    }

    pub fn live(&self) -> usize {
        self.count(PeerState::Connecting) + self.count(PeerState::Established)
    }

    pub fn entries(&self) -> Vec<PeerEntry> {
        self.peers.values().cloned().collect()
    }

    /// Picks up to `limit` dialable peers whose retry time has come and
    /// marks them CONNECTING. Addresses without a socket form (onion) are
    /// never dialed.
    pub fn take_due(&mut self, now_ms: u64, limit: usize) -> Vec<NetAddress> {
        let mut out = Vec::new();
        for entry in self.peers.values_mut() {
            if out.len() >= limit {
                break;
            }
            let due = matches!(entry.state, PeerState::New | PeerState::Failed)
                && entry.next_attempt_ms <= now_ms
                && entry.address.socket_addr().is_some();
            if due {
                entry.state = PeerState::Connecting;
                entry.last_attempt_ms = Some(now_ms);
                out.push(entry.address);
            }
        }
        out
    }

    pub fn on_established(&mut self, addr: &NetAddress, version: VersionInfo) {
        if let Some(p) = self.peers.get_mut(&key(addr)) {
            p.state = PeerState::Established;
            p.consecutive_failures = 0;
            p.advertised_version = Some(version);
        }
    }

    /// A dial or handshake failed.
    pub fn on_connect_failed(&mut self, addr: &NetAddress, now_ms: u64) {
        let backoff = self.backoff;
        if let Some(p) = self.peers.get_mut(&key(addr)) {
            p.consecutive_failures += 1;
            if p.consecutive_failures >= backoff.ban_after {
                p.state = PeerState::Banned;
            } else {
                p.state = PeerState::Failed;
                p.next_attempt_ms = now_ms.saturating_add(backoff.delay_ms(p.consecutive_failures));
            }
        }
    }

    /// An established session ended: retry at once. Announcements missed
    /// while disconnected are not recovered.
    pub fn on_disconnect(&mut self, addr: &NetAddress, now_ms: u64) {
        let Some(p) = self.peers.get_mut(&key(addr)) else { return };
        match p.state {
            PeerState::Established => {
                p.state = PeerState::Failed;
                p.next_attempt_ms = now_ms;
            }
            PeerState::Connecting => self.on_connect_failed(addr, now_ms),
            _ => {}
        }
    }

    /// One event per known-kind vector, all stamped `now_ms`. Nothing is
    /// recorded for a source that is not established.
    pub fn on_inv(&self, source: &NetAddress, vectors: &[InvVector], now_ms: u64) -> Vec<InvEvent> {
        if !self.is_established(source) {
            return Vec::new();
        }
        let peer = source.peer_string();
        vectors
            .iter()
            .filter_map(|v| {
                let kind = match v.kind {
                    InvKind::Tx => ObjectKind::Tx,
                    InvKind::Block => ObjectKind::Block,
                    InvKind::Unknown(_) => return None,
                };
                Some(InvEvent::new(now_ms, peer.clone(), kind, v.hash))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrawlerConfig {
    pub seeds: Vec<SocketAddr>,
    pub max_connections: usize,
    pub handshake_timeout_ms: u64,
    pub backoff: BackoffPolicy,
    pub getaddr_interval_ms: u64,
    /// Our own reachable address, never inserted into the directory.
    pub listen_address: Option<SocketAddr>,
    #[serde(with = "magic_serde")]
    pub magic: Magic,
    pub protocol_version: i32,
    pub user_agent: String,
    /// Scheduler polling period.
    pub tick_ms: u64,
}

impl Default for CrawlerConfig {
    fn default() -> Self {
        CrawlerConfig {
            seeds: Vec::new(),
            max_connections: 1024,
            handshake_timeout_ms: wire::DEFAULT_HANDSHAKE_TIMEOUT.as_millis() as u64,
            backoff: BackoffPolicy::default(),
            getaddr_interval_ms: 600_000,
            listen_address: None,
            magic: Magic::MAINNET,
            protocol_version: wire::DEFAULT_PROTOCOL_VERSION,
            user_agent: format!("/blocksonar:{}/", env!("CARGO_PKG_VERSION")),
            tick_ms: 50,
        }
    }
}

mod magic_serde {
    use super::Magic;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Magic, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(m.0))
    }

    /// A network name (`mainnet`, `testnet3`, `regtest`, `simnet`) or 8 hex digits.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Magic, D::Error> {
        let s = String::deserialize(d)?;
        if let Some(m) = Magic::from_name(&s) {
            return Ok(m);
        }
        let bytes = hex::decode(&s).map_err(D::Error::custom)?;
        let arr: [u8; 4] = bytes
            .try_into()
            .map_err(|_| D::Error::custom("magic must be 4 bytes"))?;
        Ok(Magic(arr))
    }
}

impl CrawlerConfig {
    pub fn validate(&self) -> Result<(), CrawlerError> {
        if self.seeds.is_empty() {
            return Err(CrawlerError::NoSeeds);
        }
        if self.max_connections == 0 {
            return Err(CrawlerError::Config("max_connections must be at least 1".into()));
        }
        if self.tick_ms == 0 || self.handshake_timeout_ms == 0 {
            return Err(CrawlerError::Config("timeouts must be positive".into()));
        }
        Ok(())
    }

    fn version_for(&self, peer: &NetAddress) -> VersionInfo {
        let mut v = VersionInfo::listener((now_ms() / 1000) as i64, rand::random());
        v.protocol_version = self.protocol_version;
        v.user_agent = self.user_agent.clone();
        v.addr_recv = *peer;
        if let Some(own) = self.listen_address {
            v.addr_from = NetAddress::from_socket(own, 0);
        }
        v
    }
}

struct Shared {
    config: CrawlerConfig,
    directory: Mutex<PeerDirectory>,
    sink: Mutex<Sender<InvEvent>>,
    stop: AtomicBool,
    /// Clones of live sockets, shut down to unblock readers on stop.
    sockets: Mutex<BTreeMap<PeerKey, TcpStream>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    fn directory(&self) -> MutexGuard<'_, PeerDirectory> {
        self.directory.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn stopping(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

/// A running crawler. Dropping it without [`CrawlerHandle::shutdown`]
/// leaves the threads running until the process exits.
pub struct CrawlerHandle {
    shared: Arc<Shared>,
    scheduler: Option<JoinHandle<()>>,
}

/// Seeds the directory and starts dialing. Events go to `sink` in
/// per-connection order.
pub fn bootstrap(config: CrawlerConfig, sink: Sender<InvEvent>) -> Result<CrawlerHandle, CrawlerError> {
    config.validate()?;
    let own: Vec<NetAddress> = config
        .listen_address
        .iter()
        .map(|a| NetAddress::from_socket(*a, 0))
        .collect();
    let mut directory = PeerDirectory::new(&own, config.backoff);
    for seed in &config.seeds {
        directory.insert(NetAddress::from_socket(*seed, 0));
    }
    let shared = Arc::new(Shared {
        config,
        directory: Mutex::new(directory),
        sink: Mutex::new(sink),
        stop: AtomicBool::new(false),
        sockets: Mutex::new(BTreeMap::new()),
        workers: Mutex::new(Vec::new()),
    });
    let scheduler = {
        let shared = Arc::clone(&shared);
        thread::Builder::new()
            .name("crawler-scheduler".into())
            .spawn(move || schedule(shared))?
    };
    Ok(CrawlerHandle {
        shared,
        scheduler: Some(scheduler),
    })
}

impl CrawlerHandle {
    pub fn directory(&self) -> Vec<PeerEntry> {
        self.shared.directory().entries()
    }

    pub fn established(&self) -> usize {
        self.shared.directory().count(PeerState::Established)
    }

    pub fn known(&self) -> usize {
        self.shared.directory().len()
    }

    /// Polls `pred` against the directory until it holds or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, pred: impl Fn(&PeerDirectory) -> bool) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if pred(&self.shared.directory()) {
                return true;
            }
            if std::time::Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Stops dialing, closes every session and joins all threads.
    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.scheduler.take() {
            let _ = s.join();
        }
        for sock in self.shared.sockets.lock().unwrap_or_else(|e| e.into_inner()).values() {
            let _ = sock.shutdown(Shutdown::Both);
        }
        let workers = std::mem::take(&mut *self.shared.workers.lock().unwrap_or_else(|e| e.into_inner()));
        for w in workers {
            let _ = w.join();
        }
    }
}

fn schedule(shared: Arc<Shared>) {
    let tick = Duration::from_millis(shared.config.tick_ms);
    while !shared.stopping() {
        let due = {
            let mut dir = shared.directory();
            let room = shared.config.max_connections.saturating_sub(dir.live());
            dir.take_due(now_ms(), room)
        };
        for addr in due {
            let worker = Arc::clone(&shared);
            let spawned = thread::Builder::new()
                .name(format!("peer-{}", addr.peer_string()))
                .spawn(move || run_session(worker, addr));
            match spawned {
                Ok(h) => {
                    let mut workers = shared.workers.lock().unwrap_or_else(|e| e.into_inner());
                    workers.retain(|w| !w.is_finished());
                    workers.push(h);
                }
                Err(e) => {
                    log::warn!("cannot spawn session thread: {e}");
                    shared.directory().on_connect_failed(&addr, now_ms());
                }
            }
        }
        thread::sleep(tick);
    }
}

fn run_session(shared: Arc<Shared>, addr: NetAddress) {
    let cfg = &shared.config;
    let timeout = Duration::from_millis(cfg.handshake_timeout_ms);
    let sock = addr.socket_addr().expect("only socket addresses are dialed");
    let connected = TcpStream::connect_timeout(&sock, timeout)
        .map_err(WireError::from)
        .and_then(|mut stream| {
            let _ = stream.set_nodelay(true);
            let info = wire::handshake(&mut stream, cfg.magic, &cfg.version_for(&addr), timeout)?;
            Ok((stream, info))
        });
    let (mut stream, info) = match connected {
        Ok(ok) => ok,
        Err(e) => {
            log::debug!("{}: {e}", addr.peer_string());
            shared.directory().on_connect_failed(&addr, now_ms());
            return;
        }
    };
    if let Ok(clone) = stream.try_clone() {
        shared
            .sockets
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key(&addr), clone);
    }
    shared.directory().on_established(&addr, info);
    log::info!("established {}", addr.peer_string());
    // A shutdown that raced the registration above would otherwise be missed.
    if shared.stopping() {
        let _ = stream.shutdown(Shutdown::Both);
    }

    if let Err(e) = listen(&shared, &addr, &mut stream) {
        log::debug!("{} closed: {e}", addr.peer_string());
    }
    shared
        .sockets
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .remove(&key(&addr));
    shared.directory().on_disconnect(&addr, now_ms());
}

const POLL: Duration = Duration::from_millis(100);
const FRAME_TIMEOUT: Duration = Duration::from_secs(60);

fn listen(shared: &Shared, addr: &NetAddress, stream: &mut TcpStream) -> wire::Result<()> {
    let cfg = &shared.config;
    let mut last_getaddr = None::<u64>;
    let mut probe = [0u8; 1];
    while !shared.stopping() {
        let now = now_ms();
        if last_getaddr.is_none_or(|t| now.saturating_sub(t) >= cfg.getaddr_interval_ms) {
            wire::write_message(stream, cfg.magic, &Message::GetAddr)?;
            last_getaddr = Some(now);
        }
        // Wait briefly for the first byte of a frame, then read the frame
        // under a generous timeout so a partial read never desyncs.
        stream.set_read_timeout(Some(POLL))?;
        match stream.peek(&mut probe) {
            Ok(0) => return Ok(()),
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e.into()),
        }
        stream.set_read_timeout(Some(FRAME_TIMEOUT))?;
        let (command, payload) = wire::decode_message(stream, cfg.magic, wire::DEFAULT_MAX_PAYLOAD)?;
        let received = now_ms();
        let msg = match Message::from_parts(command, payload) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("{}: dropping malformed message: {e}", addr.peer_string());
                continue;
            }
        };
        match msg {
            Message::Ping(nonce) => wire::write_message(stream, cfg.magic, &Message::Pong(nonce))?,
            Message::Inv(vectors) => {
                let events = shared.directory().on_inv(addr, &vectors, received);
                let sink = shared.sink.lock().unwrap_or_else(|e| e.into_inner());
                for ev in events {
                    if sink.send(ev).is_err() {
                        return Ok(());
                    }
                }
            }
            Message::Addr(entries) => {
                let added = shared.directory().on_addr(addr, &entries);
                log::debug!("{}: {added} new addresses", addr.peer_string());
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Hash32;
    use std::net::Ipv4Addr;

    fn addr(last: u8, port: u16) -> NetAddress {
        NetAddress::from_socket(SocketAddr::from((Ipv4Addr::new(10, 0, 0, last), port)), 1)
    }

    fn entry(a: NetAddress) -> AddrEntry {
        AddrEntry { last_seen: 0, addr: a }
    }

    fn established(dir: &mut PeerDirectory, a: NetAddress) {
        dir.insert(a);
        dir.take_due(0, usize::MAX);
        dir.on_established(&a, VersionInfo::listener(0, 0));
    }

    #[test]
    fn on_addr_counts_only_new() {
        let me = addr(99, 8333);
        let mut dir = PeerDirectory::new(&[me], BackoffPolicy::default());
        let src = addr(1, 8333);
        established(&mut dir, src);
        dir.insert(addr(2, 8333));
        let n = dir.on_addr(&src, &[entry(addr(2, 8333)), entry(addr(3, 8333)), entry(addr(4, 8333))]);
        assert_eq!(n, 2);
        assert_eq!(dir.on_addr(&src, &[entry(me)]), 0);
        assert!(dir.get(&me).is_none());
        // services bits do not make a new peer
        let mut other = addr(3, 8333);
        other.services = 77;
        assert_eq!(dir.on_addr(&src, &[entry(other)]), 0);
    }

    #[test]
    fn thousand_entries_in_one_call() {
        let mut dir = PeerDirectory::default();
        let src = addr(1, 1);
        established(&mut dir, src);
        let entries: Vec<AddrEntry> = (0..1000u16).map(|p| entry(addr(2, p + 10))).collect();
        assert_eq!(dir.on_addr(&src, &entries), 1000);
        assert_eq!(dir.len(), 1001);
    }

    #[test]
    fn backoff_schedule() {
        let b = BackoffPolicy::default();
        let delays: Vec<u64> = (1..=11).map(|k| b.delay_ms(k)).collect();
        assert_eq!(
            delays,
            vec![1_000, 2_000, 4_000, 8_000, 16_000, 32_000, 64_000, 128_000, 256_000, 300_000, 300_000]
        );
        assert_eq!(b.delay_ms(0), 0);
        assert_eq!(b.delay_ms(200), 300_000);
    }

    #[test]
    fn disconnect_retries_immediately_then_backs_off() {
        let mut dir = PeerDirectory::default();
        let a = addr(1, 1);
        established(&mut dir, a);
        dir.on_disconnect(&a, 5_000);
        assert_eq!(dir.take_due(5_000, 10), vec![a]);
        dir.on_connect_failed(&a, 5_010);
        assert!(dir.take_due(6_009, 10).is_empty());
        assert_eq!(dir.take_due(6_010, 10), vec![a]);
        dir.on_connect_failed(&a, 6_020);
        assert!(dir.take_due(8_019, 10).is_empty());
        assert_eq!(dir.take_due(8_020, 10), vec![a]);
    }

    #[test]
    fn failures_reset_on_success_and_ban_after_limit() {
        let mut dir = PeerDirectory::default();
        let a = addr(1, 1);
        dir.insert(a);
        let mut t = 0;
        for _ in 0..5 {
            assert_eq!(dir.take_due(t, 1), vec![a]);
            dir.on_connect_failed(&a, t);
            t += 400_000;
        }
        assert_eq!(dir.get(&a).unwrap().consecutive_failures, 5);
        dir.take_due(t, 1);
        dir.on_established(&a, VersionInfo::listener(0, 0));
        assert_eq!(dir.get(&a).unwrap().consecutive_failures, 0);

        let b = addr(2, 2);
        dir.insert(b);
        for _ in 0..20 {
            dir.take_due(t, 10);
            dir.on_connect_failed(&b, t);
            t += 400_000;
        }
        assert_eq!(dir.get(&b).unwrap().state, PeerState::Banned);
        assert!(!dir.take_due(u64::MAX, 10).contains(&b));
    }

    #[test]
    fn take_due_is_exclusive() {
        let mut dir = PeerDirectory::default();
        dir.insert(addr(1, 1));
        dir.insert(addr(2, 1));
        assert_eq!(dir.take_due(0, 1).len(), 1);
        assert_eq!(dir.take_due(0, 10).len(), 1);
        assert!(dir.take_due(0, 10).is_empty());
        assert_eq!(dir.live(), 2);
    }

    #[test]
    fn inv_events_need_an_established_source() {
        let mut dir = PeerDirectory::default();
        let a = addr(1, 8333);
        let vectors = vec![
            InvVector::tx(Hash32([1; 32])),
            InvVector::tx(Hash32([2; 32])),
            InvVector { kind: InvKind::Unknown(5), hash: Hash32([3; 32]) },
        ];
        dir.insert(a);
        assert!(dir.on_inv(&a, &vectors, 7).is_empty());
        dir.take_due(0, 1);
        dir.on_established(&a, VersionInfo::listener(0, 0));
        let events = dir.on_inv(&a, &vectors, 7);
        assert_eq!(events.len(), 2);
        assert!(events.iter().all(|e| e.ts_ms == 7 && e.kind == ObjectKind::Tx && e.peer == "10.0.0.1:8333"));
    }

    #[test]
    fn bootstrap_without_seeds_fails() {
        let (tx, _rx) = std::sync::mpsc::channel();
        assert!(matches!(bootstrap(CrawlerConfig::default(), tx), Err(CrawlerError::NoSeeds)));
    }
}
