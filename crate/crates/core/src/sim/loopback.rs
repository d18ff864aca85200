//! Simulated peers listening on 127.0.0.1, speaking the real wire protocol.

use std::collections::HashMap;
use std::io;
use std::net::{Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::audit::SentCommand;
use super::{run_in_process, MonitorMode, Result, SimConfig, SimError, SimOutput};
use crate::crawler::{self, now_ms, CrawlerConfig};
use crate::eventlog::{EventLog, InvEvent};
use crate::types::ObjectKind;
use crate::wire::{self, AddrEntry, InvVector, Magic, Message, NetAddress, VersionInfo};

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct PeerShared {
    addr: SocketAddr,
    neighbors: Vec<SocketAddr>,
    magic: Magic,
    accepting: AtomicBool,
    /// Write side of the current monitor session.
    session: Mutex<Option<(u64, TcpStream)>>,
    streams: Mutex<Vec<TcpStream>>,
    received: Mutex<Vec<String>>,
    handshakes: AtomicUsize,
    next_session: AtomicUsize,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl PeerShared {
    fn send(&self, msg: &Message) -> bool {
        let mut session = lock(&self.session);
        match session.as_mut() {
            Some((_, stream)) => wire::write_message(stream, self.magic, msg).is_ok(),
            None => false,
        }
    }

    fn live(&self) -> bool {
        lock(&self.session).is_some()
    }
}

/// A set of listening peers wired up as a given graph.
pub struct LoopbackNetwork {
    peers: Vec<Arc<PeerShared>>,
    stop: Arc<AtomicBool>,
    acceptors: Vec<JoinHandle<()>>,
}

impl LoopbackNetwork {
    /// Binds one listener per node; each answers `getaddr` with its
    /// neighbours' listening addresses.
    pub fn start(adjacency: &[Vec<usize>], magic: Magic) -> io::Result<Self> {
        let listeners = adjacency
            .iter()
            .map(|_| TcpListener::bind((Ipv4Addr::LOCALHOST, 0)))
            .collect::<io::Result<Vec<_>>>()?;
        let addrs = listeners
            .iter()
            .map(TcpListener::local_addr)
            .collect::<io::Result<Vec<_>>>()?;
        let stop = Arc::new(AtomicBool::new(false));
        let mut peers = Vec::new();
        let mut acceptors = Vec::new();
        for (i, listener) in listeners.into_iter().enumerate() {
            let shared = Arc::new(PeerShared {
                addr: addrs[i],
                neighbors: adjacency[i].iter().map(|&j| addrs[j]).collect(),
                magic,
                accepting: AtomicBool::new(true),
                session: Mutex::new(None),
                streams: Mutex::new(Vec::new()),
                received: Mutex::new(Vec::new()),
                handshakes: AtomicUsize::new(0),
                next_session: AtomicUsize::new(0),
                workers: Mutex::new(Vec::new()),
            });
            listener.set_nonblocking(true)?;
            let (s, st) = (Arc::clone(&shared), Arc::clone(&stop));
            acceptors.push(thread::spawn(move || accept_loop(listener, s, st)));
            peers.push(shared);
        }
        Ok(LoopbackNetwork { peers, stop, acceptors })
    }

    pub fn addresses(&self) -> Vec<SocketAddr> {
        self.peers.iter().map(|p| p.addr).collect()
    }

    /// Peers with a live monitor session.
    pub fn connected(&self) -> usize {
        self.peers.iter().filter(|p| p.live()).count()
    }

    pub fn handshakes(&self, peer: usize) -> usize {
        self.peers[peer].handshakes.load(Ordering::SeqCst)
    }

    /// Closes every session of `peer`; it keeps listening.
    pub fn drop_connections(&self, peer: usize) {
        for s in lock(&self.peers[peer].streams).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// While not accepting, connections are closed on arrival.
    pub fn set_accepting(&self, peer: usize, accepting: bool) {
        self.peers[peer].accepting.store(accepting, Ordering::SeqCst);
    }

    /// Every command received from the monitor, per peer in arrival order.
    pub fn received_commands(&self) -> Vec<SentCommand> {
        self.peers
            .iter()
            .flat_map(|p| {
                lock(&p.received)
                    .iter()
                    .map(|c| SentCommand {
                        peer: p.addr.to_string(),
                        command: c.clone(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Sends `inv` to `peer`'s monitor session now.
    pub fn announce(&self, peer: usize, vectors: Vec<InvVector>) -> bool {
        self.peers[peer].send(&Message::Inv(vectors))
    }

    /// Replays per-peer `(offset_ms, vectors)` schedules against the wall
    /// clock, `time_scale` wall ms per offset ms. Returns the wall time of
    /// offset 0 once everything was sent.
    pub fn replay(&self, schedule: Vec<Vec<(u64, Vec<InvVector>)>>, time_scale: f64) -> u64 {
        let lead = Duration::from_millis(50);
        let start_instant = Instant::now() + lead;
        let start_ms = now_ms() + lead.as_millis() as u64;
        let handles: Vec<_> = schedule
            .into_iter()
            .zip(&self.peers)
            .map(|(items, peer)| {
                let peer = Arc::clone(peer);
                thread::spawn(move || {
                    for (offset, vectors) in items {
                        let at = start_instant + Duration::from_secs_f64(offset as f64 * time_scale / 1000.0);
                        if let Some(wait) = at.checked_duration_since(Instant::now()) {
                            thread::sleep(wait);
                        }
                        peer.send(&Message::Inv(vectors));
                    }
                })
            })
            .collect();
        for h in handles {
            let _ = h.join();
        }
        start_ms
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.acceptors {
            let _ = h.join();
        }
        for p in &self.peers {
            for s in lock(&p.streams).drain(..) {
                let _ = s.shutdown(Shutdown::Both);
            }
            for w in std::mem::take(&mut *lock(&p.workers)) {
                let _ = w.join();
            }
        }
    }
}

fn accept_loop(listener: TcpListener, peer: Arc<PeerShared>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                if !peer.accepting.load(Ordering::SeqCst) {
                    let _ = stream.shutdown(Shutdown::Both);
                    continue;
                }
                let p = Arc::clone(&peer);
                let handle = thread::spawn(move || serve(p, stream));
                let mut workers = lock(&peer.workers);
                workers.retain(|w| !w.is_finished());
                workers.push(handle);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("loopback accept on {}: {e}", peer.addr);
                break;
            }
        }
    }
}

fn serve(peer: Arc<PeerShared>, mut stream: TcpStream) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    if let Ok(clone) = stream.try_clone() {
        lock(&peer.streams).push(clone);
    }
    let mut info = VersionInfo::listener((now_ms() / 1000) as i64, rand::random());
    info.user_agent = "/blocksonar-sim-peer/".into();
    info.addr_from = NetAddress::from_socket(peer.addr, 1);
    if wire::handshake(&mut stream, peer.magic, &info, Duration::from_secs(5)).is_err() {
        let _ = stream.shutdown(Shutdown::Both);
        return;
    }
    lock(&peer.received).extend(["version".to_string(), "verack".to_string()]);
    let id = peer.next_session.fetch_add(1, Ordering::SeqCst) as u64;
    match stream.try_clone() {
        Ok(w) => *lock(&peer.session) = Some((id, w)),
        Err(_) => return,
    }
    peer.handshakes.fetch_add(1, Ordering::SeqCst);

    while let Ok(msg) = wire::read_message(&mut stream, peer.magic, wire::DEFAULT_MAX_PAYLOAD) {
        lock(&peer.received).push(msg.command().to_string());
        let reply = match msg {
            Message::GetAddr => Message::Addr(
                peer.neighbors
                    .iter()
                    .map(|a| AddrEntry {
                        last_seen: (now_ms() / 1000) as u32,
                        addr: NetAddress::from_socket(*a, 1),
                    })
                    .collect(),
            ),
            Message::Ping(n) => Message::Pong(n),
            _ => continue,
        };
        peer.send(&reply);
    }
    let mut session = lock(&peer.session);
    if session.as_ref().is_some_and(|(sid, _)| *sid == id) {
        *session = None;
    }
}

/// Runs the simulation in process, then replays the monitor's deliveries
/// over loopback sockets to a real crawler. Log timestamps are mapped back
/// to simulated time.
pub fn run_loopback(config: &SimConfig) -> Result<SimOutput> {
    let mut out = run_in_process(&SimConfig {
        monitor_mode: MonitorMode::InProcess,
        ..config.clone()
    })?;
    let net = LoopbackNetwork::start(&out.graph.adjacency, Magic::SIMNET)?;
    let addrs = net.addresses();
    let n = addrs.len();

    let index: HashMap<String, usize> = out.audit.peers.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
    let mut schedule: Vec<Vec<(u64, Vec<InvVector>)>> = vec![Vec::new(); n];
    let mut deliveries = out.audit.deliveries.clone();
    deliveries.sort_by_key(|d| d.ts_ms);
    for d in &deliveries {
        let i = index[&d.peer];
        let v = match d.kind {
            ObjectKind::Tx => InvVector::tx(d.hash),
            ObjectKind::Block => InvVector::block(d.hash),
        };
        match schedule[i].last_mut() {
            Some((t, vs)) if *t == d.ts_ms && vs.len() < wire::MAX_INV_VECTORS => vs.push(v),
            _ => schedule[i].push((d.ts_ms, vec![v])),
        }
    }

    let (tx, rx) = mpsc::channel();
    let crawler = crawler::bootstrap(
        CrawlerConfig {
            seeds: vec![addrs[0]],
            magic: Magic::SIMNET,
            tick_ms: 10,
            handshake_timeout_ms: 5_000,
            ..CrawlerConfig::default()
        },
        tx,
    )
    .map_err(|e| SimError::Loopback(e.to_string()))?;
    let deadline = Instant::now() + Duration::from_secs(30);
    while net.connected() < n || crawler.established() < n {
        if Instant::now() > deadline {
            let (c, e) = (net.connected(), crawler.established());
            crawler.shutdown();
            net.shutdown();
            return Err(SimError::Loopback(format!("only {c}/{n} peers connected ({e} established)")));
        }
        thread::sleep(Duration::from_millis(10));
    }

    let start_ms = net.replay(schedule, config.time_scale);
    thread::sleep(Duration::from_millis(300));
    crawler.shutdown();
    let sent = net.received_commands();
    net.shutdown();

    let scale = config.time_scale;
    let events: Vec<InvEvent> = rx
        .try_iter()
        .map(|mut e| {
            e.ts_ms = (e.ts_ms.saturating_sub(start_ms) as f64 / scale).round() as u64;
            e
        })
        .collect();
    let names: Vec<String> = addrs.iter().map(SocketAddr::to_string).collect();
    for d in &mut out.audit.deliveries {
        d.peer = names[index[&d.peer]].clone();
    }
    out.audit.peers = names;
    out.audit.mode = MonitorMode::LoopbackSockets;
    out.audit.monitor_sent = sent;
    out.log = EventLog::from_events(events);
    Ok(out)
}
