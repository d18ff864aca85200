//! Append-only store of inventory observations.
//!
//! On disk the log is CSV with the header `ts_ms,peer,kind,hash`, one event
//! per LF-terminated line and no quoting. Writers only ever append; readers
//! load a closed log into an [`EventLog`], which keeps the events sorted by
//! `(ts, peer, hash)` and indexes them by hash.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::types::{Hash32, ObjectKind};

pub const HEADER: &str = "ts_ms,peer,kind,hash";

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("storage full while writing {0}")]
    StorageFull(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("hash {0} never observed")]
    UnknownHash(Hash32),
}

pub type Result<T> = std::result::Result<T, EventLogError>;

/// One received inventory vector: when, from whom, and what.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InvEvent {
    pub ts_ms: u64,
    pub peer: String,
    pub kind: ObjectKind,
    pub hash: Hash32,
}

impl InvEvent {
    pub fn new(ts_ms: u64, peer: impl Into<String>, kind: ObjectKind, hash: Hash32) -> Self {
        InvEvent {
            ts_ms,
            peer: peer.into(),
            kind,
            hash,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.peer.is_empty() || self.peer.contains([',', '\n', '\r']) {
            return Err(EventLogError::InvalidEvent(format!(
                "peer {:?} must be non-empty and free of commas and newlines",
                self.peer
            )));
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.ts_ms, self.peer, self.kind, self.hash)
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let mut fields = line.split(',');
        let (Some(ts), Some(peer), Some(kind), Some(hash), None) = (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) else {
            return Err("expected 4 fields".into());
        };
        let ts_ms = ts.parse().map_err(|_| format!("bad ts_ms {ts:?}"))?;
        if peer.is_empty() {
            return Err("empty peer".into());
        }
        let kind = kind.parse()?;
        let hash = Hash32::from_hex(hash).map_err(|e| e.to_string())?;
        Ok(InvEvent::new(ts_ms, peer, kind, hash))
    }
}

fn map_write_err(path: &Path, e: io::Error) -> EventLogError {
    if e.kind() == io::ErrorKind::StorageFull {
        EventLogError::StorageFull(path.to_path_buf())
    } else {
        EventLogError::Io(e)
    }
}

/// Single writer over a log file.
pub struct EventLogWriter {
    out: BufWriter<File>,
    path: PathBuf,
    appended: u64,
}

impl EventLogWriter {
    /// Creates (or truncates) the file and writes the header.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{HEADER}").map_err(|e| map_write_err(&path, e))?;
        Ok(EventLogWriter {
            out,
            path,
            appended: 0,
        })
    }

    /// Reopens an existing log for appending, creating it if absent.
    /// A torn final line left by a crash is cut off first.
    pub fn open_append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        let mut content = Vec::new();
        file.read_to_end(&mut content)?;
        if content.is_empty() {
            let mut out = BufWriter::new(file);
            writeln!(out, "{HEADER}").map_err(|e| map_write_err(&path, e))?;
            return Ok(EventLogWriter {
                out,
                path,
                appended: 0,
            });
        }
        if !content.starts_with(HEADER.as_bytes()) {
            return Err(EventLogError::Parse {
                path: path.display().to_string(),
                line: 1,
                reason: "missing header".into(),
            });
        }
        let keep = content
            .iter()
            .rposition(|&b| b == b'\n')
            .map_or(0, |i| i + 1);
        if keep < content.len() {
            log::warn!(
                "{}: dropping {} bytes of torn final line",
                path.display(),
                content.len() - keep
            );
            file.set_len(keep as u64)?;
        }
        file.seek(SeekFrom::End(0))?;
        let mut out = BufWriter::new(file);
        if keep == 0 {
            writeln!(out, "{HEADER}").map_err(|e| map_write_err(&path, e))?;
        }
        Ok(EventLogWriter {
            out,
            path,
            appended: 0,
        })
    }

    pub fn append(&mut self, event: &InvEvent) -> Result<()> {
        event.validate()?;
        writeln!(self.out, "{}", event.to_line()).map_err(|e| map_write_err(&self.path, e))?;
        self.appended += 1;
        Ok(())
    }

    /// Everything appended before this call survives a process crash.
    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| map_write_err(&self.path, e))
    }

    pub fn appended(&self) -> u64 {
        self.appended
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Flushes and fsyncs, returning the number of events appended.
    pub fn close(mut self) -> Result<u64> {
        self.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.appended)
    }
}

/// Funnels events from any number of producers into one writer thread.
///
/// Per-sender order is preserved. The thread flushes at least every
/// `flush_every` and closes the log once every sender is dropped.
pub fn spawn_writer(
    mut writer: EventLogWriter,
    flush_every: Duration,
) -> (mpsc::Sender<InvEvent>, thread::JoinHandle<Result<u64>>) {
    let (tx, rx) = mpsc::channel::<InvEvent>();
    let handle = thread::Builder::new()
        .name("eventlog-writer".into())
        .spawn(move || {
            loop {
                match rx.recv_timeout(flush_every) {
                    Ok(event) => writer.append(&event)?,
                    Err(mpsc::RecvTimeoutError::Timeout) => writer.flush()?,
                    Err(mpsc::RecvTimeoutError::Disconnected) => break,
                }
            }
            writer.close()
        })
        .expect("spawn writer thread");
    (tx, handle)
}

/// Earliest sighting of a hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirstObservation {
    pub hash: Hash32,
    pub kind: ObjectKind,
    pub first_ts_ms: u64,
    pub first_peer: String,
}

#[derive(Clone, Debug)]
struct HashIndex {
    first: FirstObservation,
    /// Positions in the sorted event vector.
    positions: Vec<usize>,
}

/// A closed, indexed log.
#[derive(Clone, Debug)]
pub struct EventLog {
    events: Vec<InvEvent>,
    index: HashMap<Hash32, HashIndex>,
}

impl EventLog {
    pub fn from_events(mut events: Vec<InvEvent>) -> Self {
        events.sort_by(|a, b| {
            (a.ts_ms, &a.peer, a.hash, a.kind).cmp(&(b.ts_ms, &b.peer, b.hash, b.kind))
        });
        let mut index: HashMap<Hash32, HashIndex> = HashMap::new();
        for (pos, ev) in events.iter().enumerate() {
            // Sorted order makes the first occurrence the minimum (ts, peer).
            index
                .entry(ev.hash)
                .or_insert_with(|| HashIndex {
                    first: FirstObservation {
                        hash: ev.hash,
                        kind: ev.kind,
                        first_ts_ms: ev.ts_ms,
                        first_peer: ev.peer.clone(),
                    },
                    positions: Vec::new(),
                })
                .positions
                .push(pos);
        }
        EventLog { events, index }
    }

    /// Loads a log file. A final line without its terminating newline is
    /// treated as a torn write and dropped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let mut reader = BufReader::new(File::open(path)?);
        let mut events = Vec::new();
        let mut line = String::new();
        let mut lineno = 0usize;
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            lineno += 1;
            let Some(body) = line.strip_suffix('\n') else {
                log::warn!("{name}:{lineno}: ignoring torn final line");
                break;
            };
            if lineno == 1 {
                if body != HEADER {
                    return Err(EventLogError::Parse {
                        path: name,
                        line: 1,
                        reason: format!("expected header {HEADER:?}"),
                    });
                }
                continue;
            }
            let event = InvEvent::parse_line(body).map_err(|reason| EventLogError::Parse {
                path: name.clone(),
                line: lineno,
                reason,
            })?;
            events.push(event);
        }
        Ok(EventLog::from_events(events))
    }

    /// Writes the whole log in sorted order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = EventLogWriter::create(path)?;
        for ev in &self.events {
            writer.append(ev)?;
        }
        writer.close()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[InvEvent] {
        &self.events
    }

    /// `(min ts, max ts)` over all events.
    pub fn span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.ts_ms, self.events.last()?.ts_ms))
    }

    /// Events with `t0 <= ts < t1`, ordered by `(ts, peer, hash)`.
    pub fn iterate(
        &self,
        range: Range<u64>,
        kind: Option<ObjectKind>,
    ) -> impl Iterator<Item = &InvEvent> + '_ {
        let start = self.events.partition_point(|e| e.ts_ms < range.start);
        let end = self.events.partition_point(|e| e.ts_ms < range.end).max(start);
        self.events[start..end]
            .iter()
            .filter(move |e| kind.is_none_or(|k| e.kind == k))
    }

    pub fn first_observation(&self, hash: &Hash32) -> Option<&FirstObservation> {
        self.index.get(hash).map(|i| &i.first)
    }

    pub fn first_seen_ms(&self, hash: &Hash32) -> Option<u64> {
        self.first_observation(hash).map(|f| f.first_ts_ms)
    }

    /// Every distinct hash of the given kind with its first observation,
    /// in hash order.
    pub fn first_observations(&self, kind: ObjectKind) -> Vec<&FirstObservation> {
        let mut out: Vec<_> = self
            .index
            .values()
            .map(|i| &i.first)
            .filter(|f| f.kind == kind)
            .collect();
        out.sort_by_key(|f| f.hash);
        out
    }

    /// Whether any event of `kind` carries this hash.
    pub fn has_kind(&self, hash: &Hash32, kind: ObjectKind) -> bool {
        self.events_for(hash).any(|e| e.kind == kind)
    }

    pub fn events_for<'a>(&'a self, hash: &Hash32) -> impl Iterator<Item = &'a InvEvent> + 'a {
        self.index
            .get(hash)
            .into_iter()
            .flat_map(move |i| i.positions.iter().map(move |&p| &self.events[p]))
    }

    /// Cumulative number of distinct peers that announced `hash`, as a step
    /// series over events with `ts <= until_ts`.
    pub fn reach_count_series(&self, hash: &Hash32, until_ts: u64) -> Result<Vec<(u64, usize)>> {
        if !self.index.contains_key(hash) {
            return Err(EventLogError::UnknownHash(*hash));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        let mut series: Vec<(u64, usize)> = Vec::new();
        for ev in self.events_for(hash).take_while(|e| e.ts_ms <= until_ts) {
            if !seen.insert(ev.peer.as_str()) {
                continue;
            }
            match series.last_mut() {
                Some(last) if last.0 == ev.ts_ms => last.1 = seen.len(),
                _ => series.push((ev.ts_ms, seen.len())),
            }
        }
        Ok(series)
    }

    /// Distinct peers that announced anything with `t0 <= ts < t1`.
    pub fn active_peers(&self, range: Range<u64>) -> usize {
        self.iterate(range, None)
            .map(|e| e.peer.as_str())
            .collect::<HashSet<_>>()
            .len()
    }
}
