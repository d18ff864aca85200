//! Block and transaction taxonomy.
//!
//! Blocks are Mined-During-Listening (MDLB), Echo (EB), Fork (FB) or Invalid
//! (IB). Transactions are Blockchain (BT), Echo (ET), Invalid (IT), or
//! UNCONFIRMED when valid but not included by the analysis horizon.
//!
//! "Next block discovered" means the first network sighting of any
//! main-chain block of greater height. Block timestamps only stand in for
//! blocks that were never announced to the listener.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainview::{ChainView, ObservationClock};
use crate::eventlog::EventLog;
use crate::types::{Hash32, ObjectKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClassifyError {
    #[error("{0} has no matching events in the log")]
    UnknownHash(Hash32),
    #[error("{0} is not in the ledger")]
    UnknownToChain(Hash32),
    #[error("listening window must satisfy start < end (got {start}..{end})")]
    EmptyWindow { start: u64, end: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListeningWindow {
    pub start_ms: u64,
    pub end_ms: u64,
}

impl ListeningWindow {
    pub fn new(start_ms: u64, end_ms: u64) -> Result<Self, ClassifyError> {
        if start_ms >= end_ms {
            return Err(ClassifyError::EmptyWindow {
                start: start_ms,
                end: end_ms,
            });
        }
        Ok(ListeningWindow { start_ms, end_ms })
    }

    /// Window covering every event of the log.
    pub fn covering(log: &EventLog) -> Option<Self> {
        let (lo, hi) = log.span()?;
        Some(ListeningWindow {
            start_ms: lo,
            end_ms: hi + 1,
        })
    }

    pub fn contains(&self, ts_ms: u64) -> bool {
        (self.start_ms..self.end_ms).contains(&ts_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockClass {
    Mdlb,
    Eb,
    Fb,
    Ib,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TxClass {
    Bt,
    Et,
    It,
    Unconfirmed,
}

/// Outcome recorded for one observed hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Block(BlockClass),
    Tx(TxClass),
    UnknownHash,
    UnknownToChain,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Block(BlockClass::Mdlb) => "MDLB",
            Label::Block(BlockClass::Eb) => "EB",
            Label::Block(BlockClass::Fb) => "FB",
            Label::Block(BlockClass::Ib) => "IB",
            Label::Tx(TxClass::Bt) => "BT",
            Label::Tx(TxClass::Et) => "ET",
            Label::Tx(TxClass::It) => "IT",
            Label::Tx(TxClass::Unconfirmed) => "UNCONFIRMED",
            Label::UnknownHash => "error:unknown_hash",
            Label::UnknownToChain => "error:unknown_to_chain",
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, Label::UnknownHash | Label::UnknownToChain)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "MDLB" => Label::Block(BlockClass::Mdlb),
            "EB" => Label::Block(BlockClass::Eb),
            "FB" => Label::Block(BlockClass::Fb),
            "IB" => Label::Block(BlockClass::Ib),
            "BT" => Label::Tx(TxClass::Bt),
            "ET" => Label::Tx(TxClass::Et),
            "IT" => Label::Tx(TxClass::It),
            "UNCONFIRMED" => Label::Tx(TxClass::Unconfirmed),
            "error:unknown_hash" => Label::UnknownHash,
            "error:unknown_to_chain" => Label::UnknownToChain,
            other => return Err(format!("unknown class {other:?}")),
        })
    }
}

impl From<Result<BlockClass, ClassifyError>> for Label {
    fn from(r: Result<BlockClass, ClassifyError>) -> Self {
        match r {
            Ok(c) => Label::Block(c),
            Err(ClassifyError::UnknownToChain(_)) => Label::UnknownToChain,
            Err(_) => Label::UnknownHash,
        }
    }
}

impl From<Result<TxClass, ClassifyError>> for Label {
    fn from(r: Result<TxClass, ClassifyError>) -> Self {
        match r {
            Ok(c) => Label::Tx(c),
            Err(ClassifyError::UnknownToChain(_)) => Label::UnknownToChain,
            Err(_) => Label::UnknownHash,
        }
    }
}

/// One row of `classification.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRow {
    pub hash: Hash32,
    pub kind: ObjectKind,
    #[serde(with = "label_serde")]
    pub class: Label,
    pub first_ts_ms: u64,
    pub first_peer: String,
}

mod label_serde {
    use super::Label;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(label: &Label, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(label.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Label, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Labels for every observed hash.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Classification {
    pub rows: BTreeMap<Hash32, ClassRow>,
}

impl Classification {
    pub fn label(&self, hash: &Hash32) -> Option<Label> {
        self.rows.get(hash).map(|r| r.class)
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &ClassRow> {
        self.rows.values().filter(move |r| r.class == label)
    }

    pub fn counts(&self) -> BTreeMap<Label, usize> {
        let mut out = BTreeMap::new();
        for row in self.rows.values() {
            *out.entry(row.class).or_insert(0) += 1;
        }
        out
    }

    /// Rows ordered by first sighting, then hash.
    pub fn ordered_rows(&self) -> Vec<&ClassRow> {
        let mut rows: Vec<_> = self.rows.values().collect();
        rows.sort_by(|a, b| (a.first_ts_ms, a.hash).cmp(&(b.first_ts_ms, b.hash)));
        rows
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        // header is emitted even when there are no rows
        w.write_record(["hash", "kind", "class", "first_ts_ms", "first_peer"])?;
        for row in self.ordered_rows() {
            w.write_record([
                row.hash.to_hex(),
                row.kind.to_string(),
                row.class.to_string(),
                row.first_ts_ms.to_string(),
                row.first_peer.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> csv::Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = BTreeMap::new();
        for row in r.deserialize() {
            let row: ClassRow = row?;
            rows.insert(row.hash, row);
        }
        Ok(Classification { rows })
    }
}

/// Labels hashes against a ledger and a closed log.
pub struct Classifier<'a> {
    chain: &'a ChainView,
    log: &'a EventLog,
    window: ListeningWindow,
    horizon_ms: Option<u64>,
    clock: ObservationClock,
}

impl<'a> Classifier<'a> {
    /// `horizon_ms` bounds what counts as included: a block first seen
    /// after it leaves its transactions UNCONFIRMED. `None` means no bound.
    pub fn new(
        chain: &'a ChainView,
        log: &'a EventLog,
        window: ListeningWindow,
        horizon_ms: Option<u64>,
    ) -> Self {
        Classifier {
            chain,
            log,
            window,
            horizon_ms,
            clock: chain.clock(Some(log)),
        }
    }

    pub fn clock(&self) -> &ObservationClock {
        &self.clock
    }

    pub fn window(&self) -> ListeningWindow {
        self.window
    }

    pub fn classify_block(&self, hash: &Hash32) -> Result<BlockClass, ClassifyError> {
        if !self.log.has_kind(hash, ObjectKind::Block) {
            return Err(ClassifyError::UnknownHash(*hash));
        }
        let block = self
            .chain
            .block(hash)
            .ok_or(ClassifyError::UnknownToChain(*hash))?;
        if !block.pow_valid {
            return Ok(BlockClass::Ib);
        }
        if !block.main_chain {
            return Ok(BlockClass::Fb);
        }
        let first = self.log.first_seen_ms(hash).expect("has events");
        let before_successor = self
            .clock
            .next_higher_seen_ms(block.height)
            .is_none_or(|next| first < next);
        if self.window.contains(first) && before_successor {
            Ok(BlockClass::Mdlb)
        } else {
            Ok(BlockClass::Eb)
        }
    }

    pub fn classify_tx(&self, txid: &Hash32) -> Result<TxClass, ClassifyError> {
        if !self.log.has_kind(txid, ObjectKind::Tx) {
            return Err(ClassifyError::UnknownHash(*txid));
        }
        // Absent from the ledger altogether: nobody ever accepted it.
        let Some(tx) = self.chain.tx(txid) else {
            return Ok(TxClass::It);
        };
        if !tx.valid {
            return Ok(TxClass::It);
        }
        let included_seen = self
            .chain
            .inclusion(txid)
            .and_then(|inc| self.clock.block_seen_ms(&inc.block))
            .filter(|&seen| self.horizon_ms.is_none_or(|h| seen <= h));
        let Some(block_seen) = included_seen else {
            return Ok(TxClass::Unconfirmed);
        };
        let first = self.log.first_seen_ms(txid).expect("has events");
        Ok(if first < block_seen {
            TxClass::Bt
        } else {
            TxClass::Et
        })
    }

    /// Labels every hash in the log.
    pub fn classify_all(&self) -> Classification {
        let mut rows = BTreeMap::new();
        for kind in [ObjectKind::Block, ObjectKind::Tx] {
            for first in self.log.first_observations(kind) {
                let class = match kind {
                    ObjectKind::Block => self.classify_block(&first.hash).into(),
                    ObjectKind::Tx => self.classify_tx(&first.hash).into(),
                };
                rows.insert(
                    first.hash,
                    ClassRow {
                        hash: first.hash,
                        kind,
                        class,
                        first_ts_ms: first.first_ts_ms,
                        first_peer: first.first_peer.clone(),
                    },
                );
            }
        }
        Classification { rows }
    }

    pub fn analysis_set(&self, labels: &Classification) -> AnalysisSet {
        analysis_set(labels, self.chain, &self.clock, self.window)
    }
}

/// Why transactions were left out of the delay analysis.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub echo: usize,
    pub invalid: usize,
    pub unclassified: usize,
    pub coinbase: usize,
    pub locktime: usize,
    pub outside_window: usize,
    pub boundary_interval: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnalysisSet {
    pub txids: BTreeSet<Hash32>,
    pub excluded: ExclusionCounts,
}

impl AnalysisSet {
    pub fn len(&self) -> usize {
        self.txids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txids.is_empty()
    }

    pub fn contains(&self, txid: &Hash32) -> bool {
        self.txids.contains(txid)
    }
}

/// The interval during which an MDLB was being mined: from the sighting of
/// its parent up to its own sighting. A parent that is not itself an MDLB was
/// mined before listening began, so the interval is then open below.
fn mining_interval(
    chain: &ChainView,
    clock: &ObservationClock,
    mdlb: &BTreeSet<Hash32>,
    hash: &Hash32,
) -> Option<std::ops::Range<u64>> {
    let block = chain.block(hash)?;
    let end = clock.block_seen_ms(hash)?;
    let start = block
        .height
        .checked_sub(1)
        .and_then(|h| chain.main_block_at(h))
        .filter(|parent| mdlb.contains(&parent.hash))
        .and_then(|parent| clock.block_seen_ms(&parent.hash))
        .unwrap_or(0);
    Some(start..end)
}

/// BT and UNCONFIRMED transactions first seen inside the window, minus
/// coinbase and locktime transactions and those first seen while the
/// window's first or last MDLB was being mined. Each exclusion is counted
/// under the first rule that applies.
pub fn analysis_set(
    labels: &Classification,
    chain: &ChainView,
    clock: &ObservationClock,
    window: ListeningWindow,
) -> AnalysisSet {
    let mut mdlb: Vec<(u64, Hash32)> = labels
        .with_label(Label::Block(BlockClass::Mdlb))
        .filter_map(|r| chain.block(&r.hash).map(|b| (b.height, b.hash)))
        .collect();
    mdlb.sort_unstable();
    let mdlb_set: BTreeSet<Hash32> = mdlb.iter().map(|&(_, h)| h).collect();
    let boundaries: Vec<std::ops::Range<u64>> = [mdlb.first(), mdlb.last()]
        .into_iter()
        .flatten()
        .filter_map(|(_, h)| mining_interval(chain, clock, &mdlb_set, h))
        .collect();

    let mut out = AnalysisSet::default();
    for row in labels.rows.values().filter(|r| r.kind == ObjectKind::Tx) {
        match row.class {
            Label::Tx(TxClass::Bt) | Label::Tx(TxClass::Unconfirmed) => {}
            Label::Tx(TxClass::Et) => {
                out.excluded.echo += 1;
                continue;
            }
            Label::Tx(TxClass::It) => {
                out.excluded.invalid += 1;
                continue;
            }
            _ => {
                out.excluded.unclassified += 1;
                continue;
            }
        }
        let Some(tx) = chain.tx(&row.hash) else {
            out.excluded.unclassified += 1;
            continue;
        };
        if tx.is_coinbase {
            out.excluded.coinbase += 1;
        } else if tx.locktime_set {
            out.excluded.locktime += 1;
        } else if !window.contains(row.first_ts_ms) {
            out.excluded.outside_window += 1;
        } else if boundaries.iter().any(|b| b.contains(&row.first_ts_ms)) {
            out.excluded.boundary_interval += 1;
        } else {
            out.txids.insert(row.hash);
        }
    }
    out
}
