//! Ground-truth ledger: which blocks exist, which are on the main chain, and
//! where every transaction ended up.
//!
//! The ledger file is JSON Lines. Most lines describe a block:
//!
//! ```text
//! {"hash":…,"height":…,"prev":…,"time_ms":…,"pow_valid":…,"main_chain":…,"txs":[{"txid":…,"value_sats":…,"fee_sats":…,"locktime_set":…,"is_coinbase":…},…]}
//! ```
//!
//! Transactions that never made it into any block are listed on lines of
//! their own, with an extra `valid` flag:
//!
//! ```text
//! {"txid":…,"value_sats":…,"fee_sats":…,"locktime_set":…,"is_coinbase":false,"valid":…}
//! ```
//!
//! Validity is declarative. Nothing here re-checks proof of work or scripts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::EventLog;
use crate::types::Hash32;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("ledger line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("inconsistent chain: {0}")]
    InconsistentChain(String),
    #[error("timestamp {0} precedes the first main-chain block")]
    OutOfRange(u64),
}

pub type Result<T> = std::result::Result<T, ChainError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTx {
    pub txid: Hash32,
    pub value_sats: u64,
    pub fee_sats: u64,
    pub locktime_set: bool,
    pub is_coinbase: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerBlock {
    pub hash: Hash32,
    pub height: u64,
    pub prev: Hash32,
    pub time_ms: u64,
    pub pow_valid: bool,
    pub main_chain: bool,
    pub txs: Vec<LedgerTx>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LooseTx {
    pub txid: Hash32,
    pub value_sats: u64,
    pub fee_sats: u64,
    pub locktime_set: bool,
    pub is_coinbase: bool,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LedgerLine {
    Block(LedgerBlock),
    Tx(LooseTx),
}

pub fn write_ledger(path: impl AsRef<Path>, lines: &[LedgerLine]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRecord {
    pub hash: Hash32,
    pub height: u64,
    pub prev: Hash32,
    pub time_ms: u64,
    pub pow_valid: bool,
    pub main_chain: bool,
    pub txids: Vec<Hash32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxRecord {
    pub txid: Hash32,
    pub value_sats: u64,
    pub fee_sats: u64,
    pub locktime_set: bool,
    pub is_coinbase: bool,
    pub valid: bool,
    /// Main-chain block containing the transaction.
    pub included_in: Option<Hash32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inclusion {
    pub block: Hash32,
    pub height: u64,
    pub time_ms: u64,
}

/// Immutable, indexed ledger.
#[derive(Debug, Default)]
pub struct ChainView {
    blocks: HashMap<Hash32, BlockRecord>,
    /// Main-chain hashes indexed by `height - base_height`.
    main: Vec<Hash32>,
    base_height: u64,
    txs: HashMap<Hash32, TxRecord>,
}

impl ChainView {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LedgerLine = serde_json::from_str(&line).map_err(|e| ChainError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            lines.push(parsed);
        }
        ChainView::from_lines(lines)
    }

    pub fn from_lines(lines: impl IntoIterator<Item = LedgerLine>) -> Result<Self> {
        let mut blocks: HashMap<Hash32, BlockRecord> = HashMap::new();
        let mut txs: HashMap<Hash32, TxRecord> = HashMap::new();
        let mut loose = Vec::new();

        for line in lines {
            let block = match line {
                LedgerLine::Block(b) => b,
                LedgerLine::Tx(t) => {
                    loose.push(t);
                    continue;
                }
            };
            if block.main_chain && !block.pow_valid {
                return Err(inconsistent(format!(
                    "block {} is on the main chain without valid proof of work",
                    block.hash
                )));
            }
            for tx in &block.txs {
                if tx.is_coinbase && tx.fee_sats != 0 {
                    return Err(inconsistent(format!("coinbase {} carries a fee", tx.txid)));
                }
                let rec = txs.entry(tx.txid).or_insert_with(|| TxRecord {
                    txid: tx.txid,
                    value_sats: tx.value_sats,
                    fee_sats: tx.fee_sats,
                    locktime_set: tx.locktime_set,
                    is_coinbase: tx.is_coinbase,
                    valid: true,
                    included_in: None,
                });
                if block.main_chain {
                    if let Some(prev) = rec.included_in {
                        return Err(inconsistent(format!(
                            "tx {} included in both {} and {}",
                            tx.txid, prev, block.hash
                        )));
                    }
                    rec.included_in = Some(block.hash);
                }
            }
            let record = BlockRecord {
                hash: block.hash,
                height: block.height,
                prev: block.prev,
                time_ms: block.time_ms,
                pow_valid: block.pow_valid,
                main_chain: block.main_chain,
                txids: block.txs.iter().map(|t| t.txid).collect(),
            };
            if blocks.insert(block.hash, record).is_some() {
                return Err(inconsistent(format!("duplicate block {}", block.hash)));
            }
        }

        for t in loose {
            if t.is_coinbase {
                return Err(inconsistent(format!("coinbase {} outside any block", t.txid)));
            }
            if txs.contains_key(&t.txid) {
                return Err(inconsistent(format!("tx {} listed twice", t.txid)));
            }
            txs.insert(
                t.txid,
                TxRecord {
                    txid: t.txid,
                    value_sats: t.value_sats,
                    fee_sats: t.fee_sats,
                    locktime_set: t.locktime_set,
                    is_coinbase: false,
                    valid: t.valid,
                    included_in: None,
                },
            );
        }

        let mut main: Vec<&BlockRecord> = blocks.values().filter(|b| b.main_chain).collect();
        main.sort_by_key(|b| b.height);
        let base_height = main.first().map_or(0, |b| b.height);
        for (i, pair) in main.windows(2).enumerate() {
            let (lower, upper) = (pair[0], pair[1]);
            if upper.height == lower.height {
                return Err(inconsistent(format!(
                    "two main-chain blocks at height {}",
                    upper.height
                )));
            }
            if upper.height != base_height + i as u64 + 1 {
                return Err(inconsistent(format!(
                    "main-chain height gap between {} and {}",
                    lower.height, upper.height
                )));
            }
            if upper.prev != lower.hash {
                return Err(inconsistent(format!(
                    "block {} at height {} does not link to {}",
                    upper.hash, upper.height, lower.hash
                )));
            }
        }
        let main = main.iter().map(|b| b.hash).collect();

        Ok(ChainView {
            blocks,
            main,
            base_height,
            txs,
        })
    }

    pub fn block(&self, hash: &Hash32) -> Option<&BlockRecord> {
        self.blocks.get(hash)
    }

    pub fn tx(&self, txid: &Hash32) -> Option<&TxRecord> {
        self.txs.get(txid)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockRecord> {
        self.blocks.values()
    }

    pub fn txs(&self) -> impl Iterator<Item = &TxRecord> {
        self.txs.values()
    }

    pub fn tip_height(&self) -> Option<u64> {
        (!self.main.is_empty()).then(|| self.base_height + self.main.len() as u64 - 1)
    }

    pub fn base_height(&self) -> u64 {
        self.base_height
    }

    pub fn main_block_at(&self, height: u64) -> Option<&BlockRecord> {
        let idx = usize::try_from(height.checked_sub(self.base_height)?).ok()?;
        self.main.get(idx).and_then(|h| self.blocks.get(h))
    }

    /// Main-chain blocks in height order.
    pub fn main_chain(&self) -> impl Iterator<Item = &BlockRecord> {
        self.main.iter().map(|h| &self.blocks[h])
    }

    /// Where the transaction landed on the main chain, if anywhere.
    pub fn inclusion(&self, txid: &Hash32) -> Option<Inclusion> {
        let block = self.blocks.get(&self.txs.get(txid)?.included_in?)?;
        Some(Inclusion {
            block: block.hash,
            height: block.height,
            time_ms: block.time_ms,
        })
    }

    /// Builds the observation clock, preferring first network sightings from
    /// `log` and falling back to block timestamps.
    pub fn clock(&self, log: Option<&EventLog>) -> ObservationClock {
        let seen_of = |b: &BlockRecord| {
            log.and_then(|l| l.first_seen_ms(&b.hash))
                .unwrap_or(b.time_ms)
        };
        let seen: HashMap<Hash32, u64> = self.blocks.values().map(|b| (b.hash, seen_of(b))).collect();

        let main_seen: Vec<u64> = self.main.iter().map(|h| seen[h]).collect();
        // suffix minimum: earliest sighting of any main block at or above index i
        let mut suffix_min = vec![u64::MAX; main_seen.len() + 1];
        for i in (0..main_seen.len()).rev() {
            suffix_min[i] = suffix_min[i + 1].min(main_seen[i]);
        }

        let mut by_time: Vec<(u64, u64)> = main_seen
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.base_height + i as u64))
            .collect();
        by_time.sort_unstable();
        let mut steps: Vec<(u64, u64)> = Vec::with_capacity(by_time.len());
        for (t, height) in by_time {
            let best = steps.last().map_or(height, |&(_, h)| h.max(height));
            match steps.last_mut() {
                Some(last) if last.0 == t => last.1 = best,
                _ => steps.push((t, best)),
            }
        }

        ObservationClock {
            seen,
            suffix_min,
            base_height: self.base_height,
            steps,
        }
    }
}

fn inconsistent(msg: String) -> ChainError {
    ChainError::InconsistentChain(msg)
}

/// When each block became known, and what the tip was at any instant.
#[derive(Debug, Clone)]
pub struct ObservationClock {
    seen: HashMap<Hash32, u64>,
    suffix_min: Vec<u64>,
    base_height: u64,
    /// `(time, tip height)` steps; heights nondecreasing.
    steps: Vec<(u64, u64)>,
}

impl ObservationClock {
    /// First sighting of a block, or its timestamp if never sighted.
    pub fn block_seen_ms(&self, hash: &Hash32) -> Option<u64> {
        self.seen.get(hash).copied()
    }

    /// Earliest sighting of any main-chain block strictly above `height`.
    pub fn next_higher_seen_ms(&self, height: u64) -> Option<u64> {
        let idx = usize::try_from((height + 1).saturating_sub(self.base_height)).ok()?;
        let t = *self.suffix_min.get(idx)?;
        (t != u64::MAX).then_some(t)
    }

    /// Height of the highest main-chain block seen at or before `ts_ms`.
    pub fn tip_height_at(&self, ts_ms: u64) -> Result<u64> {
        let n = self.steps.partition_point(|&(t, _)| t <= ts_ms);
        if n == 0 {
            return Err(ChainError::OutOfRange(ts_ms));
        }
        Ok(self.steps[n - 1].1)
    }
}
