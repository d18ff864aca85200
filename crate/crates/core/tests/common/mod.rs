//! Brute-force re-derivations used as oracles: plain scans over raw ledger
//! lines and events, no indexes.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use blocksonar::chainview::{LedgerBlock, LedgerLine, LedgerTx};
use blocksonar::classify::{BlockClass, Label, ListeningWindow, TxClass};
use blocksonar::eventlog::InvEvent;
use blocksonar::{Hash32, ObjectKind};

/// Labels straight from the definitions, by brute force over the raw
/// ledger lines and events.
pub fn oracle_labels(lines: &[LedgerLine], events: &[InvEvent], window: ListeningWindow) -> HashMap<Hash32, Label> {
    let mut first: HashMap<(Hash32, ObjectKind), u64> = HashMap::new();
    for e in events {
        let t = first.entry((e.hash, e.kind)).or_insert(e.ts_ms);
        *t = (*t).min(e.ts_ms);
    }
    let blocks: Vec<_> = lines
        .iter()
        .filter_map(|l| match l {
            LedgerLine::Block(b) => Some(b),
            LedgerLine::Tx(_) => None,
        })
        .collect();
    let seen = |b: &blocksonar::chainview::LedgerBlock| {
        first.get(&(b.hash, ObjectKind::Block)).copied().unwrap_or(b.time_ms)
    };
    let mut out = HashMap::new();
    for (&(hash, kind), &t) in &first {
        let label = match kind {
            ObjectKind::Block => match blocks.iter().find(|b| b.hash == hash) {
                None => Label::UnknownToChain,
                Some(b) if !b.pow_valid => Label::Block(BlockClass::Ib),
                Some(b) if !b.main_chain => Label::Block(BlockClass::Fb),
                Some(b) => {
                    let superseded = blocks
                        .iter()
                        .filter(|o| o.main_chain && o.height > b.height)
                        .any(|o| seen(o) <= t);
                    if window.start_ms <= t && t < window.end_ms && !superseded {
                        Label::Block(BlockClass::Mdlb)
                    } else {
                        Label::Block(BlockClass::Eb)
                    }
                }
            },
            ObjectKind::Tx => {
                let valid = lines.iter().find_map(|l| match l {
                    LedgerLine::Tx(x) if x.txid == hash => Some(x.valid),
                    LedgerLine::Block(b) if b.txs.iter().any(|x| x.txid == hash) => Some(true),
                    _ => None,
                });
                match valid {
                    None | Some(false) => Label::Tx(TxClass::It),
                    Some(true) => match blocks.iter().find(|b| b.main_chain && b.txs.iter().any(|x| x.txid == hash)) {
                        None => Label::Tx(TxClass::Unconfirmed),
                        Some(b) if t < seen(b) => Label::Tx(TxClass::Bt),
                        Some(_) => Label::Tx(TxClass::Et),
                    },
                }
            }
        };
        out.insert(hash, label);
    }
    out
}


pub fn first_seen(events: &[InvEvent], hash: &Hash32, kind: ObjectKind) -> Option<u64> {
    events.iter().filter(|e| e.hash == *hash && e.kind == kind).map(|e| e.ts_ms).min()
}

pub fn blocks(lines: &[LedgerLine]) -> Vec<&LedgerBlock> {
    lines
        .iter()
        .filter_map(|l| match l {
            LedgerLine::Block(b) => Some(b),
            LedgerLine::Tx(_) => None,
        })
        .collect()
}

/// A block's sighting, or its own timestamp if never sighted.
fn block_seen(first: &HashMap<(Hash32, ObjectKind), u64>, b: &LedgerBlock) -> u64 {
    first.get(&(b.hash, ObjectKind::Block)).copied().unwrap_or(b.time_ms)
}

fn first_index(events: &[InvEvent]) -> HashMap<(Hash32, ObjectKind), u64> {
    let mut first: HashMap<(Hash32, ObjectKind), u64> = HashMap::new();
    for e in events {
        let t = first.entry((e.hash, e.kind)).or_insert(e.ts_ms);
        *t = (*t).min(e.ts_ms);
    }
    first
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteDelay {
    pub txid: Hash32,
    /// `None` when never included.
    pub included: Option<(f64, i64)>,
    pub value_sats: u64,
    pub fee_sats: u64,
}

/// Every figure input recomputed from scratch.
#[derive(Clone, Debug, Default)]
pub struct BruteFigures {
    pub analysis_set: Vec<Hash32>,
    pub delays: Vec<BruteDelay>,
    /// `(height, observed, included)` per MDLB.
    pub tx_per_block: Vec<(u64, usize, usize)>,
}

pub fn brute_figures(lines: &[LedgerLine], events: &[InvEvent], window: ListeningWindow) -> BruteFigures {
    let labels = oracle_labels(lines, events, window);
    let first = first_index(events);
    let blocks = blocks(lines);
    let main_at = |h: u64| blocks.iter().find(|b| b.main_chain && b.height == h).copied();
    let mut mdlb: Vec<&LedgerBlock> = blocks
        .iter()
        .filter(|b| labels.get(&b.hash) == Some(&Label::Block(BlockClass::Mdlb)))
        .copied()
        .collect();
    mdlb.sort_by_key(|b| b.height);
    let is_mdlb = |b: &LedgerBlock| mdlb.iter().any(|m| m.hash == b.hash);
    let interval = |b: &LedgerBlock| {
        let start = b
            .height
            .checked_sub(1)
            .and_then(main_at)
            .filter(|p| is_mdlb(p))
            .map_or(0, |p| block_seen(&first, p));
        start..block_seen(&first, b)
    };
    let boundaries: Vec<_> = [mdlb.first(), mdlb.last()].into_iter().flatten().map(|b| interval(b)).collect();

    let ledger_tx = |txid: &Hash32| -> Option<LedgerTx> {
        lines.iter().find_map(|l| match l {
            LedgerLine::Block(b) => b.txs.iter().find(|t| t.txid == *txid).cloned(),
            LedgerLine::Tx(t) if t.txid == *txid => Some(LedgerTx {
                txid: t.txid,
                value_sats: t.value_sats,
                fee_sats: t.fee_sats,
                locktime_set: t.locktime_set,
                is_coinbase: t.is_coinbase,
            }),
            LedgerLine::Tx(_) => None,
        })
    };

    let mut out = BruteFigures::default();
    let mut candidates: Vec<(&Hash32, &Label)> = labels.iter().collect();
    candidates.sort();
    for (txid, label) in candidates {
        if !matches!(label, Label::Tx(TxClass::Bt | TxClass::Unconfirmed)) {
            continue;
        }
        let tx = ledger_tx(txid).expect("valid txs are in the ledger");
        let t = first[&(*txid, ObjectKind::Tx)];
        if tx.is_coinbase
            || tx.locktime_set
            || !(window.start_ms <= t && t < window.end_ms)
            || boundaries.iter().any(|r| r.contains(&t))
        {
            continue;
        }
        out.analysis_set.push(*txid);
        let included = blocks
            .iter()
            .find(|b| b.main_chain && b.txs.iter().any(|x| x.txid == *txid))
            .map(|b| {
                let seen = block_seen(&first, b);
                let tip = blocks
                    .iter()
                    .filter(|o| o.main_chain && block_seen(&first, o) <= t)
                    .map(|o| o.height)
                    .max()
                    .expect("a block was seen before the transaction");
                ((seen as i64 - t as i64) as f64 / 1000.0, b.height as i64 - tip as i64)
            });
        out.delays.push(BruteDelay {
            txid: *txid,
            included,
            value_sats: tx.value_sats,
            fee_sats: tx.fee_sats,
        });
    }

    for b in &mdlb {
        let end = block_seen(&first, b);
        let start = b
            .height
            .checked_sub(1)
            .and_then(main_at)
            .map_or(0, |p| block_seen(&first, p))
            .min(end);
        let observed = first
            .iter()
            .filter(|((_, k), &t)| *k == ObjectKind::Tx && start <= t && t < end)
            .count();
        let included = b.txs.iter().filter(|t| !t.is_coinbase).count();
        out.tx_per_block.push((b.height, observed, included));
    }
    out
}

/// Mean per delay in blocks, from scratch.
pub fn brute_means(pairs: &[(i64, u64)]) -> BTreeMap<i64, (f64, usize)> {
    let mut keys: Vec<i64> = pairs.iter().map(|p| p.0).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let vs: Vec<u64> = pairs.iter().filter(|p| p.0 == k).map(|p| p.1).collect();
            let sum: u128 = vs.iter().map(|&v| u128::from(v)).sum();
            (k, (sum as f64 / vs.len() as f64, vs.len()))
        })
        .collect()
}
