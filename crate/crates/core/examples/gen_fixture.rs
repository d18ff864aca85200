//! Writes the replay fixture under `tests/fixtures/headline/`.
//!
//! 1000 analysed transactions, all first seen between the sightings of the
//! first two blocks:
//! - 570 included by the next block (within 20 minutes), 815e6 sats
//! - 115 included 2.5 h in, 1e6 sats each
//! - 115 included after 1, 10 and 29 days, 600k sats each
//! - 200 never included, 5000 sats each
//!
//! The fractions at the usual marks come out as 0.43 / 0.20 not included
//! (1 h / 30 d) and 0.93 / 0.999 of value included (3 h / 30 d). A handful
//! of extra transactions and blocks exercise every exclusion rule.
//!
//! Run with `cargo run --example gen_fixture`.

use std::fs;
use std::path::Path;

use blocksonar::chainview::{write_ledger, LedgerBlock, LedgerLine, LedgerTx, LooseTx};
use blocksonar::eventlog::{EventLog, InvEvent};
use blocksonar::{Hash32, ObjectKind};
use sha2::{Digest, Sha256};

const T0: u64 = 1_456_790_400_000;
const SEC: u64 = 1000;
const DAY: u64 = 86_400 * SEC;
const PEERS: [&str; 4] = ["10.0.0.1:8333", "10.0.0.2:8333", "10.0.0.3:8333", "10.0.0.4:8333"];

fn h(name: &str) -> Hash32 {
    Hash32(Sha256::digest(name.as_bytes()).into())
}

fn tx(name: &str, value: u64) -> LedgerTx {
    LedgerTx {
        txid: h(name),
        value_sats: value,
        fee_sats: value / 1000 + 10,
        locktime_set: false,
        is_coinbase: false,
    }
}

struct Fixture {
    events: Vec<InvEvent>,
    blocks: Vec<LedgerBlock>,
    loose: Vec<LooseTx>,
}

impl Fixture {
    /// Announced by every peer, the first at `ts`.
    fn seen(&mut self, ts: u64, kind: ObjectKind, hash: Hash32) {
        for (i, p) in PEERS.iter().enumerate() {
            self.events.push(InvEvent::new(ts + i as u64 * 150, *p, kind, hash));
        }
    }

    fn block(&mut self, name: &str, seen: u64, txs: Vec<LedgerTx>, main: bool, valid: bool) -> Hash32 {
        let height = match self.blocks.iter().filter(|b| b.main_chain).last() {
            Some(tip) if main => tip.height + 1,
            Some(tip) => tip.height,
            None => 400_000,
        };
        let prev = self
            .blocks
            .iter()
            .filter(|b| b.main_chain && b.height + 1 == height)
            .map(|b| b.hash)
            .next()
            .unwrap_or(h("pre-window parent"));
        let hash = h(name);
        let mut all = vec![LedgerTx {
            is_coinbase: true,
            fee_sats: 0,
            ..tx(&format!("{name} coinbase"), 1_250_000_000)
        }];
        all.extend(txs);
        self.blocks.push(LedgerBlock {
            hash,
            height,
            prev,
            time_ms: seen - 4 * SEC,
            pow_valid: valid,
            main_chain: main,
            txs: all,
        });
        self.seen(seen, ObjectKind::Block, hash);
        hash
    }
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/headline");
    fs::create_dir_all(&dir).expect("fixture dir");
    let mut f = Fixture { events: Vec::new(), blocks: Vec::new(), loose: Vec::new() };

    let fast_total: u64 = 815_000_000;
    let mut fast = Vec::new();
    let mut slow = Vec::new();
    let mut late = [Vec::new(), Vec::new(), Vec::new()];
    let mut never = Vec::new();
    for i in 0..1000u64 {
        let name = format!("tx {i}");
        match i {
            0..570 => fast.push(tx(&name, fast_total / 570 + u64::from(i < fast_total % 570))),
            570..685 => slow.push(tx(&name, 1_000_000)),
            685..800 => late[(i as usize - 685) % 3].push(tx(&name, 600_000)),
            _ => never.push(tx(&name, 5_000)),
        }
        f.seen(T0 + 60 * SEC + i * SEC, ObjectKind::Tx, h(&name));
    }

    // Excluded by rule: boundary (first seen while the first block was mined),
    // locktime, echo, invalid, unknown to the ledger.
    let boundary = tx("boundary", 70_000);
    f.seen(T0 - 30 * SEC, ObjectKind::Tx, boundary.txid);
    let locktime = LedgerTx { locktime_set: true, ..tx("locktime", 80_000) };
    f.seen(T0 + 1100 * SEC, ObjectKind::Tx, locktime.txid);
    let echo = tx("echo", 90_000);
    f.seen(T0 + 1300 * SEC, ObjectKind::Tx, echo.txid);
    f.loose.push(LooseTx {
        txid: h("double spend"),
        value_sats: 40_000,
        fee_sats: 50,
        locktime_set: false,
        is_coinbase: false,
        valid: false,
    });
    f.seen(T0 + 500 * SEC, ObjectKind::Tx, h("double spend"));
    f.seen(T0 + 600 * SEC, ObjectKind::Tx, h("never relayed anywhere"));
    for t in &never {
        f.loose.push(LooseTx {
            txid: t.txid,
            value_sats: t.value_sats,
            fee_sats: t.fee_sats,
            locktime_set: false,
            is_coinbase: false,
            valid: true,
        });
    }

    f.block("b0", T0, vec![boundary], true, true);
    let mut b1 = fast;
    b1.extend([locktime, echo]);
    f.block("b1", T0 + 1200 * SEC, b1, true, true);
    f.block("fork", T0 + 1230 * SEC, Vec::new(), false, true);
    f.block("b2", T0 + 9000 * SEC, slow, true, true);
    f.block("bad pow", T0 + 9100 * SEC, Vec::new(), false, false);
    let [d1, d10, d29] = late;
    f.block("b3", T0 + DAY + 3600 * SEC, d1, true, true);
    f.block("b4", T0 + 10 * DAY, d10, true, true);
    f.block("b5", T0 + 29 * DAY, d29, true, true);
    f.block("b6", T0 + 31 * DAY, Vec::new(), true, true);

    let mut lines: Vec<LedgerLine> = f.blocks.into_iter().map(LedgerLine::Block).collect();
    lines.extend(f.loose.into_iter().map(LedgerLine::Tx));
    write_ledger(dir.join("ledger.jsonl"), &lines).expect("ledger");
    EventLog::from_events(f.events).save(dir.join("events.csv")).expect("log");
    println!("wrote {}", dir.display());
}

