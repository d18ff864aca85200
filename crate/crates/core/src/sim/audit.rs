//! Ground truth of a run and the check of the monitor against it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MonitorMode, Result, AUDIT_FILE, DELIVERIES_FILE};
use crate::eventlog::{EventLog, InvEvent};
use crate::types::{Hash32, ObjectKind};

/// Commands a passive monitor must never send.
pub const ACTIVE_COMMANDS: [&str; 4] = ["getdata", "inv", "tx", "block"];

/// Transaction fates at the end of a run. Valid transactions fall in
/// exactly one of `included`, `mempool` and `policy_skipped`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    /// Valid transactions generated.
    pub generated_txs: u64,
    pub invalid_txs: u64,
    /// On the main chain.
    pub included: u64,
    /// Never declined by a miner, still waiting.
    pub mempool: u64,
    /// Declined at least once and not on the main chain.
    pub policy_skipped: u64,
    /// Must stay zero.
    pub included_more_than_once: u64,
    pub blocks_mined: u64,
    pub valid_blocks: u64,
    pub invalid_blocks: u64,
    pub main_chain_blocks: u64,
    pub end_ms: u64,
}

impl SimStats {
    pub fn conserved(&self) -> bool {
        self.included + self.mempool + self.policy_skipped == self.generated_txs
            && self.included_more_than_once == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedBlock {
    pub hash: Hash32,
    pub height: u64,
    pub time_ms: u64,
    /// `None` for genesis.
    pub miner: Option<usize>,
    pub valid: bool,
    pub main_chain: bool,
    /// Announced to the monitor only late.
    pub late: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentCommand {
    pub peer: String,
    pub command: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub seed: u64,
    pub mode: MonitorMode,
    /// Monitor-side peer names, by peer index.
    pub peers: Vec<String>,
    pub miners: Vec<usize>,
    pub stats: SimStats,
    pub blocks: Vec<MinedBlock>,
    /// What simulated peers received from the monitor (loopback only).
    pub monitor_sent: Vec<SentCommand>,
    /// Every announcement scheduled towards the monitor, in simulated time.
    #[serde(skip)]
    pub deliveries: Vec<InvEvent>,
}

impl Audit {
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let audit = dir.join(AUDIT_FILE);
        fs::write(&audit, serde_json::to_string_pretty(self)? + "\n")?;
        let deliveries = dir.join(DELIVERIES_FILE);
        EventLog::from_events(self.deliveries.clone()).save(&deliveries)?;
        Ok(vec![audit, deliveries])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut audit: Audit = serde_json::from_str(&fs::read_to_string(dir.join(AUDIT_FILE))?)?;
        audit.deliveries = EventLog::open(dir.join(DELIVERIES_FILE))?.events().to_vec();
        Ok(audit)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub events_checked: usize,
    /// Scheduled deliveries the monitor did not record.
    pub unobserved: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exact check: every monitor event must match a scheduled delivery.
pub fn audit_monitor(log: &EventLog, audit: &Audit) -> AuditReport {
    audit_monitor_within(log, audit, 0)
}

/// Like [`audit_monitor`], letting timestamps differ by up to
/// `tolerance_ms`. Each delivery explains at most one event.
pub fn audit_monitor_within(log: &EventLog, audit: &Audit, tolerance_ms: u64) -> AuditReport {
    let mut report = AuditReport::default();
    for sent in &audit.monitor_sent {
        if ACTIVE_COMMANDS.contains(&sent.command.as_str()) {
            report
                .violations
                .push(format!("monitor sent {} to {}", sent.command, sent.peer));
        }
    }
    let mut pending: BTreeMap<(&str, ObjectKind, Hash32), Vec<u64>> = BTreeMap::new();
    for d in &audit.deliveries {
        pending.entry((d.peer.as_str(), d.kind, d.hash)).or_default().push(d.ts_ms);
    }
    for times in pending.values_mut() {
        times.sort_unstable();
    }
    for e in log.events() {
        report.events_checked += 1;
        let matched = pending
            .get_mut(&(e.peer.as_str(), e.kind, e.hash))
            .and_then(|times| {
                let best = times
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, &t)| t.abs_diff(e.ts_ms))
                    .filter(|(_, &t)| t.abs_diff(e.ts_ms) <= tolerance_ms)
                    .map(|(i, _)| i)?;
                Some(times.remove(best))
            });
        if matched.is_none() {
            report.violations.push(format!(
                "unscheduled {} {} from {} at {}",
                e.kind, e.hash, e.peer, e.ts_ms
            ));
        }
    }
    report.unobserved = pending.values().map(Vec::len).sum();
    report
}
