//! Statistics over a classified log: inclusion delays, their histogram and
//! exponential fit, cumulative inclusion by count and by value, block
//! propagation curves, block interval statistics and per-block counts.
//!
//! Delays are measured from a transaction's first sighting to the first
//! sighting of the main-chain block that includes it. Transactions not
//! included by the horizon are censored: they count in the denominators of
//! the cumulative curves and nowhere else.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainview::{ChainError, ChainView, ObservationClock};
use crate::classify::{
    analysis_set, AnalysisSet, BlockClass, Classification, ExclusionCounts, Label,
    ListeningWindow, TxClass,
};
use crate::eventlog::EventLog;
use crate::types::{Hash32, ObjectKind};

pub const HOUR_S: f64 = 3600.0;
pub const DAY_S: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("{0} was not included by the horizon")]
    NotIncluded(Hash32),
    #[error("{0} is not in the analysis set")]
    NotInAnalysisSet(Hash32),
    #[error("no data to aggregate")]
    EmptySet,
    #[error("fewer than 3 usable histogram bins")]
    TooFewBins,
    #[error("histogram does not decay (slope {0})")]
    NonDecaying(f64),
    #[error("no MDLB blocks")]
    NoBlocks,
    #[error("need at least two consecutive MDLB blocks")]
    TooFewBlocks,
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayHistogram {
    pub bin_width: f64,
    /// `(lower edge, count)`, contiguous from 0 up to the last nonempty bin.
    pub bins: Vec<(f64, u64)>,
    pub censored_count: u64,
}

impl DelayHistogram {
    pub fn binned_total(&self) -> u64 {
        self.bins.iter().map(|b| b.1).sum()
    }
}

/// Bins delays over `[0, horizon)`. Delays at or beyond the horizon join
/// the censored count.
pub fn delay_histogram(
    delays: &[f64],
    censored: u64,
    bin_width: f64,
    horizon: f64,
) -> Result<DelayHistogram> {
    assert!(bin_width > 0.0, "bin width must be positive");
    let mut counts: Vec<u64> = Vec::new();
    let mut censored_count = censored;
    for &d in delays {
        if d >= horizon {
            censored_count += 1;
            continue;
        }
        let idx = (d.max(0.0) / bin_width).floor() as usize;
        if counts.len() <= idx {
            counts.resize(idx + 1, 0);
        }
        counts[idx] += 1;
    }
    if counts.is_empty() {
        return Err(AnalyticsError::EmptySet);
    }
    Ok(DelayHistogram {
        bin_width,
        bins: counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 * bin_width, c))
            .collect(),
        censored_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitWeighting {
    /// Each bin weighted by its count, the inverse variance of a Poisson
    /// log count.
    #[default]
    Counts,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitOptions {
    pub weighting: FitWeighting,
    /// Bins below this count are left out of the fit.
    pub min_count: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            weighting: FitWeighting::Counts,
            min_count: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Characteristic time of `count ~ amplitude * exp(-t / delta)`.
    pub delta: f64,
    pub amplitude: f64,
    /// Unweighted RMS of `ln(count) - fitted` over the bins used.
    pub rms_log_residual: f64,
    pub bins_used: usize,
}

pub fn fit_exponential(hist: &DelayHistogram) -> Result<FitResult> {
    fit_exponential_with(hist, &FitOptions::default())
}

/// Least-squares line through `ln(count)` against bin centre.
pub fn fit_exponential_with(hist: &DelayHistogram, opts: &FitOptions) -> Result<FitResult> {
    let points: Vec<(f64, f64, f64)> = hist
        .bins
        .iter()
        .filter(|&&(_, c)| c > 0 && c >= opts.min_count)
        .map(|&(lo, c)| {
            let w = match opts.weighting {
                FitWeighting::Counts => c as f64,
                FitWeighting::Uniform => 1.0,
            };
            (lo + hist.bin_width / 2.0, (c as f64).ln(), w)
        })
        .collect();
    if points.len() < 3 {
        return Err(AnalyticsError::TooFewBins);
    }
    let sw: f64 = points.iter().map(|p| p.2).sum();
    let mx = points.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = points.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = points.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(AnalyticsError::NonDecaying(slope));
    }
    let intercept = my - slope * mx;
    let rss: f64 = points
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    Ok(FitResult {
        delta: -1.0 / slope,
        amplitude: intercept.exp(),
        rms_log_residual: (rss / points.len() as f64).sqrt(),
        bins_used: points.len(),
    })
}

/// Inclusion outcome of one transaction for the cumulative curves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InclusionSample {
    /// `None` when censored.
    pub delay_s: Option<f64>,
    pub value_sats: u64,
}

/// Fraction of transactions (and of their value) included within a given
/// delay. Censored samples sit in the denominators only.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeInclusion {
    /// Log-spaced evaluation times, seconds.
    pub grid: Vec<f64>,
    pub fraction_by_count: Vec<f64>,
    pub fraction_by_value: Vec<f64>,
    /// Included delays, sorted, with their values.
    included: Vec<(f64, u64)>,
    total: usize,
    total_value: u128,
}

impl CumulativeInclusion {
    /// Exact fraction of samples included with delay `<= t`.
    pub fn count_fraction_at(&self, t: f64) -> f64 {
        let n = self.included.partition_point(|&(d, _)| d <= t);
        n as f64 / self.total as f64
    }

    /// Exact fraction of value included with delay `<= t`.
    pub fn value_fraction_at(&self, t: f64) -> f64 {
        if self.total_value == 0 {
            return 0.0;
        }
        let n = self.included.partition_point(|&(d, _)| d <= t);
        let v: u128 = self.included[..n].iter().map(|&(_, v)| u128::from(v)).sum();
        v as f64 / self.total_value as f64
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// `points` log-spaced values from `start` to `end` inclusive.
pub fn log_grid(start: f64, end: f64, points: usize) -> Vec<f64> {
    if points <= 1 || end <= start {
        return vec![start.max(end)];
    }
    let (a, b) = (start.ln(), end.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

pub fn cumulative_inclusion(
    samples: &[InclusionSample],
    grid: Vec<f64>,
) -> Result<CumulativeInclusion> {
    if samples.is_empty() {
        return Err(AnalyticsError::EmptySet);
    }
    let mut included: Vec<(f64, u64)> = samples
        .iter()
        .filter_map(|s| s.delay_s.map(|d| (d, s.value_sats)))
        .collect();
    included.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut curve = CumulativeInclusion {
        grid,
        fraction_by_count: Vec::new(),
        fraction_by_value: Vec::new(),
        included,
        total: samples.len(),
        total_value: samples.iter().map(|s| u128::from(s.value_sats)).sum(),
    };
    curve.fraction_by_count = curve.grid.iter().map(|&t| curve.count_fraction_at(t)).collect();
    curve.fraction_by_value = curve.grid.iter().map(|&t| curve.value_fraction_at(t)).collect();
    Ok(curve)
}

/// Reach of one block, rebased to its first sighting.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCurve {
    pub hash: Hash32,
    pub start_ms: u64,
    /// `(ms since first sighting, distinct peers so far)`.
    pub steps: Vec<(u64, usize)>,
    /// Distinct peers that announced anything while the block was the
    /// newest one, for optional normalisation.
    pub active_peers: usize,
}

impl BlockCurve {
    /// Count at `t_ms`, holding the last value after the trace ends.
    pub fn count_at(&self, t_ms: f64) -> usize {
        let n = self.steps.partition_point(|&(dt, _)| dt as f64 <= t_ms);
        if n == 0 { 0 } else { self.steps[n - 1].1 }
    }

    pub fn final_count(&self) -> usize {
        self.steps.last().map_or(0, |s| s.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationSummary {
    /// Sample times in seconds: 0 then log-spaced from 1 ms.
    pub grid_s: Vec<f64>,
    pub curves: Vec<BlockCurve>,
    pub mean: Vec<f64>,
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
    /// Mean of `count / active_peers`.
    pub mean_fraction: Vec<f64>,
}

/// Linear-interpolated percentile (`q` in [0, 1]) of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub min_s: f64,
    pub max_s: f64,
    pub mean_s: f64,
    /// Population variance, s².
    pub variance_s2: f64,
    pub std_dev_s: f64,
    pub median_s: f64,
}

impl IntervalStats {
    pub fn from_seconds(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let variance = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(IntervalStats {
            min_s: sorted[0],
            max_s: sorted[sorted.len() - 1],
            mean_s: mean,
            variance_s2: variance,
            std_dev_s: variance.sqrt(),
            median_s: percentile(&sorted, 0.5),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockIntervalStats {
    pub intervals: usize,
    /// From first network sightings.
    pub listening: IntervalStats,
    /// From block header timestamps.
    pub blockchain: IntervalStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateBucket {
    pub start_ms: u64,
    /// BT and ET.
    pub valid: u64,
    /// IT.
    pub invalid: u64,
    pub unconfirmed: u64,
}

/// Distinct transactions per time bucket, bucketed by first sighting.
pub fn rate_per_bucket(log: &EventLog, labels: &Classification, bucket_ms: u64) -> Vec<RateBucket> {
    assert!(bucket_ms > 0);
    let mut buckets: BTreeMap<u64, RateBucket> = BTreeMap::new();
    for first in log.first_observations(ObjectKind::Tx) {
        let start_ms = first.first_ts_ms / bucket_ms * bucket_ms;
        let b = buckets.entry(start_ms).or_insert(RateBucket {
            start_ms,
            valid: 0,
            invalid: 0,
            unconfirmed: 0,
        });
        match labels.label(&first.hash) {
            Some(Label::Tx(TxClass::Bt | TxClass::Et)) => b.valid += 1,
            Some(Label::Tx(TxClass::It)) => b.invalid += 1,
            Some(Label::Tx(TxClass::Unconfirmed)) => b.unconfirmed += 1,
            _ => {}
        }
    }
    let (Some(&lo), Some(&hi)) = (buckets.keys().next(), buckets.keys().next_back()) else {
        return Vec::new();
    };
    (lo..=hi)
        .step_by(bucket_ms as usize)
        .map(|start_ms| {
            buckets.get(&start_ms).copied().unwrap_or(RateBucket {
                start_ms,
                valid: 0,
                invalid: 0,
                unconfirmed: 0,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayGroup {
    pub delay_blocks: i64,
    pub mean: f64,
    pub count: usize,
}

/// Arithmetic mean of `value` per delay in blocks; empty groups omitted.
pub fn mean_by_delay(samples: &[(i64, u64)]) -> Result<Vec<DelayGroup>> {
    if samples.is_empty() {
        return Err(AnalyticsError::EmptySet);
    }
    let mut groups: BTreeMap<i64, (u128, usize)> = BTreeMap::new();
    for &(delay, value) in samples {
        let g = groups.entry(delay).or_insert((0, 0));
        g.0 += u128::from(value);
        g.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(delay_blocks, (sum, count))| DelayGroup {
            delay_blocks,
            mean: sum as f64 / count as f64,
            count,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTxCount {
    pub block: Hash32,
    pub height: u64,
    pub interval_start_ms: u64,
    pub interval_end_ms: u64,
    /// Distinct transactions first sighted during the interval.
    pub observed: usize,
    /// Non-coinbase transactions in the block closing the interval.
    pub included: usize,
}

/// Delay of one included analysis-set transaction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TxDelay {
    pub txid: Hash32,
    pub seconds: f64,
    pub blocks: i64,
    pub value_sats: u64,
    pub fee_sats: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub bin_width_s: f64,
    pub bin_width_blocks: f64,
    /// Absolute analysis horizon; blocks sighted later do not count.
    pub horizon_ms: Option<u64>,
    pub grid_points: usize,
    pub grid_start_s: f64,
    pub propagation_points: usize,
    pub rate_bucket_ms: u64,
    pub fit: FitOptions,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            bin_width_s: 600.0,
            bin_width_blocks: 1.0,
            horizon_ms: None,
            grid_points: 200,
            grid_start_s: 1.0,
            propagation_points: 120,
            rate_bucket_ms: 3_600_000,
            fit: FitOptions::default(),
        }
    }
}

/// Analysis over one labelled log.
pub struct Analyzer<'a> {
    chain: &'a ChainView,
    log: &'a EventLog,
    labels: &'a Classification,
    window: ListeningWindow,
    clock: ObservationClock,
    set: AnalysisSet,
    opts: AnalyzeOptions,
}

impl<'a> Analyzer<'a> {
    pub fn new(
        chain: &'a ChainView,
        log: &'a EventLog,
        labels: &'a Classification,
        window: ListeningWindow,
        opts: AnalyzeOptions,
    ) -> Self {
        let clock = chain.clock(Some(log));
        let set = analysis_set(labels, chain, &clock, window);
        Analyzer {
            chain,
            log,
            labels,
            window,
            clock,
            set,
            opts,
        }
    }

    pub fn analysis_set(&self) -> &AnalysisSet {
        &self.set
    }

    pub fn clock(&self) -> &ObservationClock {
        &self.clock
    }

    /// MDLB hashes in height order.
    pub fn mdlb(&self) -> Vec<Hash32> {
        let mut blocks: Vec<(u64, Hash32)> = self
            .labels
            .with_label(Label::Block(BlockClass::Mdlb))
            .filter_map(|r| self.chain.block(&r.hash).map(|b| (b.height, b.hash)))
            .collect();
        blocks.sort_unstable();
        blocks.into_iter().map(|(_, h)| h).collect()
    }

    /// First sighting of the including block, if sighted by the horizon.
    fn included_seen_ms(&self, txid: &Hash32) -> Option<(u64, u64)> {
        let inc = self.chain.inclusion(txid)?;
        let seen = self.clock.block_seen_ms(&inc.block)?;
        self.opts
            .horizon_ms
            .is_none_or(|h| seen <= h)
            .then_some((seen, inc.height))
    }

    fn delay_ms(&self, txid: &Hash32) -> Result<(i64, u64)> {
        if !self.set.contains(txid) {
            return Err(AnalyticsError::NotInAnalysisSet(*txid));
        }
        let (seen, height) = self
            .included_seen_ms(txid)
            .ok_or(AnalyticsError::NotIncluded(*txid))?;
        let first = self.log.first_seen_ms(txid).expect("analysed txs were observed");
        Ok((seen as i64 - first as i64, height))
    }

    pub fn delay_seconds(&self, txid: &Hash32) -> Result<f64> {
        Ok(self.delay_ms(txid)?.0 as f64 / 1000.0)
    }

    /// Including height minus the tip height at first sighting.
    pub fn delay_blocks(&self, txid: &Hash32) -> Result<i64> {
        let (_, height) = self.delay_ms(txid)?;
        let first = self.log.first_seen_ms(txid).expect("analysed txs were observed");
        let tip = self.clock.tip_height_at(first)?;
        Ok(height as i64 - tip as i64)
    }

    /// Delays of every included analysis-set transaction, plus the number
    /// censored.
    pub fn delays(&self) -> Result<(Vec<TxDelay>, u64)> {
        let mut out = Vec::new();
        let mut censored = 0;
        for txid in &self.set.txids {
            match self.delay_seconds(txid) {
                Ok(seconds) => {
                    let tx = self.chain.tx(txid).expect("analysed txs are in the ledger");
                    out.push(TxDelay {
                        txid: *txid,
                        seconds,
                        blocks: self.delay_blocks(txid)?,
                        value_sats: tx.value_sats,
                        fee_sats: tx.fee_sats,
                    });
                }
                Err(AnalyticsError::NotIncluded(_)) => censored += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((out, censored))
    }

    fn horizon_span_s(&self) -> Option<f64> {
        self.opts
            .horizon_ms
            .map(|h| h.saturating_sub(self.window.start_ms) as f64 / 1000.0)
    }

    pub fn delay_histogram_seconds(&self) -> Result<DelayHistogram> {
        let (delays, censored) = self.delays()?;
        let values: Vec<f64> = delays.iter().map(|d| d.seconds).collect();
        delay_histogram(
            &values,
            censored,
            self.opts.bin_width_s,
            self.horizon_span_s().unwrap_or(f64::INFINITY),
        )
    }

    pub fn delay_histogram_blocks(&self) -> Result<DelayHistogram> {
        let (delays, censored) = self.delays()?;
        let values: Vec<f64> = delays.iter().map(|d| d.blocks as f64).collect();
        delay_histogram(&values, censored, self.opts.bin_width_blocks, f64::INFINITY)
    }

    fn grid(&self, max_delay: f64) -> Vec<f64> {
        let end = self
            .horizon_span_s()
            .unwrap_or(max_delay)
            .max(self.opts.grid_start_s);
        log_grid(self.opts.grid_start_s, end, self.opts.grid_points)
    }

    /// Cumulative inclusion over the analysis set.
    pub fn cumulative_inclusion(&self) -> Result<CumulativeInclusion> {
        let mut samples = Vec::with_capacity(self.set.len());
        for txid in &self.set.txids {
            let tx = self.chain.tx(txid).expect("analysed txs are in the ledger");
            let delay_s = match self.delay_seconds(txid) {
                Ok(d) => Some(d),
                Err(AnalyticsError::NotIncluded(_)) => None,
                Err(e) => return Err(e),
            };
            samples.push(InclusionSample {
                delay_s,
                value_sats: tx.value_sats,
            });
        }
        let max = samples.iter().filter_map(|s| s.delay_s).fold(0.0, f64::max);
        cumulative_inclusion(&samples, self.grid(max))
    }

    /// Cumulative inclusion over every observed valid non-coinbase
    /// transaction (BT, ET and UNCONFIRMED), echoes counting as delay 0.
    pub fn cumulative_inclusion_observed(&self) -> Result<CumulativeInclusion> {
        let mut samples = Vec::new();
        for row in self.labels.rows.values() {
            if !matches!(
                row.class,
                Label::Tx(TxClass::Bt | TxClass::Et | TxClass::Unconfirmed)
            ) {
                continue;
            }
            let Some(tx) = self.chain.tx(&row.hash) else { continue };
            if tx.is_coinbase {
                continue;
            }
            let delay_s = self
                .included_seen_ms(&row.hash)
                .map(|(seen, _)| seen.saturating_sub(row.first_ts_ms) as f64 / 1000.0);
            samples.push(InclusionSample {
                delay_s,
                value_sats: tx.value_sats,
            });
        }
        let max = samples.iter().filter_map(|s| s.delay_s).fold(0.0, f64::max);
        cumulative_inclusion(&samples, self.grid(max))
    }

    pub fn propagation_analysis(&self) -> Result<PropagationSummary> {
        let blocks = self.mdlb();
        if blocks.is_empty() {
            return Err(AnalyticsError::NoBlocks);
        }
        let mut curves = Vec::with_capacity(blocks.len());
        for hash in &blocks {
            let block = self.chain.block(hash).expect("MDLB is in the ledger");
            let start = self.log.first_seen_ms(hash).expect("MDLB was observed");
            let next = self.clock.next_higher_seen_ms(block.height);
            let until = next.map_or(u64::MAX, |n| n - 1);
            let steps = self
                .log
                .reach_count_series(hash, until)
                .map_err(|_| AnalyticsError::NoBlocks)?
                .into_iter()
                .map(|(ts, c)| (ts - start, c))
                .collect();
            let active_peers = self.log.active_peers(start..next.unwrap_or(u64::MAX));
            curves.push(BlockCurve {
                hash: *hash,
                start_ms: start,
                steps,
                active_peers,
            });
        }
        let max_ms = curves
            .iter()
            .filter_map(|c| c.steps.last().map(|s| s.0))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut grid_s = vec![0.0];
        grid_s.extend(log_grid(1e-3, max_ms as f64 / 1000.0, self.opts.propagation_points));
        grid_s.dedup();

        let mut mean = Vec::with_capacity(grid_s.len());
        let mut p10 = Vec::with_capacity(grid_s.len());
        let mut p90 = Vec::with_capacity(grid_s.len());
        let mut mean_fraction = Vec::with_capacity(grid_s.len());
        for &t in &grid_s {
            let t_ms = t * 1000.0;
            let mut values: Vec<f64> = curves.iter().map(|c| c.count_at(t_ms) as f64).collect();
            values.sort_by(f64::total_cmp);
            mean.push(values.iter().sum::<f64>() / values.len() as f64);
            p10.push(percentile(&values, 0.1));
            p90.push(percentile(&values, 0.9));
            mean_fraction.push(
                curves
                    .iter()
                    .map(|c| c.count_at(t_ms) as f64 / c.active_peers.max(1) as f64)
                    .sum::<f64>()
                    / curves.len() as f64,
            );
        }
        Ok(PropagationSummary {
            grid_s,
            curves,
            mean,
            p10,
            p90,
            mean_fraction,
        })
    }

    pub fn block_interval_stats(&self) -> Result<BlockIntervalStats> {
        let blocks = self.mdlb();
        if blocks.len() < 2 {
            return Err(AnalyticsError::TooFewBlocks);
        }
        let mut listening = Vec::new();
        let mut chain_time = Vec::new();
        for pair in blocks.windows(2) {
            let (a, b) = (
                self.chain.block(&pair[0]).expect("in ledger"),
                self.chain.block(&pair[1]).expect("in ledger"),
            );
            if b.height != a.height + 1 {
                continue;
            }
            let seen = |h: &Hash32| self.clock.block_seen_ms(h).expect("in ledger") as f64;
            listening.push((seen(&b.hash) - seen(&a.hash)) / 1000.0);
            chain_time.push((b.time_ms as f64 - a.time_ms as f64) / 1000.0);
        }
        match (
            IntervalStats::from_seconds(&listening),
            IntervalStats::from_seconds(&chain_time),
        ) {
            (Some(listening), Some(blockchain)) => Ok(BlockIntervalStats {
                intervals: chain_time.len(),
                listening,
                blockchain,
            }),
            _ => Err(AnalyticsError::TooFewBlocks),
        }
    }

    pub fn rate_per_bucket(&self) -> Vec<RateBucket> {
        rate_per_bucket(self.log, self.labels, self.opts.rate_bucket_ms)
    }

    pub fn value_vs_delay(&self) -> Result<Vec<DelayGroup>> {
        let (delays, _) = self.delays()?;
        mean_by_delay(&delays.iter().map(|d| (d.blocks, d.value_sats)).collect::<Vec<_>>())
    }

    pub fn fee_vs_delay(&self) -> Result<Vec<DelayGroup>> {
        let (delays, _) = self.delays()?;
        mean_by_delay(&delays.iter().map(|d| (d.blocks, d.fee_sats)).collect::<Vec<_>>())
    }

    /// Per MDLB: transactions first sighted while it was being mined versus
    /// transactions it carries.
    pub fn tx_per_block_comparison(&self) -> Result<Vec<BlockTxCount>> {
        let blocks = self.mdlb();
        if blocks.is_empty() {
            return Err(AnalyticsError::NoBlocks);
        }
        let mut first_seen: Vec<u64> = self
            .log
            .first_observations(ObjectKind::Tx)
            .iter()
            .map(|f| f.first_ts_ms)
            .collect();
        first_seen.sort_unstable();
        let mut out = Vec::with_capacity(blocks.len());
        for hash in blocks {
            let block = self.chain.block(&hash).expect("in ledger");
            let end = self.clock.block_seen_ms(&hash).expect("in ledger");
            let start = block
                .height
                .checked_sub(1)
                .and_then(|h| self.chain.main_block_at(h))
                .and_then(|p| self.clock.block_seen_ms(&p.hash))
                .unwrap_or(0)
                .min(end);
            let observed = first_seen.partition_point(|&t| t < end)
                - first_seen.partition_point(|&t| t < start);
            let included = block
                .txids
                .iter()
                .filter(|t| self.chain.tx(t).is_some_and(|tx| !tx.is_coinbase))
                .count();
            out.push(BlockTxCount {
                block: hash,
                height: block.height,
                interval_start_ms: start,
                interval_end_ms: end,
                observed,
                included,
            });
        }
        Ok(out)
    }

    /// Computes every figure and writes it under `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<AnalysisOutputs> {
        fs::create_dir_all(dir)?;
        let mut outputs = AnalysisOutputs::default();
        let mut note = |file: &str, err: &AnalyticsError| {
            outputs.missing.push(MissingFigure {
                file: file.to_string(),
                reason: err.to_string(),
            });
        };

        let mut written = Vec::new();
        match self.propagation_analysis() {
            Ok(p) => written.push(write_propagation(dir, &p)?),
            Err(e) => note(PROPAGATION_CSV, &e),
        }
        let hist_s = self.delay_histogram_seconds();
        match &hist_s {
            Ok(h) => written.push(write_histogram(dir, DELAY_SECONDS_CSV, h)?),
            Err(e) => note(DELAY_SECONDS_CSV, e),
        }
        let hist_b = self.delay_histogram_blocks();
        match &hist_b {
            Ok(h) => written.push(write_histogram(dir, DELAY_BLOCKS_CSV, h)?),
            Err(e) => note(DELAY_BLOCKS_CSV, e),
        }
        let cumulative = self.cumulative_inclusion();
        match &cumulative {
            Ok(c) => {
                written.push(write_cumulative(dir, CUMULATIVE_COUNT_CSV, &c.grid, &c.fraction_by_count)?);
                written.push(write_cumulative(dir, CUMULATIVE_VALUE_CSV, &c.grid, &c.fraction_by_value)?);
            }
            Err(e) => {
                note(CUMULATIVE_COUNT_CSV, e);
                note(CUMULATIVE_VALUE_CSV, e);
            }
        }
        match self.value_vs_delay() {
            Ok(g) => written.push(write_groups(dir, VALUE_VS_DELAY_CSV, "mean_value_sats", &g)?),
            Err(e) => note(VALUE_VS_DELAY_CSV, &e),
        }
        match self.fee_vs_delay() {
            Ok(g) => written.push(write_groups(dir, FEE_VS_DELAY_CSV, "mean_fee_sats", &g)?),
            Err(e) => note(FEE_VS_DELAY_CSV, &e),
        }
        match self.tx_per_block_comparison() {
            Ok(rows) => written.push(write_rows(dir, TX_PER_BLOCK_CSV, &rows)?),
            Err(e) => note(TX_PER_BLOCK_CSV, &e),
        }
        written.push(write_rows(dir, TX_RATE_CSV, &self.rate_per_bucket())?);

        let summary = self.summary(&hist_s, &hist_b, &cumulative)?;
        let summary_path = dir.join(SUMMARY_JSON);
        let mut summary = summary;
        summary.missing_figures = outputs.missing.clone();
        fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
        written.push(summary_path);
        outputs.files = written;
        outputs.summary = Some(summary);
        Ok(outputs)
    }

    fn summary(
        &self,
        hist_s: &Result<DelayHistogram>,
        hist_b: &Result<DelayHistogram>,
        cumulative: &Result<CumulativeInclusion>,
    ) -> Result<Summary> {
        let fit = |h: &Result<DelayHistogram>| match h {
            Ok(h) => match fit_exponential_with(h, &self.opts.fit) {
                Ok(f) => FitOutcome::Fitted(f),
                Err(e) => FitOutcome::Unavailable { reason: e.to_string() },
            },
            Err(e) => FitOutcome::Unavailable { reason: e.to_string() },
        };
        let (delays, censored) = self.delays()?;
        let class_counts = self
            .labels
            .counts()
            .into_iter()
            .map(|(l, n)| (l.as_str().to_string(), n))
            .collect();
        Ok(Summary {
            window: self.window,
            horizon_ms: self.opts.horizon_ms,
            class_counts,
            analysis_set_size: self.set.len(),
            excluded: self.set.excluded.clone(),
            included: delays.len(),
            censored: censored as usize,
            fit_seconds: fit(hist_s),
            fit_blocks: fit(hist_b),
            inclusion_analysis_set: cumulative.as_ref().ok().map(InclusionMarks::from_curve),
            inclusion_observed: self
                .cumulative_inclusion_observed()
                .ok()
                .as_ref()
                .map(InclusionMarks::from_curve),
            block_intervals: self.block_interval_stats().ok(),
            missing_figures: Vec::new(),
            reference: ReferenceValues::default(),
        })
    }
}

pub const PROPAGATION_CSV: &str = "propagation_curves.csv";
pub const DELAY_SECONDS_CSV: &str = "delay_hist_seconds.csv";
pub const DELAY_BLOCKS_CSV: &str = "delay_hist_blocks.csv";
pub const CUMULATIVE_COUNT_CSV: &str = "cumulative_count.csv";
pub const CUMULATIVE_VALUE_CSV: &str = "cumulative_value.csv";
pub const VALUE_VS_DELAY_CSV: &str = "value_vs_delay.csv";
pub const FEE_VS_DELAY_CSV: &str = "fee_vs_delay.csv";
pub const TX_PER_BLOCK_CSV: &str = "tx_per_block.csv";
pub const TX_RATE_CSV: &str = "tx_per_hour.csv";
pub const SUMMARY_JSON: &str = "summary.json";

pub const FIGURE_FILES: [&str; 8] = [
    PROPAGATION_CSV,
    DELAY_SECONDS_CSV,
    DELAY_BLOCKS_CSV,
    CUMULATIVE_COUNT_CSV,
    CUMULATIVE_VALUE_CSV,
    VALUE_VS_DELAY_CSV,
    FEE_VS_DELAY_CSV,
    TX_PER_BLOCK_CSV,
];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

fn write_propagation(dir: &Path, p: &PropagationSummary) -> Result<PathBuf> {
    let path = dir.join(PROPAGATION_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record(["series", "t_s", "count", "fraction"])?;
    for (i, &t) in p.grid_s.iter().enumerate() {
        w.write_record(["mean".into(), t.to_string(), p.mean[i].to_string(), p.mean_fraction[i].to_string()])?;
        w.write_record(["p10".into(), t.to_string(), p.p10[i].to_string(), String::new()])?;
        w.write_record(["p90".into(), t.to_string(), p.p90[i].to_string(), String::new()])?;
    }
    for c in &p.curves {
        for &(dt, count) in &c.steps {
            w.write_record([
                c.hash.to_hex(),
                (dt as f64 / 1000.0).to_string(),
                count.to_string(),
                (count as f64 / c.active_peers.max(1) as f64).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(path)
}

fn write_histogram(dir: &Path, name: &str, h: &DelayHistogram) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = csv_writer(&path)?;
    w.write_record(["lower_edge", "count"])?;
    for &(lo, c) in &h.bins {
        w.write_record([lo.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_cumulative(dir: &Path, name: &str, grid: &[f64], fractions: &[f64]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = csv_writer(&path)?;
    w.write_record(["t_s", "fraction_included"])?;
    for (t, f) in grid.iter().zip(fractions) {
        w.write_record([t.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_groups(dir: &Path, name: &str, column: &str, groups: &[DelayGroup]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = csv_writer(&path)?;
    w.write_record(["delay_blocks", column, "count"])?;
    for g in groups {
        w.write_record([g.delay_blocks.to_string(), g.mean.to_string(), g.count.to_string()])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_rows<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = csv_writer(&path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(path)
}

#[derive(Clone, Debug, Default)]
pub struct AnalysisOutputs {
    pub files: Vec<PathBuf>,
    pub missing: Vec<MissingFigure>,
    pub summary: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingFigure {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FitOutcome {
    Fitted(FitResult),
    Unavailable { reason: String },
}

/// Cumulative inclusion read off at the marks quoted in the summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionMarks {
    pub transactions: usize,
    pub not_included_at_1h: f64,
    pub not_included_at_30d: f64,
    pub included_at_1h: f64,
    pub included_at_30d: f64,
    pub value_included_at_1h: f64,
    pub value_included_at_3h: f64,
    pub value_included_at_30d: f64,
}

impl InclusionMarks {
    pub fn from_curve(c: &CumulativeInclusion) -> Self {
        let at_1h = c.count_fraction_at(HOUR_S);
        let at_30d = c.count_fraction_at(30.0 * DAY_S);
        InclusionMarks {
            transactions: c.total(),
            not_included_at_1h: 1.0 - at_1h,
            not_included_at_30d: 1.0 - at_30d,
            included_at_1h: at_1h,
            included_at_30d: at_30d,
            value_included_at_1h: c.value_fraction_at(HOUR_S),
            value_included_at_3h: c.value_fraction_at(3.0 * HOUR_S),
            value_included_at_30d: c.value_fraction_at(30.0 * DAY_S),
        }
    }
}

/// Magnitudes measured on the 2016 network, for side-by-side display.
/// They describe one week of live traffic and cannot be re-measured here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub note: String,
    pub testable: bool,
    pub delta_seconds: f64,
    pub delta_blocks: f64,
    pub mean_block_interval_s: f64,
    pub median_block_interval_s: f64,
    pub min_block_interval_s: f64,
    pub propagation_fraction_at_1s: f64,
    pub propagation_fraction_at_10s: f64,
    pub not_included_at_1h: f64,
    pub not_included_at_30d: f64,
    pub value_included_at_3h: f64,
    pub value_included_at_30d: f64,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        ReferenceValues {
            note: "live Bitcoin network, 4-11 May 2016; reference magnitudes only, \
                   not testable against the live network"
                .into(),
            testable: false,
            delta_seconds: 2800.0,
            delta_blocks: 4.1,
            mean_block_interval_s: 550.05,
            median_block_interval_s: 383.25,
            min_block_interval_s: -5.48,
            propagation_fraction_at_1s: 0.10,
            propagation_fraction_at_10s: 0.60,
            not_included_at_1h: 0.43,
            not_included_at_30d: 0.20,
            value_included_at_3h: 0.93,
            value_included_at_30d: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub window: ListeningWindow,
    pub horizon_ms: Option<u64>,
    pub class_counts: BTreeMap<String, usize>,
    pub analysis_set_size: usize,
    pub excluded: ExclusionCounts,
    pub included: usize,
    pub censored: usize,
    pub fit_seconds: FitOutcome,
    pub fit_blocks: FitOutcome,
    pub inclusion_analysis_set: Option<InclusionMarks>,
    pub inclusion_observed: Option<InclusionMarks>,
    pub block_intervals: Option<BlockIntervalStats>,
    pub missing_figures: Vec<MissingFigure>,
    pub reference: ReferenceValues,
}

/// Distinct peers in a log, handy for normalising reach counts.
pub fn distinct_peers(log: &EventLog) -> usize {
    log.events()
        .iter()
        .map(|e| e.peer.as_str())
        .collect::<HashSet<_>>()
        .len()
}
