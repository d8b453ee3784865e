//! Run measurements: flow throughput, priority packet delay, root utilization,
//! blocked grants, the queue-trend stability test and CSV output.

use std::fmt;
use std::io::Write;

use crate::error::IntegrityFault;
use crate::kernel::{SimTime, NS_PER_MS, NS_PER_SEC, NS_PER_US};
use crate::model::Mode;
use crate::traffic::BACKLOGGED_MEAN_SIZE;

/// Thresholds of the queue-trend test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityThresholds {
    /// Minimum queue growth rate, as a fraction of the offered byte rate.
    pub slope_fraction: f64,
    /// Minimum queued bytes at the end of the run.
    pub final_backlog: f64,
    pub min_samples: usize,
}

impl Default for StabilityThresholds {
    fn default() -> Self {
        Self {
            slope_fraction: 0.05,
            final_backlog: 10.0 * BACKLOGGED_MEAN_SIZE,
            min_samples: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    Unstable,
    /// Too few samples to decide.
    Withheld,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Withheld => "withheld",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub verdict: Verdict,
    /// Least-squares growth of total queued bytes, bytes/s.
    pub slope: f64,
    /// `slope` divided by the offered byte rate.
    pub slope_fraction: f64,
    pub final_backlog: u64,
}

/// Least-squares slope of `(t, y)` samples in y-units per second.
pub fn least_squares_slope(samples: &[(SimTime, u64)]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let mean_t = samples.iter().map(|(t, _)| t.as_secs_f64()).sum::<f64>() / n;
    let mean_y = samples.iter().map(|&(_, y)| y as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, y) in samples {
        let dt = t.as_secs_f64() - mean_t;
        sxy += dt * (y as f64 - mean_y);
        sxx += dt * dt;
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Queue-trend test on post-warmup samples of total queued bytes taken at uniform
/// intervals.
pub fn stability_verdict(
    samples: &[(SimTime, u64)],
    offered_byte_rate: f64,
    th: &StabilityThresholds,
) -> Stability {
    let slope = least_squares_slope(samples);
    let slope_fraction = if offered_byte_rate > 0.0 {
        slope / offered_byte_rate
    } else {
        0.0
    };
    let final_backlog = samples.last().map_or(0, |&(_, y)| y);
    let verdict = if samples.len() < th.min_samples {
        Verdict::Withheld
    } else if slope_fraction > th.slope_fraction && final_backlog as f64 > th.final_backlog {
        Verdict::Unstable
    } else {
        Verdict::Stable
    };
    Stability {
        verdict,
        slope,
        slope_fraction,
        final_backlog,
    }
}

/// Delay histogram with 1 µs bins up to 50 ms; larger values are kept exactly.
#[derive(Debug, Clone)]
pub struct DelayHistogram {
    bins: Vec<u64>,
    overflow: Vec<u64>,
    count: u64,
    sum_ns: u128,
}

const BIN_NS: u64 = NS_PER_US;
const HIST_SPAN_NS: u64 = 50 * NS_PER_MS;

impl Default for DelayHistogram {
    fn default() -> Self {
        Self {
            bins: vec![0; (HIST_SPAN_NS / BIN_NS) as usize],
            overflow: Vec::new(),
            count: 0,
            sum_ns: 0,
        }
    }
}

impl DelayHistogram {
    pub fn record(&mut self, ns: u64) {
        self.count += 1;
        self.sum_ns += ns as u128;
        match self.bins.get_mut((ns / BIN_NS) as usize) {
            Some(b) => *b += 1,
            None => self.overflow.push(ns),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean_ns(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_ns as f64 / self.count as f64)
    }

    /// Upper edge of the bin holding the `q` quantile (exact beyond the binned span).
    pub fn quantile_ns(&mut self, q: f64) -> Option<u64> {
        if self.count == 0 {
            return None;
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0;
        for (k, &c) in self.bins.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Some((k as u64 + 1) * BIN_NS);
            }
        }
        self.overflow.sort_unstable();
        Some(self.overflow[(rank - seen - 1) as usize])
    }
}

/// Per-multipath root time inside the measurement window, ns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RootTime {
    /// Reserved slot time.
    pub slot: u64,
    /// Slot time actually carrying payload.
    pub payload: u64,
    pub guard: u64,
}

fn overlap(a: u64, b: u64, lo: u64, hi: u64) -> u64 {
    b.min(hi).saturating_sub(a.max(lo))
}

/// Everything a run measures, computed from post-warmup samples only.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub scenario_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub n_sources: usize,
    pub n_multipaths: usize,
    pub load: f64,
    pub backlogged_fraction: f64,
    pub completed_flows: u64,
    pub in_progress_flows: u64,
    /// Mean size of the counted backlogged flows, bytes.
    pub mean_flow_size: f64,
    /// Mean response time of the counted backlogged flows, s.
    pub mean_response_time: f64,
    /// Ratio of means: `8 * mean_flow_size / mean_response_time`, bits/s.
    pub throughput_bps: f64,
    /// Mean of per-flow `8 * size / response` ratios, bits/s.
    pub mean_flow_throughput_bps: f64,
    pub priority_packets: u64,
    pub priority_delay_mean: f64,
    pub priority_delay_p50: f64,
    pub priority_delay_p99: f64,
    /// Mean wait from enqueue until the next report of the pair is sent, s.
    pub delay_report_wait: f64,
    /// Mean one-way source-controller propagation of delivered packets, s.
    pub delay_propagation: f64,
    /// Mean delay not explained by the two terms above, s.
    pub delay_residual: f64,
    pub utilization: Vec<f64>,
    /// Fraction of root time reserved by slots, averaged over multipaths.
    pub slot_fraction: f64,
    /// Fraction of root time spent in guard intervals, averaged over multipaths.
    pub guard_fraction: f64,
    /// Grants formulated, blocked ones included.
    pub grants: u64,
    /// Mean slot duration of issued grants, ns.
    pub mean_grant_ns: f64,
    pub blocked_grants: u64,
    pub stability: Stability,
    pub events: u64,
    pub trace_digest: u64,
}

impl RunMetrics {
    pub fn mean_utilization(&self) -> f64 {
        if self.utilization.is_empty() {
            return 0.0;
        }
        self.utilization.iter().sum::<f64>() / self.utilization.len() as f64
    }
}

/// Accumulates run samples and folds them into [`RunMetrics`].
#[derive(Debug, Clone)]
pub struct MetricsCollector {
    warmup: SimTime,
    end: SimTime,
    guard: u64,
    flows: u64,
    flow_bytes: u128,
    flow_response_ns: u128,
    flow_ratio_sum: f64,
    delays: DelayHistogram,
    report_wait_ns: u128,
    propagation_ns: u128,
    root: Vec<RootTime>,
    queue_samples: Vec<(SimTime, u64)>,
}

impl MetricsCollector {
    pub fn new(warmup: SimTime, end: SimTime, n_multipaths: usize, guard: u64) -> Self {
        Self {
            warmup,
            end,
            guard,
            flows: 0,
            flow_bytes: 0,
            flow_response_ns: 0,
            flow_ratio_sum: 0.0,
            delays: DelayHistogram::default(),
            report_wait_ns: 0,
            propagation_ns: 0,
            root: vec![RootTime::default(); n_multipaths],
            queue_samples: Vec::new(),
        }
    }

    pub fn in_window(&self, t: SimTime) -> bool {
        t >= self.warmup && t <= self.end
    }

    /// A backlogged flow of `size` bytes that arrived at `arrival` and completed at
    /// `completion`. Only flows arriving after warmup count.
    pub fn record_flow(
        &mut self,
        size: u64,
        arrival: SimTime,
        completion: SimTime,
    ) -> Result<(), IntegrityFault> {
        let response = completion
            .since(arrival)
            .ok_or(IntegrityFault::NegativeDuration {
                what: "flow response time",
            })?;
        if arrival < self.warmup || completion > self.end {
            return Ok(());
        }
        self.flows += 1;
        self.flow_bytes += size as u128;
        self.flow_response_ns += response as u128;
        if response > 0 {
            self.flow_ratio_sum += 8.0 * size as f64 * NS_PER_SEC as f64 / response as f64;
        }
        Ok(())
    }

    /// A priority packet enqueued at `enqueued` whose final byte left the source at
    /// `delivered`, with the two delay components attributed to it.
    pub fn record_priority_packet(
        &mut self,
        enqueued: SimTime,
        delivered: SimTime,
        report_wait: u64,
        propagation: u64,
    ) -> Result<(), IntegrityFault> {
        let delay = delivered
            .since(enqueued)
            .ok_or(IntegrityFault::NegativeDuration {
                what: "priority packet delay",
            })?;
        if enqueued < self.warmup || delivered > self.end {
            return Ok(());
        }
        self.delays.record(delay);
        self.report_wait_ns += report_wait as u128;
        self.propagation_ns += propagation as u128;
        Ok(())
    }

    /// A burst reaching the root of `multipath` at `arrival` with a slot of `slot` ns
    /// of which `payload` ns carry data; the guard time follows it.
    pub fn record_burst(&mut self, multipath: usize, arrival: SimTime, slot: u64, payload: u64) {
        let (lo, hi) = (self.warmup.as_ns(), self.end.as_ns());
        let a = arrival.as_ns();
        let r = &mut self.root[multipath];
        r.slot += overlap(a, a + slot, lo, hi);
        r.payload += overlap(a, a + payload, lo, hi);
        r.guard += overlap(a + slot, a + slot + self.guard, lo, hi);
    }

    pub fn record_queue(&mut self, t: SimTime, queued_bytes: u64) {
        if self.in_window(t) {
            self.queue_samples.push((t, queued_bytes));
        }
    }

    pub fn queue_samples(&self) -> &[(SimTime, u64)] {
        &self.queue_samples
    }

    pub fn root_time(&self) -> &[RootTime] {
        &self.root
    }

    /// Checks that slot plus guard time fits in the window of every multipath and
    /// returns the idle time of each.
    pub fn idle_time(&self) -> Result<Vec<u64>, IntegrityFault> {
        let elapsed = self.end.since(self.warmup).unwrap_or(0);
        self.root
            .iter()
            .enumerate()
            .map(|(j, r)| {
                elapsed
                    .checked_sub(r.slot + r.guard)
                    .filter(|_| r.payload <= r.slot)
                    .ok_or(IntegrityFault::RootAccounting { multipath: j })
            })
            .collect()
    }

    /// Fills the measurement fields of `out`.
    pub fn finish(
        &mut self,
        out: &mut RunMetrics,
        offered_byte_rate: f64,
        th: &StabilityThresholds,
    ) {
        let elapsed = self.end.since(self.warmup).unwrap_or(0).max(1) as f64;
        out.completed_flows = self.flows;
        if self.flows > 0 {
            out.mean_flow_size = self.flow_bytes as f64 / self.flows as f64;
            out.mean_response_time =
                self.flow_response_ns as f64 / self.flows as f64 / NS_PER_SEC as f64;
            out.throughput_bps = if out.mean_response_time > 0.0 {
                8.0 * out.mean_flow_size / out.mean_response_time
            } else {
                0.0
            };
            out.mean_flow_throughput_bps = self.flow_ratio_sum / self.flows as f64;
        }
        let packets = self.delays.count();
        out.priority_packets = packets;
        if packets > 0 {
            let s = |ns: f64| ns / NS_PER_SEC as f64;
            out.priority_delay_mean = s(self.delays.mean_ns().unwrap_or(0.0));
            out.priority_delay_p50 = s(self.delays.quantile_ns(0.5).unwrap_or(0) as f64);
            out.priority_delay_p99 = s(self.delays.quantile_ns(0.99).unwrap_or(0) as f64);
            out.delay_report_wait = s(self.report_wait_ns as f64 / packets as f64);
            out.delay_propagation = s(self.propagation_ns as f64 / packets as f64);
            out.delay_residual =
                out.priority_delay_mean - out.delay_report_wait - out.delay_propagation;
        }
        out.utilization = self
            .root
            .iter()
            .map(|r| r.payload as f64 / elapsed)
            .collect();
        let m = self.root.len().max(1) as f64;
        out.slot_fraction = self
            .root
            .iter()
            .map(|r| r.slot as f64 / elapsed)
            .sum::<f64>()
            / m;
        out.guard_fraction = self
            .root
            .iter()
            .map(|r| r.guard as f64 / elapsed)
            .sum::<f64>()
            / m;
        out.stability = stability_verdict(&self.queue_samples, offered_byte_rate, th);
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "scenario_hash",
    "seed",
    "mode",
    "n",
    "m",
    "load",
    "backlogged_fraction",
    "throughput_bps",
    "priority_delay_ms_mean",
    "priority_delay_ms_p99",
    "utilization",
    "blocked_grants",
    "verdict",
];

impl RunMetrics {
    pub fn csv_record(&self) -> [String; 13] {
        let ms = |s: f64| format!("{:.6}", s * 1e3);
        [
            self.scenario_hash.clone(),
            self.seed.to_string(),
            self.mode.to_string(),
            self.n_sources.to_string(),
            self.n_multipaths.to_string(),
            format!("{:.4}", self.load),
            format!("{:.4}", self.backlogged_fraction),
            format!("{:.0}", self.throughput_bps),
            ms(self.priority_delay_mean),
            ms(self.priority_delay_p99),
            format!("{:.6}", self.mean_utilization()),
            self.blocked_grants.to_string(),
            self.stability.verdict.to_string(),
        ]
    }
}

/// Writes the header and one row per run.
pub fn write_csv<W: Write>(out: W, runs: &[RunMetrics]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
