//! Poisson flow arrivals per (source, multipath) cell.
//!
//! Backlogged flows carry an exponentially sized backlog that is queued in full on
//! arrival. Priority flows emit constant-size packets at a fixed intrinsic rate for an
//! exponentially distributed lifetime.

use crate::kernel::{RngStream, SimTime, StreamPurpose, NS_PER_SEC};
use crate::model::ClusterScenario;

/// Mean backlogged flow size, bytes.
pub const BACKLOGGED_MEAN_SIZE: f64 = 10e6;
/// Intrinsic rate of a priority flow, bits/s.
pub const PRIORITY_RATE: u64 = 2_000_000;
/// Mean priority flow lifetime, seconds.
pub const PRIORITY_MEAN_DURATION: f64 = 30.0;

/// Mean priority flow size in bytes: `rate * E[duration] / 8`.
pub fn priority_mean_size() -> f64 {
    PRIORITY_RATE as f64 * PRIORITY_MEAN_DURATION / 8.0
}

/// Flow arrival rates of one cell, flows per second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalRates {
    pub backlogged: f64,
    pub priority: f64,
}

/// Splits demand `a_ij` (bits/s) into per-class Poisson rates.
pub fn arrival_rates(demand: f64, backlogged_fraction: f64) -> ArrivalRates {
    ArrivalRates {
        backlogged: backlogged_fraction * demand / (8.0 * BACKLOGGED_MEAN_SIZE),
        priority: (1.0 - backlogged_fraction) * demand / (8.0 * priority_mean_size()),
    }
}

/// A priority flow already in progress when the run starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualFlow {
    pub first_packet_at: SimTime,
    pub packets: u64,
}

struct Cell {
    rates: ArrivalRates,
    backlogged_arrivals: RngStream,
    backlogged_sizes: RngStream,
    priority_arrivals: RngStream,
    priority_durations: RngStream,
    initial: RngStream,
}

pub struct TrafficGenerator {
    cells: Vec<Cell>,
    n_multipaths: usize,
    packet_interval_ns: u64,
}

impl TrafficGenerator {
    pub fn new(s: &ClusterScenario) -> Self {
        let mut cells = Vec::with_capacity(s.n_sources * s.n_multipaths);
        for i in 0..s.n_sources {
            for j in 0..s.n_multipaths {
                let (a, b) = (i as u64, j as u64);
                cells.push(Cell {
                    rates: arrival_rates(s.demand[i][j], s.backlogged_fraction),
                    backlogged_arrivals: RngStream::new(
                        s.seed,
                        StreamPurpose::BackloggedArrivals,
                        a,
                        b,
                    ),
                    backlogged_sizes: RngStream::new(s.seed, StreamPurpose::BackloggedSizes, a, b),
                    priority_arrivals: RngStream::new(
                        s.seed,
                        StreamPurpose::PriorityArrivals,
                        a,
                        b,
                    ),
                    priority_durations: RngStream::new(
                        s.seed,
                        StreamPurpose::PriorityDurations,
                        a,
                        b,
                    ),
                    initial: RngStream::new(s.seed, StreamPurpose::InitialPopulation, a, b),
                });
            }
        }
        Self {
            cells,
            n_multipaths: s.n_multipaths,
            packet_interval_ns: s.packet_size * 8 * NS_PER_SEC / PRIORITY_RATE,
        }
    }

    fn cell(&mut self, source: usize, multipath: usize) -> &mut Cell {
        &mut self.cells[source * self.n_multipaths + multipath]
    }

    pub fn rates(&self, source: usize, multipath: usize) -> ArrivalRates {
        self.cells[source * self.n_multipaths + multipath].rates
    }

    /// Spacing of a priority flow's packets, ns.
    pub fn packet_interval(&self) -> u64 {
        self.packet_interval_ns
    }

    fn next_after(now: SimTime, rate: f64, rng: &mut RngStream) -> Option<SimTime> {
        if rate <= 0.0 {
            return None;
        }
        let gap = rng.exponential(1.0 / rate);
        Some(now + (gap * NS_PER_SEC as f64).round() as u64)
    }

    pub fn next_backlogged_arrival(
        &mut self,
        source: usize,
        multipath: usize,
        now: SimTime,
    ) -> Option<SimTime> {
        let cell = self.cell(source, multipath);
        Self::next_after(now, cell.rates.backlogged, &mut cell.backlogged_arrivals)
    }

    pub fn next_priority_arrival(
        &mut self,
        source: usize,
        multipath: usize,
        now: SimTime,
    ) -> Option<SimTime> {
        let cell = self.cell(source, multipath);
        Self::next_after(now, cell.rates.priority, &mut cell.priority_arrivals)
    }

    /// Backlogged flow size in whole bytes, at least one.
    pub fn backlogged_size(&mut self, source: usize, multipath: usize) -> u64 {
        let x = self
            .cell(source, multipath)
            .backlogged_sizes
            .exponential(BACKLOGGED_MEAN_SIZE);
        (x.ceil() as u64).max(1)
    }

    fn packets_for(&self, duration_s: f64) -> u64 {
        (duration_s * NS_PER_SEC as f64 / self.packet_interval_ns as f64).round() as u64
    }

    /// Number of packets a new priority flow will emit; zero for lifetimes shorter
    /// than half a packet interval.
    pub fn priority_packets(&mut self, source: usize, multipath: usize) -> u64 {
        let d = self
            .cell(source, multipath)
            .priority_durations
            .exponential(PRIORITY_MEAN_DURATION);
        self.packets_for(d)
    }

    /// Priority flows alive at time zero, drawn from the stationary population so the
    /// priority load is at its long-run level from the start.
    pub fn initial_priority_flows(&mut self, source: usize, multipath: usize) -> Vec<ResidualFlow> {
        let interval = self.packet_interval_ns;
        let mean_population = self.rates(source, multipath).priority * PRIORITY_MEAN_DURATION;
        let cell = self.cell(source, multipath);
        let k = cell.initial.poisson(mean_population);
        let draws: Vec<(f64, u64)> = (0..k)
            .map(|_| {
                let residual = cell.initial.exponential(PRIORITY_MEAN_DURATION);
                let phase = cell.initial.uniform_u64(0, interval - 1);
                (residual, phase)
            })
            .collect();
        draws
            .into_iter()
            .map(|(residual, phase)| ResidualFlow {
                first_packet_at: SimTime::from_ns(phase),
                packets: self.packets_for(residual),
            })
            .collect()
    }
}
