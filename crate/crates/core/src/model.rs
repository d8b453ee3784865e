//! Domain types and the scenario configuration shared by every module.

use std::fmt;

use crate::kernel::{RngStream, SimTime, StreamPurpose, NS_PER_MS, NS_PER_SEC, NS_PER_US};

pub const KB: u64 = 1_000;
pub const MB: u64 = 1_000_000;

/// Transmission time of `bytes` at `rate` bits/s, rounded up to whole nanoseconds.
pub fn tx_time_ns(bytes: u64, rate: u64) -> u64 {
    let bits = bytes as u128 * 8 * NS_PER_SEC as u128;
    bits.div_ceil(rate as u128) as u64
}

/// Whole bytes that fit in `duration_ns` at `rate` bits/s.
pub fn capacity_bytes(duration_ns: u64, rate: u64) -> u64 {
    (duration_ns as u128 * rate as u128 / (8 * NS_PER_SEC as u128)) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Coordinated,
    Uncoordinated,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Coordinated => "coordinated",
            Mode::Uncoordinated => "uncoordinated",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coordinated" => Ok(Mode::Coordinated),
            "uncoordinated" => Ok(Mode::Uncoordinated),
            other => Err(format!(
                "expected `coordinated` or `uncoordinated`, got `{other}`"
            )),
        }
    }
}

/// One-way controller-to-source propagation delays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Propagation {
    /// Each source draws its delay uniformly from `(0, max_ns]` using the run seed.
    Uniform { max_ns: u64 },
    /// Explicit per-source delays in ns.
    Fixed(Vec<u64>),
}

impl Propagation {
    pub fn max_ns(&self) -> u64 {
        match self {
            Propagation::Uniform { max_ns } => *max_ns,
            Propagation::Fixed(v) => v.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Full parameterization of one source cluster and its controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScenario {
    pub n_sources: usize,
    pub n_multipaths: usize,
    /// Multipath wavelength rate, bits/s.
    pub channel_rate: u64,
    /// Gap between consecutive bursts on a multipath, ns.
    pub guard_time: u64,
    /// Lead between grant formulation and burst arrival at the root, ns.
    pub offset: u64,
    /// Bound on grant signalling delay plus timing error, ns.
    pub max_grant_delay: u64,
    pub one_way_prop: Propagation,
    /// Tunable transmitters per source.
    pub transmitters: Vec<u32>,
    /// `demand[i][j]`: offered bits/s from source `i` on multipath `j`.
    pub demand: Vec<Vec<f64>>,
    pub backlogged_fraction: f64,
    pub quantum: u64,
    pub packet_size: u64,
    pub report_size: u64,
    /// Control channel rate, bits/s.
    pub control_rate: u64,
    /// Upper bound on a single grant duration, ns.
    pub grant_cap: u64,
    pub mode: Mode,
    pub sim_duration: SimTime,
    pub warmup: SimTime,
    pub seed: u64,
}

impl ClusterScenario {
    /// `n` sources sharing `m` multipaths with the reference parameter set and zero demand.
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n_sources: n,
            n_multipaths: m,
            channel_rate: 10_000_000_000,
            guard_time: 100,
            offset: 2 * NS_PER_MS,
            max_grant_delay: NS_PER_MS,
            one_way_prop: Propagation::Uniform {
                max_ns: NS_PER_MS / 2,
            },
            transmitters: vec![1; n],
            demand: vec![vec![0.0; m]; n],
            backlogged_fraction: 1.0,
            quantum: KB,
            packet_size: KB,
            report_size: 128,
            control_rate: 1_000_000_000,
            grant_cap: 100 * NS_PER_US,
            mode: Mode::Coordinated,
            sim_duration: SimTime::from_ms(12_000),
            warmup: SimTime::from_ms(2_000),
            seed: 1,
        }
    }

    /// Replaces the demand matrix with symmetric demand at multipath load `load`.
    pub fn with_load(mut self, load: f64) -> Self {
        self.demand = symmetric_demand(self.n_sources, self.n_multipaths, load, self.channel_rate);
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_backlogged_fraction(mut self, f: f64) -> Self {
        self.backlogged_fraction = f;
        self
    }

    pub fn with_horizon(mut self, warmup: SimTime, measured: SimTime) -> Self {
        self.warmup = warmup;
        self.sim_duration = warmup + measured.as_ns();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Mean multipath load `sum_i a_ij / C`, averaged over multipaths.
    pub fn load(&self) -> f64 {
        if self.n_multipaths == 0 {
            return 0.0;
        }
        let total: f64 = self.demand.iter().flatten().sum();
        total / self.n_multipaths as f64 / self.channel_rate as f64
    }

    /// Aggregate offered bytes per second over all cells.
    pub fn offered_byte_rate(&self) -> f64 {
        self.demand.iter().flatten().sum::<f64>() / 8.0
    }

    /// Per-source one-way delays for this run: explicit, or drawn from the seed.
    pub fn resolve_propagation(&self) -> Vec<u64> {
        match &self.one_way_prop {
            Propagation::Fixed(v) => v.clone(),
            Propagation::Uniform { max_ns } => (0..self.n_sources)
                .map(|i| {
                    if *max_ns == 0 {
                        0
                    } else {
                        RngStream::new(self.seed, StreamPurpose::Propagation, i as u64, 0)
                            .uniform_u64(1, *max_ns)
                    }
                })
                .collect(),
        }
    }

    /// Returns every violated invariant; empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let (n, m) = (self.n_sources, self.n_multipaths);
        if n == 0 {
            v.push(Violation::NotPositive("n_sources"));
        }
        if m == 0 {
            v.push(Violation::NotPositive("n_multipaths"));
        }
        for (name, value) in [
            ("channel_rate", self.channel_rate),
            ("guard_time", self.guard_time),
            ("offset", self.offset),
            ("max_grant_delay", self.max_grant_delay),
            ("quantum", self.quantum),
            ("packet_size", self.packet_size),
            ("report_size", self.report_size),
            ("control_rate", self.control_rate),
            ("grant_cap", self.grant_cap),
            ("sim_duration", self.sim_duration.as_ns()),
        ] {
            if value == 0 {
                v.push(Violation::NotPositive(name));
            }
        }
        if !(0.0..=1.0).contains(&self.backlogged_fraction) {
            v.push(Violation::FractionOutOfRange(self.backlogged_fraction));
        }
        if self.warmup >= self.sim_duration {
            v.push(Violation::WarmupNotBeforeEnd);
        }
        if let Propagation::Fixed(p) = &self.one_way_prop {
            if p.len() != n {
                v.push(Violation::Shape {
                    field: "one_way_prop",
                    expected: n,
                    found: p.len(),
                });
            }
        }
        if self.transmitters.len() != n {
            v.push(Violation::Shape {
                field: "transmitters",
                expected: n,
                found: self.transmitters.len(),
            });
        } else if self.transmitters.contains(&0) {
            v.push(Violation::NotPositive("transmitters"));
        }
        if self.demand.len() != n || self.demand.iter().any(|row| row.len() != m) {
            v.push(Violation::Shape {
                field: "demand",
                expected: n * m,
                found: self.demand.iter().map(Vec::len).sum(),
            });
        } else if self
            .demand
            .iter()
            .flatten()
            .any(|a| !a.is_finite() || *a < 0.0)
        {
            v.push(Violation::NegativeDemand);
        }
        let max_rtt = 2 * self.one_way_prop.max_ns();
        if self.offset < max_rtt + self.max_grant_delay {
            v.push(Violation::OffsetTooSmall {
                offset: self.offset,
                max_rtt,
                max_grant_delay: self.max_grant_delay,
            });
        }
        if self.mode == Mode::Coordinated {
            let total: u64 = self.transmitters.iter().map(|&t| t as u64).sum();
            if total < m as u64 {
                v.push(Violation::TooFewTransmitters {
                    total,
                    multipaths: m,
                });
            }
        }
        v
    }
}

/// `a_ij = load * C / N` for every cell, so each multipath carries `load`.
pub fn symmetric_demand(n: usize, m: usize, load: f64, channel_rate: u64) -> Vec<Vec<f64>> {
    let cell = load * channel_rate as f64 / n as f64;
    vec![vec![cell; m]; n]
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotPositive(&'static str),
    FractionOutOfRange(f64),
    WarmupNotBeforeEnd,
    Shape {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    NegativeDemand,
    OffsetTooSmall {
        offset: u64,
        max_rtt: u64,
        max_grant_delay: u64,
    },
    TooFewTransmitters {
        total: u64,
        multipaths: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotPositive(field) => write!(f, "`{field}` must be positive"),
            Violation::FractionOutOfRange(x) => {
                write!(f, "backlogged_fraction {x} is outside [0, 1]")
            }
            Violation::WarmupNotBeforeEnd => write!(f, "warmup must end before sim_duration"),
            Violation::Shape {
                field,
                expected,
                found,
            } => write!(f, "`{field}` needs {expected} entries, found {found}"),
            Violation::NegativeDemand => write!(f, "demand entries must be finite and non-negative"),
            Violation::OffsetTooSmall {
                offset,
                max_rtt,
                max_grant_delay,
            } => write!(
                f,
                "offset {offset} ns is below max rtt {max_rtt} ns + max grant delay {max_grant_delay} ns"
            ),
            Violation::TooFewTransmitters { total, multipaths } => write!(
                f,
                "coordinated mode needs at least {multipaths} transmitters in total, have {total}"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowClass {
    Backlogged,
    Priority,
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub id: FlowId,
    pub class: FlowClass,
    /// Bytes in the flow once fully generated.
    pub size: u64,
    /// Intrinsic rate for priority flows, bits/s.
    pub rate: Option<u64>,
    pub arrival: SimTime,
    /// Emission time of the first packet (priority flows).
    pub first_packet_at: SimTime,
    pub bytes_injected: u64,
    pub bytes_delivered: u64,
    pub completion: Option<SimTime>,
    pub source: usize,
    pub multipath: usize,
}

impl Flow {
    pub fn is_complete(&self) -> bool {
        self.completion.is_some()
    }
}

/// Demand snapshot sent by one source for one multipath.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Report {
    pub source: usize,
    pub multipath: usize,
    pub backlogged_count: u32,
    pub priority_bytes: u64,
    /// Source-local send time (t2).
    pub sent_at_local: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub multipath: usize,
    pub source: usize,
    /// Formulation epoch on the controller clock.
    pub formulated: SimTime,
    /// Start time on the source's local clock.
    pub start_local: SimTime,
    /// Slot duration, ns.
    pub duration: u64,
    pub index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fragment {
    pub flow: FlowId,
    pub class: FlowClass,
    /// Byte offset of this fragment within the flow's byte stream.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Burst {
    pub source: usize,
    pub multipath: usize,
    pub emit_local: SimTime,
    /// Reserved slot duration, ns.
    pub duration: u64,
    pub fragments: Vec<Fragment>,
}

impl Burst {
    pub fn payload_bytes(&self) -> u64 {
        self.fragments.iter().map(|f| f.len).sum()
    }
}
