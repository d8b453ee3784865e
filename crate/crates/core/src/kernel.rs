//! Deterministic discrete-event engine: integer-nanosecond clock, ordered
//! future-event set and named pseudo-random substreams.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::KernelError;

pub const NS_PER_US: u64 = 1_000;
pub const NS_PER_MS: u64 = 1_000_000;
pub const NS_PER_SEC: u64 = 1_000_000_000;

/// Nanoseconds since simulation start on the controller reference clock.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * NS_PER_US)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * NS_PER_MS)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime((secs * NS_PER_SEC as f64).round() as u64)
    }

    pub const fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NS_PER_SEC as f64
    }

    /// `self - earlier`, or `None` when `earlier` is later than `self`.
    pub fn since(self, earlier: SimTime) -> Option<u64> {
        self.0.checked_sub(earlier.0)
    }

    pub fn saturating_sub_ns(self, ns: u64) -> SimTime {
        SimTime(self.0.saturating_sub(ns))
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, ns: u64) -> SimTime {
        SimTime(self.0 + ns)
    }
}

impl AddAssign<u64> for SimTime {
    fn add_assign(&mut self, ns: u64) {
        self.0 += ns;
    }
}

impl Sub<u64> for SimTime {
    type Output = SimTime;

    fn sub(self, ns: u64) -> SimTime {
        SimTime(self.0 - ns)
    }
}

/// Events report a small discriminant so the dispatch trace can be digested.
pub trait EventTag {
    fn tag(&self) -> u8;
}

/// Identifies one scheduled event; equal to its sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(pub u64);

struct Entry<E> {
    fire_at: SimTime,
    sequence: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.sequence == other.sequence
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.fire_at, self.sequence).cmp(&(other.fire_at, other.sequence))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Future-event set ordered by `(fire_at, sequence)`.
pub struct Scheduler<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    now: SimTime,
    next_sequence: u64,
    dispatched: u64,
    digest: u64,
    trace: Option<Vec<(SimTime, u8)>>,
}

impl<E: EventTag> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: EventTag> Scheduler<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::with_capacity(1024),
            now: SimTime::ZERO,
            next_sequence: 0,
            dispatched: 0,
            digest: FNV_OFFSET,
            trace: None,
        }
    }

    /// Keep the full `(fire_at, tag)` dispatch trace in memory. Off by default.
    pub fn record_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, fire_at: SimTime, event: E) -> Result<EventHandle, KernelError> {
        if fire_at < self.now {
            return Err(KernelError::ScheduleInPast {
                fire_at,
                now: self.now,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(Reverse(Entry {
            fire_at,
            sequence,
            event,
        }));
        Ok(EventHandle(sequence))
    }

    /// Removes the next event if it fires at or before `end`, advancing the clock to it.
    pub fn pop_until(&mut self, end: SimTime) -> Option<(SimTime, E)> {
        match self.heap.peek() {
            Some(Reverse(top)) if top.fire_at <= end => {}
            _ => return None,
        }
        let Reverse(entry) = self.heap.pop()?;
        self.now = entry.fire_at;
        self.dispatched += 1;
        let tag = entry.event.tag();
        for byte in entry
            .fire_at
            .as_ns()
            .to_le_bytes()
            .into_iter()
            .chain(std::iter::once(tag))
        {
            self.digest = (self.digest ^ byte as u64).wrapping_mul(FNV_PRIME);
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push((entry.fire_at, tag));
        }
        Some((entry.fire_at, entry.event))
    }

    /// Dispatches every event with `fire_at <= end` through `handler`, then sets the
    /// clock to `end`. Returns the number of events dispatched.
    pub fn run_until<F>(&mut self, end: SimTime, mut handler: F) -> Result<u64, KernelError>
    where
        F: FnMut(&mut Self, SimTime, E) -> Result<(), KernelError>,
    {
        let before = self.dispatched;
        while let Some((at, event)) = self.pop_until(end) {
            handler(self, at, event)?;
        }
        if end > self.now {
            self.now = end;
        }
        Ok(self.dispatched - before)
    }

    /// Moves the clock forward without dispatching.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    pub fn scheduled_count(&self) -> u64 {
        self.next_sequence
    }

    pub fn dispatched_count(&self) -> u64 {
        self.dispatched
    }

    /// FNV-1a digest over every dispatched `(fire_at, tag)` pair.
    pub fn trace_digest(&self) -> u64 {
        self.digest
    }

    pub fn trace(&self) -> Option<&[(SimTime, u8)]> {
        self.trace.as_deref()
    }
}

/// What a random substream is used for. Each `(purpose, a, b)` triple gets its own
/// generator so adding a source or multipath leaves the other draws unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamPurpose {
    Propagation = 1,
    BackloggedArrivals = 2,
    BackloggedSizes = 3,
    PriorityArrivals = 4,
    PriorityDurations = 5,
    InitialPopulation = 6,
    GrantDelivery = 7,
    ScanCursor = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A named, independently seeded pseudo-random substream.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, purpose: StreamPurpose, a: u64, b: u64) -> Self {
        let mut key = splitmix64(seed);
        key = splitmix64(key ^ purpose as u64);
        key = splitmix64(key ^ a.wrapping_mul(0x0100_0000_01b3));
        key = splitmix64(key ^ b.wrapping_mul(0x5851_f42d_4c95_7f2d));
        Self {
            rng: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Uniform on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        let bits: u64 = self.rng.random();
        ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Inverse-CDF exponential sample; strictly positive.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        debug_assert!(mean > 0.0);
        -mean * self.open01().ln()
    }

    /// Uniform on `[lo, hi]`; returns `lo` when the interval is degenerate.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        if lo == hi {
            return lo;
        }
        lo + (hi - lo) * self.open01()
    }

    /// Uniform integer on the inclusive range `[lo, hi]`.
    pub fn uniform_u64(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        self.rng.random_range(lo..=hi)
    }

    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let dist = Poisson::new(mean).expect("poisson mean is positive and finite");
        dist.sample(&mut self.rng) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    struct Tick(u8);

    impl EventTag for Tick {
        fn tag(&self) -> u8 {
            self.0
        }
    }

    #[test]
    fn event_at_zero_dispatches_first() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_ns(10), Tick(1)).unwrap();
        s.schedule(SimTime::ZERO, Tick(0)).unwrap();
        assert_eq!(s.pop_until(SimTime::MAX).unwrap().1, Tick(0));
    }

    #[test]
    fn equal_times_dispatch_in_sequence_order() {
        let mut s = Scheduler::new();
        for k in 0..5 {
            s.schedule(SimTime::from_ns(50), Tick(k)).unwrap();
        }
        let h5 = s.schedule(SimTime::from_ns(100), Tick(5)).unwrap();
        let h6 = s.schedule(SimTime::from_ns(100), Tick(6)).unwrap();
        assert_eq!((h5.0, h6.0), (5, 6));
        let order: Vec<u8> =
            std::iter::from_fn(|| s.pop_until(SimTime::MAX).map(|e| e.1 .0)).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_ns(10), Tick(0)).unwrap();
        s.pop_until(SimTime::MAX);
        let err = s.schedule(SimTime::from_ns(5), Tick(1)).unwrap_err();
        assert!(matches!(err, KernelError::ScheduleInPast { .. }));
    }

    #[test]
    fn run_until_counts_and_sets_clock() {
        let mut s: Scheduler<Tick> = Scheduler::new();
        assert_eq!(
            s.run_until(SimTime::from_ms(1000), |_, _, _| Ok(()))
                .unwrap(),
            0
        );
        assert_eq!(s.now(), SimTime::from_ms(1000));

        let mut s = Scheduler::new();
        for t in [10, 20, 30, 40] {
            s.schedule(SimTime::from_ns(t), Tick(0)).unwrap();
        }
        let n = s.run_until(SimTime::from_ns(35), |_, _, _| Ok(())).unwrap();
        assert_eq!(n, 3);
        assert_eq!(s.now(), SimTime::from_ns(35));
        assert_eq!(s.pending(), 1);
        assert_eq!(
            s.scheduled_count(),
            s.dispatched_count() + s.pending() as u64
        );
    }

    #[test]
    fn handler_may_schedule_follow_ups() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::ZERO, Tick(0)).unwrap();
        let n = s
            .run_until(SimTime::from_ns(100), |s, at, Tick(k)| {
                if k < 9 {
                    s.schedule(at + 10, Tick(k + 1))?;
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(n, 10);
    }

    #[test]
    fn uniform_degenerate_interval() {
        let mut r = RngStream::new(1, StreamPurpose::Propagation, 0, 0);
        assert_eq!(r.uniform(0.0, 0.0), 0.0);
    }

    #[test]
    fn exponential_mean_within_one_percent() {
        let mut r = RngStream::new(42, StreamPurpose::BackloggedSizes, 3, 4);
        let mean = 10e6;
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = r.exponential(mean);
            assert!(x > 0.0);
            sum += x;
        }
        let m = sum / n as f64;
        assert!((m - mean).abs() / mean < 0.01, "sample mean {m}");
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let draw = |a| {
            let mut r = RngStream::new(7, StreamPurpose::PriorityArrivals, a, 0);
            (0..4).map(|_| r.open01()).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }
}
