//! The multipath controller: ranging, report aggregation, grant sizing, the grant-epoch
//! recursion and source selection.

use std::collections::VecDeque;

use crate::error::IntegrityFault;
use crate::kernel::{RngStream, SimTime, StreamPurpose, NS_PER_SEC};
use crate::model::{capacity_bytes, tx_time_ns, ClusterScenario, Grant, Mode, Report};

/// Round-trip time from a report's local send time `t2` and its controller receive
/// time `t3`.
pub fn range(t2: SimTime, t3: SimTime) -> Result<u64, IntegrityFault> {
    t3.since(t2).ok_or(IntegrityFault::NegativeRtt { t2, t3 })
}

/// Next formulation epoch on a multipath: the previous burst plus one guard time.
pub fn next_grant_epoch(g_last: SimTime, d_last: u64, guard: u64) -> SimTime {
    g_last + d_last + guard
}

/// Source-local start time that makes a burst reach the root exactly `offset` after
/// formulation.
pub fn start_time(g: SimTime, offset: u64, rtt: u64) -> SimTime {
    debug_assert!(rtt <= offset + g.as_ns());
    SimTime::from_ns(g.as_ns() + offset - rtt)
}

/// Slot length for a demand of `priority_bytes` plus one quantum per backlogged flow,
/// capped at `cap`. Zero means no grant.
pub fn grant_size(
    backlogged_count: u32,
    priority_bytes: u64,
    quantum: u64,
    rate: u64,
    cap: u64,
) -> u64 {
    let bytes = priority_bytes + quantum * backlogged_count as u64;
    tx_time_ns(bytes, rate).min(cap)
}

/// Upstream report channel: one report slot per (source, multipath) pair per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlChannel {
    /// Report cycle, ns.
    pub cycle: u64,
    /// Bytes carried per cycle.
    pub cycle_bytes: u64,
    /// Upper bound on downstream grant delivery delay, ns.
    pub grant_delay_bound: u64,
    slots: u64,
}

impl ControlChannel {
    /// Receive time, on the controller clock, of the `k`-th report of pair `idx`.
    pub fn slot_receive_time(&self, idx: usize, k: u64) -> SimTime {
        SimTime::from_ns(self.slot_offset(idx) + k * self.cycle)
    }

    pub fn slot_offset(&self, idx: usize) -> u64 {
        (idx as u128 * self.cycle as u128 / self.slots as u128) as u64
    }

    /// Index of the first slot of pair `idx` received at or after `t`.
    pub fn first_slot_at_or_after(&self, idx: usize, t: SimTime) -> u64 {
        t.as_ns()
            .saturating_sub(self.slot_offset(idx))
            .div_ceil(self.cycle)
    }
}

pub fn control_channel_delays(s: &ClusterScenario) -> ControlChannel {
    let slots = (s.n_sources * s.n_multipaths) as u64;
    let cycle_bytes = s.report_size * slots;
    let cycle =
        (cycle_bytes as u128 * 8 * NS_PER_SEC as u128).div_ceil(s.control_rate as u128) as u64;
    ControlChannel {
        cycle,
        cycle_bytes,
        grant_delay_bound: s.max_grant_delay,
        slots,
    }
}

/// Demand the controller holds for one (source, multipath) pair.
#[derive(Debug, Default, Clone)]
pub struct PairDemand {
    /// Backlogged flows in the latest report; stands until the next report.
    pub backlogged_count: u32,
    /// Reported priority bytes not yet covered by an issued grant.
    pub priority_bytes: u64,
    /// Priority bytes of issued grants whose start time is still ahead: (s, bytes).
    outstanding: VecDeque<(SimTime, u64)>,
    outstanding_bytes: u64,
    last_report: Option<(u32, u64)>,
}

impl PairDemand {
    pub fn is_demanding(&self) -> bool {
        self.backlogged_count > 0 || self.priority_bytes > 0
    }

    fn absorb(&mut self, r: &Report) {
        while let Some(&(s, bytes)) = self.outstanding.front() {
            if s > r.sent_at_local {
                break;
            }
            self.outstanding.pop_front();
            self.outstanding_bytes -= bytes;
        }
        self.backlogged_count = r.backlogged_count;
        self.priority_bytes = r.priority_bytes.saturating_sub(self.outstanding_bytes);
        self.last_report = Some((r.backlogged_count, r.priority_bytes));
    }

    /// Content of the most recently absorbed report.
    pub fn last_report(&self) -> Option<(u32, u64)> {
        self.last_report
    }
}

#[derive(Debug, Clone)]
struct MultipathState {
    /// Earliest epoch the recursion allows for the next grant.
    next_epoch: SimTime,
    last: Option<(SimTime, u64)>,
    index: u64,
    /// A formulation event is pending at `next_epoch` or later.
    armed: bool,
    /// Pending formulation is a wait for a busy transmitter (can be pre-empted).
    waiting_until: Option<SimTime>,
    generation: u64,
    cursor: RngStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Grant(Grant),
    /// No source has demand; the multipath sleeps until a report wakes it.
    Idle,
    /// Sources have demand but every transmitter is busy; retry at the given epoch.
    WaitUntil(SimTime),
}

/// A formulation event the simulation must schedule: `(multipath, epoch, generation)`.
pub type Wake = (usize, SimTime, u64);

#[derive(Debug)]
pub struct Controller {
    n: usize,
    m: usize,
    guard: u64,
    offset: u64,
    quantum: u64,
    rate: u64,
    cap: u64,
    mode: Mode,
    rtt: Vec<Option<u64>>,
    demand: Vec<PairDemand>,
    multipaths: Vec<MultipathState>,
    /// Per source, per transmitter: local time the transmitter becomes free.
    free: Vec<Vec<SimTime>>,
}

impl Controller {
    pub fn new(s: &ClusterScenario) -> Self {
        let quantum_time = tx_time_ns(s.quantum, s.channel_rate);
        let multipaths = (0..s.n_multipaths)
            .map(|j| MultipathState {
                next_epoch: SimTime::from_ns(s.offset + j as u64 * (s.guard_time + quantum_time)),
                last: None,
                index: 0,
                armed: false,
                waiting_until: None,
                generation: 0,
                cursor: RngStream::new(s.seed, StreamPurpose::ScanCursor, j as u64, 0),
            })
            .collect();
        Self {
            n: s.n_sources,
            m: s.n_multipaths,
            guard: s.guard_time,
            offset: s.offset,
            quantum: s.quantum,
            rate: s.channel_rate,
            cap: s.grant_cap,
            mode: s.mode,
            rtt: vec![None; s.n_sources],
            demand: vec![PairDemand::default(); s.n_sources * s.n_multipaths],
            multipaths,
            free: s
                .transmitters
                .iter()
                .map(|&t| vec![SimTime::ZERO; t as usize])
                .collect(),
        }
    }

    /// First formulation event of every multipath, staggered by one quantum slot.
    pub fn bootstrap(&mut self) -> Vec<Wake> {
        self.multipaths
            .iter_mut()
            .enumerate()
            .map(|(j, mp)| {
                mp.armed = true;
                (j, mp.next_epoch, mp.generation)
            })
            .collect()
    }

    pub fn rtt(&self, source: usize) -> Option<u64> {
        self.rtt[source]
    }

    pub fn demand(&self, source: usize, multipath: usize) -> &PairDemand {
        &self.demand[source * self.m + multipath]
    }

    /// Transmitter free times of `source`, local clock.
    pub fn transmitter_free(&self, source: usize) -> &[SimTime] {
        &self.free[source]
    }

    pub fn last_grant(&self, multipath: usize) -> Option<(SimTime, u64)> {
        self.multipaths[multipath].last
    }

    /// Handles a report received at controller time `t3`: ranges the source, replaces
    /// its demand, and wakes the multipath if it was idle or waiting.
    pub fn on_report(&mut self, r: &Report, t3: SimTime) -> Result<Option<Wake>, IntegrityFault> {
        self.rtt[r.source] = Some(range(r.sent_at_local, t3)?);
        let pair = &mut self.demand[r.source * self.m + r.multipath];
        let was = pair.is_demanding();
        pair.absorb(r);
        if was || !pair.is_demanding() {
            return Ok(None);
        }
        let mp = &mut self.multipaths[r.multipath];
        let at = mp.next_epoch.max(t3);
        let wake = match (mp.armed, mp.waiting_until) {
            (false, _) => true,
            (true, Some(w)) => at < w,
            (true, None) => false,
        };
        if !wake {
            return Ok(None);
        }
        mp.generation += 1;
        mp.armed = true;
        mp.waiting_until = None;
        Ok(Some((r.multipath, at, mp.generation)))
    }

    /// Formulation event for multipath `j` at epoch `g`. Returns `None` for a stale
    /// event, otherwise the selection and, when the multipath stays active, the next
    /// formulation event to schedule.
    pub fn formulate(
        &mut self,
        j: usize,
        g: SimTime,
        generation: u64,
    ) -> Option<(Selection, Option<Wake>)> {
        if self.multipaths[j].generation != generation || !self.multipaths[j].armed {
            return None;
        }
        debug_assert!(g >= self.multipaths[j].next_epoch);
        let start = self.multipaths[j].cursor.uniform_u64(0, self.n as u64 - 1) as usize;
        let mut earliest: Option<SimTime> = None;
        let mut chosen = None;
        for k in 0..self.n {
            let i = (start + k) % self.n;
            if !self.demand[i * self.m + j].is_demanding() {
                continue;
            }
            let Some(rtt) = self.rtt[i] else { continue };
            if self.mode == Mode::Uncoordinated {
                chosen = Some((i, rtt, 0));
                break;
            }
            let s = start_time(g, self.offset, rtt);
            let (t, free) = argmin(&self.free[i]);
            if s >= free {
                chosen = Some((i, rtt, t));
                break;
            }
            // epoch at which this source's start time reaches its free transmitter
            let feasible = SimTime::from_ns((free.as_ns() + rtt).saturating_sub(self.offset));
            earliest = Some(earliest.map_or(feasible, |e| e.min(feasible)));
        }
        let mp = &mut self.multipaths[j];
        let Some((i, rtt, t)) = chosen else {
            if let Some(w) = earliest {
                let w = w.max(g + 1);
                mp.waiting_until = Some(w);
                return Some((Selection::WaitUntil(w), Some((j, w, mp.generation))));
            }
            mp.armed = false;
            mp.waiting_until = None;
            return Some((Selection::Idle, None));
        };
        let pair = &mut self.demand[i * self.m + j];
        let d = grant_size(
            pair.backlogged_count,
            pair.priority_bytes,
            self.quantum,
            self.rate,
            self.cap,
        );
        let s = start_time(g, self.offset, rtt);
        let capacity = capacity_bytes(d, self.rate);
        let covered = pair.priority_bytes.min(capacity);
        pair.priority_bytes -= covered;
        if covered > 0 {
            pair.outstanding.push_back((s, covered));
            pair.outstanding_bytes += covered;
        }
        if self.mode == Mode::Coordinated {
            self.free[i][t] = s + d + self.guard;
        }
        let grant = Grant {
            multipath: j,
            source: i,
            formulated: g,
            start_local: s,
            duration: d,
            index: mp.index,
        };
        mp.index += 1;
        mp.last = Some((g, d));
        mp.next_epoch = next_grant_epoch(g, d, self.guard);
        mp.waiting_until = None;
        Some((
            Selection::Grant(grant),
            Some((j, mp.next_epoch, mp.generation)),
        ))
    }
}

fn argmin(free: &[SimTime]) -> (usize, SimTime) {
    free.iter()
        .copied()
        .enumerate()
        .min_by_key(|&(_, f)| f)
        .expect("every source has a transmitter")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Propagation;

    const US: u64 = 1_000;
    const MS: u64 = 1_000_000;

    #[test]
    fn ranging() {
        assert_eq!(range(SimTime::from_ms(2), SimTime::from_ms(3)), Ok(MS));
        assert_eq!(range(SimTime::from_ms(2), SimTime::from_ms(2)), Ok(0));
        assert!(matches!(
            range(SimTime::from_ms(3), SimTime::from_ms(2)),
            Err(IntegrityFault::NegativeRtt { .. })
        ));
    }

    #[test]
    fn grant_epoch_recursion() {
        assert_eq!(
            next_grant_epoch(SimTime::ZERO, 800, 100),
            SimTime::from_ns(900)
        );
        assert_eq!(
            next_grant_epoch(SimTime::from_ns(50), 0, 100),
            SimTime::from_ns(150)
        );
        let mut g = SimTime::ZERO;
        for _ in 0..3 {
            g = next_grant_epoch(g, 10 * US, 100);
        }
        assert_eq!(g, SimTime::from_ns(30_300));
    }

    #[test]
    fn start_times() {
        assert_eq!(start_time(SimTime::ZERO, 2 * MS, MS), SimTime::from_ms(1));
        // largest legal rtt leaves exactly the grant delay bound
        let g = SimTime::from_ms(7);
        assert_eq!(start_time(g, 2 * MS, 2 * MS - MS), g + MS);
        // emitted at s on a clock lagging by p, the burst reaches the root at g + offset
        for p in [0, 1, 123_457, 500_000] {
            let s = start_time(g, 2 * MS, 2 * p);
            assert_eq!(s.as_ns() + p + p, g.as_ns() + 2 * MS);
        }
    }

    #[test]
    fn grant_sizes() {
        let c = 10_000_000_000;
        assert_eq!(grant_size(3, 10_000, 1000, c, 100 * US), 10_400);
        assert_eq!(grant_size(0, 0, 1000, c, 100 * US), 0);
        assert_eq!(grant_size(1, 0, 1000, c, 100 * US), 800);
        assert_eq!(grant_size(1000, 0, 1000, c, 100 * US), 100 * US);
    }

    #[test]
    fn control_channel_cycle() {
        let s = ClusterScenario::new(60, 16);
        let cc = control_channel_delays(&s);
        assert_eq!(cc.cycle_bytes, 122_880);
        assert_eq!(cc.cycle, 983_040);
        assert!(cc.cycle <= MS);
        assert_eq!(
            control_channel_delays(&ClusterScenario::new(1, 1)).cycle,
            1_024
        );
        assert_eq!(
            control_channel_delays(&ClusterScenario::new(10, 10)).cycle,
            102_400
        );
    }

    #[test]
    fn report_slots_are_evenly_spread() {
        let cc = control_channel_delays(&ClusterScenario::new(10, 10));
        assert_eq!(cc.slot_offset(0), 0);
        assert_eq!(cc.slot_offset(1), 1_024);
        assert_eq!(
            cc.slot_receive_time(1, 2),
            SimTime::from_ns(1_024 + 204_800)
        );
        assert_eq!(cc.first_slot_at_or_after(1, SimTime::from_ns(1_024)), 0);
        assert_eq!(cc.first_slot_at_or_after(1, SimTime::from_ns(1_025)), 1);
    }

    fn scenario(n: usize, m: usize, mode: Mode) -> ClusterScenario {
        let mut s = ClusterScenario::new(n, m).with_mode(mode);
        s.one_way_prop = Propagation::Fixed(vec![100 * US; n]);
        s
    }

    fn report(source: usize, multipath: usize, count: u32, prio: u64, t2: SimTime) -> Report {
        Report {
            source,
            multipath,
            backlogged_count: count,
            priority_bytes: prio,
            sent_at_local: t2,
        }
    }

    fn grant_of(sel: Selection) -> Grant {
        match sel {
            Selection::Grant(g) => g,
            other => panic!("expected a grant, got {other:?}"),
        }
    }

    #[test]
    fn single_source_gets_the_grant() {
        let mut c = Controller::new(&scenario(1, 1, Mode::Coordinated));
        let wakes = c.bootstrap();
        assert_eq!(wakes, vec![(0, SimTime::from_ms(2), 0)]);
        let t3 = SimTime::from_ms(1);
        assert_eq!(
            c.on_report(&report(0, 0, 1, 0, t3 - 200 * US), t3).unwrap(),
            None
        );
        assert_eq!(c.rtt(0), Some(200 * US));
        let (sel, next) = c.formulate(0, SimTime::from_ms(2), 0).unwrap();
        let g = grant_of(sel);
        assert_eq!(
            (g.source, g.duration, g.start_local),
            (0, 800, SimTime::from_ns(3_800_000))
        );
        assert_eq!(next, Some((0, SimTime::from_ns(2_000_900), 0)));
        assert_eq!(c.transmitter_free(0), &[SimTime::from_ns(3_800_900)]);
    }

    #[test]
    fn no_demand_means_no_grant_and_a_report_wakes_the_multipath() {
        let mut c = Controller::new(&scenario(2, 1, Mode::Coordinated));
        c.bootstrap();
        assert_eq!(
            c.formulate(0, SimTime::from_ms(2), 0),
            Some((Selection::Idle, None))
        );
        let t3 = SimTime::from_ms(5);
        let wake = c
            .on_report(&report(1, 0, 0, 3000, t3 - 200 * US), t3)
            .unwrap();
        assert_eq!(wake, Some((0, t3, 1)));
        assert_eq!(c.formulate(0, t3, 0), None, "stale generation");
        let g = grant_of(c.formulate(0, t3, 1).unwrap().0);
        assert_eq!((g.source, g.duration), (1, 2400));
        assert_eq!(c.demand(1, 0).priority_bytes, 0);
    }

    #[test]
    fn busy_transmitter_is_skipped_when_coordinated() {
        // Source 0 is busy on multipath 1 past the start time it would get on multipath 0.
        let mut c = Controller::new(&scenario(2, 2, Mode::Coordinated));
        c.bootstrap();
        let t3 = SimTime::from_ms(1);
        for i in 0..2 {
            for j in 0..2 {
                let count = if i == 0 || j == 0 { 50 } else { 0 };
                c.on_report(&report(i, j, count, 0, t3 - 200 * US), t3)
                    .unwrap();
            }
        }
        let g1 = grant_of(c.formulate(1, SimTime::from_ns(2_000_900), 0).unwrap().0);
        assert_eq!(g1.source, 0);
        let g0 = c.formulate(0, SimTime::from_ns(2_000_950), 0).unwrap().0;
        let g0 = grant_of(g0);
        assert_eq!(g0.source, 1, "the only feasible demanding source");
        // Brute force: every feasible choice must have s >= its earliest free transmitter.
        let s0 = start_time(SimTime::from_ns(2_000_950), 2 * MS, 200 * US);
        assert!(s0 < g1.start_local + g1.duration + 100);
    }

    #[test]
    fn uncoordinated_mode_ignores_busy_transmitters() {
        let mut c = Controller::new(&scenario(2, 2, Mode::Uncoordinated));
        c.bootstrap();
        let t3 = SimTime::from_ms(1);
        c.on_report(&report(0, 0, 50, 0, t3 - 200 * US), t3)
            .unwrap();
        c.on_report(&report(0, 1, 50, 0, t3 - 200 * US), t3)
            .unwrap();
        let g1 = grant_of(c.formulate(1, SimTime::from_ns(2_000_900), 0).unwrap().0);
        let g0 = grant_of(c.formulate(0, SimTime::from_ns(2_000_950), 0).unwrap().0);
        assert_eq!((g0.source, g1.source), (0, 0));
        assert!(g0.start_local < g1.start_local + g1.duration);
    }

    #[test]
    fn all_busy_waits_for_the_earliest_transmitter() {
        let mut c = Controller::new(&scenario(1, 2, Mode::Coordinated));
        c.bootstrap();
        let t3 = SimTime::from_ms(1);
        c.on_report(&report(0, 0, 10, 0, t3 - 200 * US), t3)
            .unwrap();
        c.on_report(&report(0, 1, 10, 0, t3 - 200 * US), t3)
            .unwrap();
        let g0 = grant_of(c.formulate(0, SimTime::from_ms(2), 0).unwrap().0);
        assert_eq!(g0.duration, 8_000);
        let (sel, next) = c.formulate(1, SimTime::from_ns(2_000_900), 0).unwrap();
        // feasible once s = g + 2 ms - 200 us reaches 3.8 ms + 8.1 us
        let w = SimTime::from_ns(2_008_100);
        assert_eq!(sel, Selection::WaitUntil(w));
        assert_eq!(next, Some((1, w, 0)));
        let g1 = grant_of(c.formulate(1, w, 0).unwrap().0);
        assert_eq!(g1.start_local, g0.start_local + g0.duration + 100);
    }

    #[test]
    fn priority_already_granted_is_not_granted_twice() {
        let mut c = Controller::new(&scenario(1, 1, Mode::Coordinated));
        c.bootstrap();
        let t3 = SimTime::from_ms(1);
        c.on_report(&report(0, 0, 0, 5000, t3 - 200 * US), t3)
            .unwrap();
        let g = grant_of(c.formulate(0, SimTime::from_ms(2), 0).unwrap().0);
        assert_eq!(g.duration, 4000);
        // next report is sent before the grant's start: the 5000 B are still queued
        let t3 = SimTime::from_ms(2) + 100 * US;
        c.on_report(&report(0, 0, 0, 6000, t3 - 200 * US), t3)
            .unwrap();
        assert_eq!(c.demand(0, 0).priority_bytes, 1000);
        // a report sent after the start sees the queue already drained
        let t3 = g.start_local + 300 * US;
        c.on_report(&report(0, 0, 0, 1000, t3 - 200 * US), t3)
            .unwrap();
        assert_eq!(c.demand(0, 0).priority_bytes, 1000);
    }
}
