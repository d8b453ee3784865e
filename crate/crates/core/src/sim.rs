//! One simulation run: wires traffic, sources, the control channel and the controller
//! onto the event scheduler and audits the result.

use crate::controller::{control_channel_delays, ControlChannel, Controller, Selection};
use crate::error::{IntegrityFault, KernelError, ScenarioError, SimError};
use crate::kernel::{EventTag, RngStream, Scheduler, SimTime, StreamPurpose, NS_PER_MS, NS_PER_US};
use crate::metrics::{MetricsCollector, RunMetrics, StabilityThresholds};
use crate::model::{
    capacity_bytes, tx_time_ns, Burst, ClusterScenario, FlowClass, FlowId, Fragment, Grant, Report,
};
use crate::scenario_file::scenario_hash;
use crate::source::{Reassembler, ServeOutcome, SourceNode};
use crate::traffic::TrafficGenerator;

#[derive(Debug, Clone)]
enum Event {
    BackloggedArrival {
        cell: u32,
    },
    PriorityArrival {
        cell: u32,
    },
    /// Source sends report `k` of pair `pair` on the upstream control channel.
    ReportSlot {
        pair: u32,
        k: u64,
    },
    ReportArrival(Report),
    Formulate {
        multipath: u32,
        generation: u64,
    },
    BurstStart(Grant),
    BurstArrival {
        slot: u32,
    },
    Tick,
}

impl EventTag for Event {
    fn tag(&self) -> u8 {
        match self {
            Event::BackloggedArrival { .. } => 1,
            Event::PriorityArrival { .. } => 2,
            Event::ReportSlot { .. } => 3,
            Event::ReportArrival(_) => 4,
            Event::Formulate { .. } => 5,
            Event::BurstStart(_) => 6,
            Event::BurstArrival { .. } => 7,
            Event::Tick => 8,
        }
    }
}

#[derive(Debug, Clone)]
struct FlowRecord {
    class: FlowClass,
    size: u64,
    arrival: SimTime,
    first_packet_at: SimTime,
    injected: u64,
    delivered: u64,
    completion: Option<SimTime>,
}

#[derive(Debug)]
struct InFlight {
    burst: Burst,
    formulated: SimTime,
}

/// End-of-run bookkeeping used by the conservation audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Audit {
    pub injected: u64,
    pub delivered: u64,
    pub queued: u64,
    pub in_flight: u64,
    pub grants: u64,
    pub blocked_grants: u64,
    /// Per source: (configured one-way delay, round-trip time measured by ranging).
    pub ranging: Vec<(u64, Option<u64>)>,
    /// Reports whose arrival was suppressed because nothing changed from an empty one.
    pub suppressed_reports: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub audit: Audit,
}

pub struct Simulation {
    s: ClusterScenario,
    prop: Vec<u64>,
    channel: ControlChannel,
    traffic: TrafficGenerator,
    sources: Vec<SourceNode>,
    controller: Controller,
    flows: Vec<FlowRecord>,
    reassembler: Reassembler,
    in_flight: Vec<Option<InFlight>>,
    free_slots: Vec<u32>,
    fragment_pool: Vec<Vec<Fragment>>,
    grant_delay: RngStream,
    collector: MetricsCollector,
    thresholds: StabilityThresholds,
    root_end: Vec<Option<SimTime>>,
    last_report_empty: Vec<bool>,
    tick: u64,
    injected: u64,
    delivered: u64,
    in_flight_bytes: u64,
    grants: u64,
    grant_ns: u64,
    suppressed_reports: u64,
}

impl Simulation {
    pub fn new(s: &ClusterScenario) -> Result<Self, ScenarioError> {
        let violations = s.validate();
        if !violations.is_empty() {
            return Err(ScenarioError::Invalid(violations));
        }
        let prop = s.resolve_propagation();
        let sources = (0..s.n_sources)
            .map(|i| SourceNode::new(i, prop[i], s.n_multipaths, s.transmitters[i]))
            .collect();
        let window = s.sim_duration.since(s.warmup).unwrap_or(0);
        Ok(Self {
            prop,
            channel: control_channel_delays(s),
            traffic: TrafficGenerator::new(s),
            sources,
            controller: Controller::new(s),
            flows: Vec::new(),
            reassembler: Reassembler::default(),
            in_flight: Vec::new(),
            free_slots: Vec::new(),
            fragment_pool: Vec::new(),
            grant_delay: RngStream::new(s.seed, StreamPurpose::GrantDelivery, 0, 0),
            collector: MetricsCollector::new(
                s.warmup,
                s.sim_duration,
                s.n_multipaths,
                s.guard_time,
            ),
            thresholds: StabilityThresholds::default(),
            root_end: vec![None; s.n_multipaths],
            last_report_empty: vec![false; s.n_sources * s.n_multipaths],
            tick: (window / 100).clamp(100 * NS_PER_US, 10 * NS_PER_MS),
            injected: 0,
            delivered: 0,
            in_flight_bytes: 0,
            grants: 0,
            grant_ns: 0,
            suppressed_reports: 0,
            s: s.clone(),
        })
    }

    pub fn with_thresholds(mut self, th: StabilityThresholds) -> Self {
        self.thresholds = th;
        self
    }

    pub fn run(mut self) -> Result<RunOutcome, SimError> {
        let mut sched: Scheduler<Event> = Scheduler::new();
        self.start(&mut sched)?;
        let end = self.s.sim_duration;
        sched.run_until(end, |sched, now, ev| self.dispatch(sched, now, ev))?;
        self.finish(&sched)
    }

    fn start(&mut self, sched: &mut Scheduler<Event>) -> Result<(), KernelError> {
        let (n, m) = (self.s.n_sources, self.s.n_multipaths);
        for i in 0..n {
            for j in 0..m {
                let cell = (i * m + j) as u32;
                for r in self.traffic.initial_priority_flows(i, j) {
                    self.new_priority_flow(i, j, SimTime::ZERO, r.first_packet_at, r.packets);
                }
                if let Some(t) = self.traffic.next_backlogged_arrival(i, j, SimTime::ZERO) {
                    sched.schedule(t, Event::BackloggedArrival { cell })?;
                }
                if let Some(t) = self.traffic.next_priority_arrival(i, j, SimTime::ZERO) {
                    sched.schedule(t, Event::PriorityArrival { cell })?;
                }
                // first slot whose local send time is not before the local clock origin
                let p = self.prop[i];
                let k = self
                    .channel
                    .first_slot_at_or_after(cell as usize, SimTime::from_ns(2 * p));
                let send = self.channel.slot_receive_time(cell as usize, k) - p;
                sched.schedule(send, Event::ReportSlot { pair: cell, k })?;
            }
        }
        for (j, at, generation) in self.controller.bootstrap() {
            sched.schedule(
                at,
                Event::Formulate {
                    multipath: j as u32,
                    generation,
                },
            )?;
        }
        sched.schedule(self.s.warmup, Event::Tick)?;
        Ok(())
    }

    fn dispatch(
        &mut self,
        sched: &mut Scheduler<Event>,
        now: SimTime,
        ev: Event,
    ) -> Result<(), KernelError> {
        let m = self.s.n_multipaths;
        match ev {
            Event::BackloggedArrival { cell } => {
                let (i, j) = (cell as usize / m, cell as usize % m);
                let size = self.traffic.backlogged_size(i, j);
                let id = self.push_flow(FlowRecord {
                    class: FlowClass::Backlogged,
                    size,
                    arrival: now,
                    first_packet_at: now,
                    injected: size,
                    delivered: 0,
                    completion: None,
                });
                self.injected += size;
                self.sources[i].pairs[j].enqueue_backlog(id, size);
                if let Some(t) = self.traffic.next_backlogged_arrival(i, j, now) {
                    sched.schedule(t, Event::BackloggedArrival { cell })?;
                }
            }
            Event::PriorityArrival { cell } => {
                let (i, j) = (cell as usize / m, cell as usize % m);
                let packets = self.traffic.priority_packets(i, j);
                self.new_priority_flow(i, j, now, now, packets);
                if let Some(t) = self.traffic.next_priority_arrival(i, j, now) {
                    sched.schedule(t, Event::PriorityArrival { cell })?;
                }
            }
            Event::ReportSlot { pair, k } => {
                let idx = pair as usize;
                let (i, j) = (idx / m, idx % m);
                self.materialize(i, j, now);
                let p = self.prop[i];
                let report = self.sources[i].build_report(j, now - p);
                let empty = report.backlogged_count == 0 && report.priority_bytes == 0;
                if empty && self.last_report_empty[idx] {
                    self.suppressed_reports += 1;
                } else {
                    sched.schedule(now + p, Event::ReportArrival(report))?;
                }
                self.last_report_empty[idx] = empty;
                let next = self.channel.slot_receive_time(idx, k + 1) - p;
                sched.schedule(next, Event::ReportSlot { pair, k: k + 1 })?;
            }
            Event::ReportArrival(report) => {
                let wake = self.controller.on_report(&report, now)?;
                let i = report.source;
                let measured = self.controller.rtt(i).unwrap_or(0);
                if measured != 2 * self.prop[i] {
                    return Err(IntegrityFault::RangingMismatch {
                        node: i,
                        measured,
                        expected: 2 * self.prop[i],
                    }
                    .into());
                }
                if let Some((j, at, generation)) = wake {
                    sched.schedule(
                        at,
                        Event::Formulate {
                            multipath: j as u32,
                            generation,
                        },
                    )?;
                }
            }
            Event::Formulate {
                multipath,
                generation,
            } => {
                let Some((selection, next)) =
                    self.controller
                        .formulate(multipath as usize, now, generation)
                else {
                    return Ok(());
                };
                if let Selection::Grant(grant) = selection {
                    self.grants += 1;
                    self.grant_ns += grant.duration;
                    let i = grant.source;
                    let arrival_local =
                        now + self.grant_delay.uniform_u64(1, self.s.max_grant_delay);
                    if arrival_local > grant.start_local {
                        return Err(IntegrityFault::LateGrant {
                            node: i,
                            arrival: arrival_local,
                            start: grant.start_local,
                        }
                        .into());
                    }
                    sched.schedule(
                        self.sources[i].to_reference(grant.start_local),
                        Event::BurstStart(grant),
                    )?;
                }
                if let Some((j, at, generation)) = next {
                    sched.schedule(
                        at,
                        Event::Formulate {
                            multipath: j as u32,
                            generation,
                        },
                    )?;
                }
            }
            Event::BurstStart(grant) => {
                let (i, j) = (grant.source, grant.multipath);
                self.materialize(i, j, now);
                let capacity = capacity_bytes(grant.duration, self.s.channel_rate);
                let pool = self.fragment_pool.pop().unwrap_or_default();
                let outcome = self.sources[i].serve_grant(
                    &grant,
                    capacity,
                    self.s.guard_time,
                    self.s.quantum,
                    self.s.packet_size,
                    self.s.mode,
                    pool,
                )?;
                let burst = match outcome {
                    ServeOutcome::Emitted(b) => b,
                    ServeOutcome::Blocked => Burst {
                        source: i,
                        multipath: j,
                        emit_local: grant.start_local,
                        duration: grant.duration,
                        fragments: self.fragment_pool.pop().unwrap_or_default(),
                    },
                };
                self.in_flight_bytes += burst.payload_bytes();
                let slot = self.store(InFlight {
                    burst,
                    formulated: grant.formulated,
                });
                sched.schedule(now + self.prop[i], Event::BurstArrival { slot })?;
            }
            Event::BurstArrival { slot } => {
                let f = self.in_flight[slot as usize]
                    .take()
                    .expect("burst slot in use");
                self.free_slots.push(slot);
                self.arrive(now, f)?;
            }
            Event::Tick => {
                let mut queued = 0;
                for i in 0..self.s.n_sources {
                    for j in 0..m {
                        self.materialize(i, j, now);
                        queued += self.sources[i].pairs[j].queued_bytes();
                    }
                }
                self.collector.record_queue(now, queued);
                sched.schedule(now + self.tick, Event::Tick)?;
            }
        }
        Ok(())
    }

    fn push_flow(&mut self, f: FlowRecord) -> FlowId {
        self.flows.push(f);
        FlowId(self.flows.len() as u64 - 1)
    }

    fn new_priority_flow(
        &mut self,
        i: usize,
        j: usize,
        arrival: SimTime,
        first: SimTime,
        packets: u64,
    ) {
        let size = packets * self.s.packet_size;
        let id = self.push_flow(FlowRecord {
            class: FlowClass::Priority,
            size,
            arrival,
            first_packet_at: first,
            injected: 0,
            delivered: 0,
            completion: (packets == 0).then_some(arrival),
        });
        self.sources[i].pairs[j].add_priority_flow(id, first, packets);
    }

    fn materialize(&mut self, i: usize, j: usize, now: SimTime) {
        let interval = self.traffic.packet_interval();
        let flows = &mut self.flows;
        let injected = &mut self.injected;
        self.sources[i].pairs[j].materialize(now, interval, self.s.packet_size, |id, bytes| {
            flows[id.0 as usize].injected += bytes;
            *injected += bytes;
        });
    }

    fn store(&mut self, f: InFlight) -> u32 {
        match self.free_slots.pop() {
            Some(slot) => {
                self.in_flight[slot as usize] = Some(f);
                slot
            }
            None => {
                self.in_flight.push(Some(f));
                self.in_flight.len() as u32 - 1
            }
        }
    }

    /// A burst reaches the root: collision check, root accounting, reassembly and
    /// delivery bookkeeping.
    fn arrive(&mut self, now: SimTime, f: InFlight) -> Result<(), IntegrityFault> {
        let InFlight {
            mut burst,
            formulated,
        } = f;
        let (i, j) = (burst.source, burst.multipath);
        let p = self.prop[i];
        if now != formulated + self.s.offset {
            return Err(IntegrityFault::RootCollision {
                multipath: j,
                arrival: now,
                previous_end: formulated + self.s.offset,
            });
        }
        if let Some(prev) = self.root_end[j] {
            if now < prev + self.s.guard_time {
                return Err(IntegrityFault::RootCollision {
                    multipath: j,
                    arrival: now,
                    previous_end: prev,
                });
            }
        }
        self.root_end[j] = Some(now + burst.duration);
        let rate = self.s.channel_rate;
        let ps = self.s.packet_size;
        let payload = burst.payload_bytes();
        self.collector.record_burst(
            j,
            now,
            burst.duration,
            tx_time_ns(payload, rate).min(burst.duration),
        );
        self.in_flight_bytes -= payload;
        self.delivered += payload;
        // departure of the burst's first byte from the source, reference clock
        let emitted = now - p;
        let mut pos = 0u64;
        let interval = self.traffic.packet_interval();
        for frag in &burst.fragments {
            let flow = &mut self.flows[frag.flow.0 as usize];
            let d = self.reassembler.accept(frag, flow.size, ps)?;
            flow.delivered += frag.len;
            if flow.delivered > flow.injected {
                return Err(IntegrityFault::FragmentOverrun {
                    flow: frag.flow.0,
                    size: flow.injected,
                });
            }
            for seq in d.packets.clone() {
                let end_in_burst = pos + (seq + 1) * ps - frag.offset;
                let departed = emitted + tx_time_ns(end_in_burst, rate);
                let enqueued = flow.first_packet_at + seq * interval;
                let idx = i * self.s.n_multipaths + j;
                let k = self.channel.first_slot_at_or_after(idx, enqueued + p);
                let report_sent = self.channel.slot_receive_time(idx, k) - p;
                let wait = report_sent.since(enqueued).unwrap_or(0);
                self.collector
                    .record_priority_packet(enqueued, departed, wait, p)?;
            }
            pos += frag.len;
            if d.flow_complete {
                let done = emitted + tx_time_ns(pos, rate);
                flow.completion = Some(done);
                if flow.class == FlowClass::Backlogged {
                    self.collector.record_flow(flow.size, flow.arrival, done)?;
                }
            }
        }
        burst.fragments.clear();
        self.fragment_pool.push(burst.fragments);
        Ok(())
    }

    fn finish(mut self, sched: &Scheduler<Event>) -> Result<RunOutcome, SimError> {
        let end = self.s.sim_duration;
        let mut queued = 0;
        for i in 0..self.s.n_sources {
            for j in 0..self.s.n_multipaths {
                self.materialize(i, j, end);
                queued += self.sources[i].pairs[j].queued_bytes();
            }
        }
        if self.injected != self.delivered + queued + self.in_flight_bytes {
            return Err(IntegrityFault::Conservation {
                injected: self.injected,
                delivered: self.delivered,
                queued,
                in_flight: self.in_flight_bytes,
            }
            .into());
        }
        self.collector.idle_time()?;
        let blocked: u64 = self.sources.iter().map(|s| s.blocked_grants).sum();
        let in_progress = self
            .flows
            .iter()
            .filter(|f| {
                f.class == FlowClass::Backlogged
                    && f.arrival >= self.s.warmup
                    && f.completion.is_none()
            })
            .count() as u64;
        let mut metrics = RunMetrics {
            scenario_hash: scenario_hash(&self.s),
            seed: self.s.seed,
            mode: self.s.mode,
            n_sources: self.s.n_sources,
            n_multipaths: self.s.n_multipaths,
            load: self.s.load(),
            backlogged_fraction: self.s.backlogged_fraction,
            completed_flows: 0,
            in_progress_flows: in_progress,
            mean_flow_size: 0.0,
            mean_response_time: 0.0,
            throughput_bps: 0.0,
            mean_flow_throughput_bps: 0.0,
            priority_packets: 0,
            priority_delay_mean: 0.0,
            priority_delay_p50: 0.0,
            priority_delay_p99: 0.0,
            delay_report_wait: 0.0,
            delay_propagation: 0.0,
            delay_residual: 0.0,
            utilization: Vec::new(),
            slot_fraction: 0.0,
            guard_fraction: 0.0,
            grants: self.grants,
            mean_grant_ns: if self.grants > 0 {
                self.grant_ns as f64 / self.grants as f64
            } else {
                0.0
            },
            blocked_grants: blocked,
            stability: crate::metrics::stability_verdict(&[], 0.0, &self.thresholds),
            events: sched.dispatched_count(),
            trace_digest: sched.trace_digest(),
        };
        self.collector
            .finish(&mut metrics, self.s.offered_byte_rate(), &self.thresholds);
        let audit = Audit {
            injected: self.injected,
            delivered: self.delivered,
            queued,
            in_flight: self.in_flight_bytes,
            grants: self.grants,
            blocked_grants: blocked,
            ranging: (0..self.s.n_sources)
                .map(|i| (self.prop[i], self.controller.rtt(i)))
                .collect(),
            suppressed_reports: self.suppressed_reports,
        };
        Ok(RunOutcome { metrics, audit })
    }
}

/// Validates `s`, runs it and returns its metrics.
pub fn simulate(s: &ClusterScenario) -> Result<RunMetrics, SimError> {
    Ok(Simulation::new(s)?.run()?.metrics)
}
