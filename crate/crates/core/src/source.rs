//! Per-source state: the two-class PDRR scheduler feeding each multipath, report
//! construction, grant service with fragmentation, and destination-side reassembly.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::ops::Range;

use crate::error::IntegrityFault;
use crate::kernel::SimTime;
use crate::model::{Burst, FlowClass, FlowId, Fragment, Grant, Mode, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorityPacket {
    pub flow: FlowId,
    pub seq: u64,
    pub enqueued: SimTime,
    /// Bytes of this packet already sent in earlier bursts.
    pub sent: u64,
}

/// A backlogged flow in the round-robin ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingEntry {
    pub flow: FlowId,
    pub size: u64,
    /// Bytes dequeued so far.
    pub sent: u64,
    /// Unused part of the quantum granted on the current visit.
    pub deficit: u64,
}

impl RingEntry {
    pub fn queued(&self) -> u64 {
        self.size - self.sent
    }
}

/// Queues of one source for one multipath: a priority FIFO ahead of a ring of
/// per-flow backlogs served one quantum per visit.
#[derive(Debug, Default)]
pub struct PairQueues {
    priority: VecDeque<PriorityPacket>,
    priority_bytes: u64,
    ring: VecDeque<RingEntry>,
    backlogged_bytes: u64,
    /// Upcoming priority packets not yet generated: (time, flow, seq, last seq).
    pending_packets: BinaryHeap<Reverse<(SimTime, FlowId, u64, u64)>>,
}

impl PairQueues {
    pub fn enqueue_backlog(&mut self, flow: FlowId, size: u64) {
        if size == 0 {
            return;
        }
        self.ring.push_back(RingEntry {
            flow,
            size,
            sent: 0,
            deficit: 0,
        });
        self.backlogged_bytes += size;
    }

    pub fn enqueue_priority_packet(&mut self, packet: PriorityPacket, packet_size: u64) {
        self.priority_bytes += packet_size - packet.sent;
        self.priority.push_back(packet);
    }

    /// Registers a priority flow whose `packets` packets are generated every
    /// `interval` ns starting at `first_at`.
    pub fn add_priority_flow(&mut self, flow: FlowId, first_at: SimTime, packets: u64) {
        if packets > 0 {
            self.pending_packets
                .push(Reverse((first_at, flow, 0, packets - 1)));
        }
    }

    /// Generates every pending priority packet due at or before `until` into the FIFO
    /// in time order. `on_packet` sees each generated packet.
    pub fn materialize(
        &mut self,
        until: SimTime,
        interval: u64,
        packet_size: u64,
        mut on_packet: impl FnMut(FlowId, u64),
    ) {
        while let Some(&Reverse((at, flow, seq, last))) = self.pending_packets.peek() {
            if at > until {
                break;
            }
            self.pending_packets.pop();
            self.enqueue_priority_packet(
                PriorityPacket {
                    flow,
                    seq,
                    enqueued: at,
                    sent: 0,
                },
                packet_size,
            );
            on_packet(flow, packet_size);
            if seq < last {
                self.pending_packets
                    .push(Reverse((at + interval, flow, seq + 1, last)));
            }
        }
    }

    pub fn backlogged_count(&self) -> u32 {
        self.ring.len() as u32
    }

    pub fn priority_bytes(&self) -> u64 {
        self.priority_bytes
    }

    pub fn backlogged_bytes(&self) -> u64 {
        self.backlogged_bytes
    }

    pub fn queued_bytes(&self) -> u64 {
        self.priority_bytes + self.backlogged_bytes
    }

    pub fn ring(&self) -> impl Iterator<Item = &RingEntry> {
        self.ring.iter()
    }

    pub fn priority_packets(&self) -> impl Iterator<Item = &PriorityPacket> {
        self.priority.iter()
    }

    /// Fills up to `capacity` bytes: priority packets first (the boundary packet may be
    /// split), then round-robin quanta. A visit that runs out of capacity mid-quantum
    /// keeps the flow at the head with its remaining deficit for the next burst.
    pub fn serve(
        &mut self,
        capacity: u64,
        quantum: u64,
        packet_size: u64,
        out: &mut Vec<Fragment>,
    ) -> u64 {
        let mut left = capacity;
        while left > 0 {
            let Some(head) = self.priority.front_mut() else {
                break;
            };
            let take = left.min(packet_size - head.sent);
            push_fragment(
                out,
                Fragment {
                    flow: head.flow,
                    class: FlowClass::Priority,
                    offset: head.seq * packet_size + head.sent,
                    len: take,
                },
            );
            head.sent += take;
            left -= take;
            self.priority_bytes -= take;
            if head.sent == packet_size {
                self.priority.pop_front();
            }
        }
        while left > 0 {
            let Some(head) = self.ring.front_mut() else {
                break;
            };
            if head.deficit == 0 {
                head.deficit = quantum;
            }
            let take = left.min(head.deficit).min(head.queued());
            push_fragment(
                out,
                Fragment {
                    flow: head.flow,
                    class: FlowClass::Backlogged,
                    offset: head.sent,
                    len: take,
                },
            );
            head.sent += take;
            head.deficit -= take;
            left -= take;
            self.backlogged_bytes -= take;
            if head.queued() == 0 {
                self.ring.pop_front();
            } else if head.deficit == 0 {
                self.ring.rotate_left(1);
            }
        }
        capacity - left
    }
}

/// Appends `f`, merging it into the previous fragment when contiguous in the same flow.
fn push_fragment(out: &mut Vec<Fragment>, f: Fragment) {
    if let Some(last) = out.last_mut() {
        if last.flow == f.flow && last.offset + last.len == f.offset {
            last.len += f.len;
            return;
        }
    }
    out.push(f);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServeOutcome {
    Emitted(Burst),
    /// No transmitter free at the start time; nothing was sent.
    Blocked,
}

/// Source `i`: its queues for every multipath and its tunable transmitters.
#[derive(Debug)]
pub struct SourceNode {
    pub id: usize,
    /// The local clock runs this many ns behind the controller clock.
    pub clock_lag: u64,
    pub pairs: Vec<PairQueues>,
    /// Local time at which each transmitter is next free.
    transmitter_free: Vec<SimTime>,
    pub blocked_grants: u64,
}

impl SourceNode {
    pub fn new(id: usize, one_way_prop: u64, n_multipaths: usize, transmitters: u32) -> Self {
        Self {
            id,
            clock_lag: one_way_prop,
            pairs: (0..n_multipaths).map(|_| PairQueues::default()).collect(),
            transmitter_free: vec![SimTime::ZERO; transmitters as usize],
            blocked_grants: 0,
        }
    }

    pub fn to_local(&self, reference: SimTime) -> SimTime {
        reference.saturating_sub_ns(self.clock_lag)
    }

    pub fn to_reference(&self, local: SimTime) -> SimTime {
        local + self.clock_lag
    }

    pub fn build_report(&self, multipath: usize, now_local: SimTime) -> Report {
        let q = &self.pairs[multipath];
        Report {
            source: self.id,
            multipath,
            backlogged_count: q.backlogged_count(),
            priority_bytes: q.priority_bytes(),
            sent_at_local: now_local,
        }
    }

    /// Transmitters whose current emission covers local time `t`.
    pub fn active_emissions(&self, t: SimTime) -> usize {
        self.transmitter_free.iter().filter(|&&f| f > t).count()
    }

    /// Serves `grant` from the queues of its multipath. The grant carries
    /// `capacity` bytes; the transmitter stays busy for the slot plus `guard`.
    #[allow(clippy::too_many_arguments)]
    pub fn serve_grant(
        &mut self,
        grant: &Grant,
        capacity: u64,
        guard: u64,
        quantum: u64,
        packet_size: u64,
        mode: Mode,
        fragments: Vec<Fragment>,
    ) -> Result<ServeOutcome, IntegrityFault> {
        let s = grant.start_local;
        let free = self
            .transmitter_free
            .iter()
            .enumerate()
            .filter(|(_, &f)| f <= s)
            .min_by_key(|(_, &f)| f)
            .map(|(t, _)| t);
        let Some(t) = free else {
            return match mode {
                Mode::Coordinated => Err(IntegrityFault::TransmitterConflict {
                    node: self.id,
                    start: s,
                }),
                Mode::Uncoordinated => {
                    self.blocked_grants += 1;
                    Ok(ServeOutcome::Blocked)
                }
            };
        };
        self.transmitter_free[t] = s + grant.duration + guard;
        let mut fragments = fragments;
        fragments.clear();
        self.pairs[grant.multipath].serve(capacity, quantum, packet_size, &mut fragments);
        Ok(ServeOutcome::Emitted(Burst {
            source: self.id,
            multipath: grant.multipath,
            emit_local: s,
            duration: grant.duration,
            fragments,
        }))
    }
}

/// What a fragment completed at the destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    /// Priority packet sequence numbers whose final byte arrived with this fragment.
    pub packets: Range<u64>,
    pub flow_complete: bool,
}

/// Destination-side reassembly: each flow's fragments must arrive contiguous and in
/// order.
#[derive(Debug, Default)]
pub struct Reassembler {
    next_offset: Vec<u64>,
}

impl Reassembler {
    pub fn accept(
        &mut self,
        f: &Fragment,
        flow_size: u64,
        packet_size: u64,
    ) -> Result<Delivery, IntegrityFault> {
        let idx = f.flow.0 as usize;
        if idx >= self.next_offset.len() {
            self.next_offset.resize(idx + 1, 0);
        }
        let expected = self.next_offset[idx];
        if f.offset != expected {
            return Err(IntegrityFault::OutOfOrderFragment {
                flow: f.flow.0,
                offset: f.offset,
                expected,
            });
        }
        let end = f.offset + f.len;
        if end > flow_size {
            return Err(IntegrityFault::FragmentOverrun {
                flow: f.flow.0,
                size: flow_size,
            });
        }
        self.next_offset[idx] = end;
        let packets = match f.class {
            FlowClass::Priority => (f.offset / packet_size)..(end / packet_size),
            FlowClass::Backlogged => 0..0,
        };
        Ok(Delivery {
            packets,
            flow_complete: end == flow_size,
        })
    }

    pub fn delivered(&self, flow: FlowId) -> u64 {
        self.next_offset.get(flow.0 as usize).copied().unwrap_or(0)
    }
}
