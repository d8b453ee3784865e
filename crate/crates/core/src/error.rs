use thiserror::Error;

use crate::kernel::SimTime;
use crate::model::Violation;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("event scheduled at {fire_at:?} but the clock is already at {now:?}")]
    ScheduleInPast { fire_at: SimTime, now: SimTime },
    #[error(transparent)]
    Integrity(#[from] IntegrityFault),
}

/// A broken protocol or bookkeeping invariant. Any of these means a scheduler bug;
/// the run is aborted.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntegrityFault {
    #[error("negative round-trip time: report sent at local {t2:?}, received at {t3:?}")]
    NegativeRtt { t2: SimTime, t3: SimTime },
    #[error("ranging for source {node} measured {measured} ns, expected {expected} ns")]
    RangingMismatch {
        node: usize,
        measured: u64,
        expected: u64,
    },
    #[error("root collision on multipath {multipath}: burst arrives at {arrival:?}, previous ended at {previous_end:?}")]
    RootCollision {
        multipath: usize,
        arrival: SimTime,
        previous_end: SimTime,
    },
    #[error(
        "grant for source {node} arrives at local {arrival:?}, after its start time {start:?}"
    )]
    LateGrant {
        node: usize,
        arrival: SimTime,
        start: SimTime,
    },
    #[error("source {node} has no free transmitter at local {start:?} in coordinated mode")]
    TransmitterConflict { node: usize, start: SimTime },
    #[error("fragment of flow {flow} at offset {offset}, expected offset {expected}")]
    OutOfOrderFragment {
        flow: u64,
        offset: u64,
        expected: u64,
    },
    #[error("fragment of flow {flow} overruns the flow size {size}")]
    FragmentOverrun { flow: u64, size: u64 },
    #[error("negative duration recorded: {what}")]
    NegativeDuration { what: &'static str },
    #[error("byte conservation violated: injected {injected}, delivered {delivered}, queued {queued}, in flight {in_flight}")]
    Conservation {
        injected: u64,
        delivered: u64,
        queued: u64,
        in_flight: u64,
    },
    #[error("root time accounting mismatch on multipath {multipath}")]
    RootAccounting { multipath: usize },
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("scenario is invalid: {}", render_violations(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn render_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl From<IntegrityFault> for SimError {
    fn from(f: IntegrityFault) -> Self {
        SimError::Kernel(KernelError::Integrity(f))
    }
}
