//! Flat `key = value` text format for scenarios and planner inventories.
//!
//! Blank lines and `#` comments are ignored. Keys are the lower_snake_case field
//! names of [`ClusterScenario`]; anything else is rejected. Times are ns, sizes
//! bytes and rates bits/s.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::ScenarioError;
use crate::kernel::SimTime;
use crate::model::{symmetric_demand, ClusterScenario, Mode, Propagation};

pub const SCENARIO_KEYS: &[&str] = &[
    "n_sources",
    "n_multipaths",
    "channel_rate",
    "guard_time",
    "offset",
    "max_grant_delay",
    "one_way_prop",
    "transmitters",
    "demand",
    "backlogged_fraction",
    "quantum",
    "packet_size",
    "report_size",
    "control_rate",
    "grant_cap",
    "mode",
    "sim_duration",
    "warmup",
    "seed",
];

/// A parsed key-value document: key -> (line number, raw value).
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, ScenarioError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ScenarioError::Syntax {
                    line,
                    message: format!("expected `key = value`, got `{content}`"),
                });
            };
            let key = key.trim();
            if !allowed.contains(&key) {
                return Err(ScenarioError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if entries
                .insert(key.to_string(), (line, value.trim().to_string()))
                .is_some()
            {
                return Err(ScenarioError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    pub fn get<T>(
        &self,
        key: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ScenarioError> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, value)) => {
                parse(value)
                    .map(Some)
                    .map_err(|message| ScenarioError::InvalidValue {
                        line,
                        key: key.to_string(),
                        message,
                    })
            }
        }
    }
}

/// Accepts plain integers and exact float notation such as `10e9`.
pub fn parse_u64(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 {
        Ok(f as u64)
    } else {
        Err(format!("`{s}` is not a non-negative integer"))
    }
}

pub fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>()
        .map_err(|_| format!("`{s}` is not a number"))
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    s.split(',').map(|x| item(x.trim())).collect()
}

/// Broadcasts a single value to `n` entries; a list must already have `n`.
fn per_source<T: Clone>(values: Vec<T>, n: usize) -> Vec<T> {
    if values.len() == 1 && n > 1 {
        vec![values[0].clone(); n]
    } else {
        values
    }
}

pub fn parse_scenario(text: &str) -> Result<ClusterScenario, ScenarioError> {
    let kv = KeyValues::parse(text, SCENARIO_KEYS)?;
    let n = kv
        .get("n_sources", parse_u64)?
        .ok_or(ScenarioError::MissingKey("n_sources"))? as usize;
    let m = kv
        .get("n_multipaths", parse_u64)?
        .ok_or(ScenarioError::MissingKey("n_multipaths"))? as usize;
    let mut s = ClusterScenario::new(n, m);

    macro_rules! set_u64 {
        ($($field:ident),*) => {$(
            if let Some(v) = kv.get(stringify!($field), parse_u64)? {
                s.$field = v;
            }
        )*};
    }
    set_u64!(
        channel_rate,
        guard_time,
        offset,
        max_grant_delay,
        quantum,
        packet_size,
        report_size,
        control_rate,
        grant_cap,
        seed
    );
    if let Some(v) = kv.get("sim_duration", parse_u64)? {
        s.sim_duration = SimTime::from_ns(v);
    }
    if let Some(v) = kv.get("warmup", parse_u64)? {
        s.warmup = SimTime::from_ns(v);
    }
    if let Some(v) = kv.get("backlogged_fraction", parse_f64)? {
        s.backlogged_fraction = v;
    }
    if let Some(v) = kv.get("mode", |x| x.parse::<Mode>())? {
        s.mode = v;
    }
    if let Some(v) = kv.get("transmitters", |x| {
        parse_list(x, |t| parse_u64(t).map(|t| t as u32))
    })? {
        s.transmitters = per_source(v, n);
    }
    if let Some(v) = kv.get("one_way_prop", |x| {
        if let Some(rest) = x.strip_prefix("uniform") {
            Ok(Propagation::Uniform {
                max_ns: parse_u64(rest.trim())?,
            })
        } else {
            Ok(Propagation::Fixed(parse_list(x, parse_u64)?))
        }
    })? {
        s.one_way_prop = match v {
            Propagation::Fixed(p) => Propagation::Fixed(per_source(p, n)),
            u => u,
        };
    }
    let rate = s.channel_rate;
    if let Some(v) = kv.get("demand", |x| parse_demand(x, n, m, rate))? {
        s.demand = v;
    }
    Ok(s)
}

/// `load <x>` (symmetric at multipath load x), a single bits/s value for every
/// cell, or `;`-separated rows of `,`-separated values.
fn parse_demand(s: &str, n: usize, m: usize, rate: u64) -> Result<Vec<Vec<f64>>, String> {
    if let Some(rest) = s.strip_prefix("load") {
        return Ok(symmetric_demand(n, m, parse_f64(rest.trim())?, rate));
    }
    if !s.contains([',', ';']) {
        return Ok(vec![vec![parse_f64(s)?; m]; n]);
    }
    s.split(';')
        .map(|row| parse_list(row.trim(), parse_f64))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn all_equal<T: PartialEq>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Canonical text form. `parse_scenario(&to_text(s)) == s` for any scenario with a
/// well-shaped demand matrix.
pub fn to_text(s: &ClusterScenario) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("n_sources", s.n_sources.to_string());
    put("n_multipaths", s.n_multipaths.to_string());
    put("channel_rate", s.channel_rate.to_string());
    put("guard_time", s.guard_time.to_string());
    put("offset", s.offset.to_string());
    put("max_grant_delay", s.max_grant_delay.to_string());
    put(
        "one_way_prop",
        match &s.one_way_prop {
            Propagation::Uniform { max_ns } => format!("uniform {max_ns}"),
            Propagation::Fixed(p) if !p.is_empty() && all_equal(p) => p[0].to_string(),
            Propagation::Fixed(p) => join(p),
        },
    );
    put(
        "transmitters",
        if !s.transmitters.is_empty() && all_equal(&s.transmitters) {
            s.transmitters[0].to_string()
        } else {
            join(&s.transmitters)
        },
    );
    let cells: Vec<f64> = s.demand.iter().flatten().copied().collect();
    put(
        "demand",
        if !cells.is_empty() && all_equal(&cells) {
            format!("{:?}", cells[0])
        } else {
            s.demand
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|a| format!("{a:?}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                })
                .collect::<Vec<_>>()
                .join("; ")
        },
    );
    put(
        "backlogged_fraction",
        format!("{:?}", s.backlogged_fraction),
    );
    put("quantum", s.quantum.to_string());
    put("packet_size", s.packet_size.to_string());
    put("report_size", s.report_size.to_string());
    put("control_rate", s.control_rate.to_string());
    put("grant_cap", s.grant_cap.to_string());
    put("mode", s.mode.to_string());
    put("sim_duration", s.sim_duration.as_ns().to_string());
    put("warmup", s.warmup.as_ns().to_string());
    put("seed", s.seed.to_string());
    out
}

/// First 16 hex digits of the SHA-256 of the canonical text.
pub fn scenario_hash(s: &ClusterScenario) -> String {
    let digest = Sha256::digest(to_text(s).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ClusterScenario, ScenarioError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}
