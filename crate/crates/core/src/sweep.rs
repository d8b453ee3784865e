//! Batches of independent runs: load sweeps, seed replications and paired mode
//! comparisons, executed in parallel and returned in a fixed order.

use rayon::prelude::*;

use crate::error::SimError;
use crate::metrics::{RunMetrics, Verdict};
use crate::model::{ClusterScenario, Mode};
use crate::sim::simulate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub load: f64,
    pub seed: u64,
    pub mode: Mode,
}

/// Parses `start:stop:step`. `stop` is included when it lies on the step grid.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("`{s}` is not a number"))
    };
    let (start, stop, step) = match parts.as_slice() {
        [single] => return Ok(vec![num(single)?]),
        [a, b, c] => (num(a)?, num(b)?, num(c)?),
        _ => return Err(format!("expected start:stop:step, got `{spec}`")),
    };
    if step.is_nan() || step <= 0.0 || !start.is_finite() || !stop.is_finite() {
        return Err(format!("invalid range `{spec}`"));
    }
    if stop < start {
        return Err(format!("range `{spec}` ends before it starts"));
    }
    let steps = ((stop - start) / step + 1e-9).floor() as u64;
    // round to the step's decimal precision so 0.1 + 3 * 0.05 prints as 0.25
    Ok((0..=steps)
        .map(|k| round12(start + k as f64 * step))
        .collect())
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// `count` consecutive seeds starting at `base`.
pub fn seed_list(base: u64, count: u64) -> Vec<u64> {
    (0..count).map(|k| base.wrapping_add(k)).collect()
}

/// Points in `(load, seed, mode)` order.
pub fn grid(loads: &[f64], seeds: &[u64], modes: &[Mode]) -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(loads.len() * seeds.len() * modes.len());
    for &load in loads {
        for &seed in seeds {
            for &mode in modes {
                out.push(SweepPoint { load, seed, mode });
            }
        }
    }
    out
}

pub fn point_scenario(base: &ClusterScenario, p: &SweepPoint) -> ClusterScenario {
    base.clone()
        .with_load(p.load)
        .with_seed(p.seed)
        .with_mode(p.mode)
}

/// Runs every point, in parallel on `jobs` threads (0 means one per core). Results
/// come back in the order of `points`.
pub fn run_points(
    base: &ClusterScenario,
    points: &[SweepPoint],
    jobs: usize,
) -> Result<Vec<RunMetrics>, SimError> {
    let run = || {
        points
            .par_iter()
            .map(|p| simulate(&point_scenario(base, p)))
            .collect::<Result<Vec<_>, _>>()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

pub fn sweep(
    base: &ClusterScenario,
    loads: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunMetrics>, SimError> {
    run_points(base, &grid(loads, seeds, &[base.mode]), jobs)
}

/// Both modes at every `(load, seed)`, sharing seeds so the two see the same traffic.
pub fn compare(
    base: &ClusterScenario,
    loads: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunMetrics>, SimError> {
    run_points(
        base,
        &grid(loads, seeds, &[Mode::Coordinated, Mode::Uncoordinated]),
        jobs,
    )
}

/// Seed-averaged view of several runs of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: usize,
    pub throughput_bps: f64,
    pub priority_delay_mean: f64,
    pub utilization: f64,
    pub blocked_grants: u64,
    pub unstable_runs: usize,
    pub mean_slope_fraction: f64,
}

impl Summary {
    /// Unstable when most runs say so.
    pub fn verdict(&self) -> Verdict {
        if self.runs == 0 {
            Verdict::Withheld
        } else if 2 * self.unstable_runs > self.runs {
            Verdict::Unstable
        } else {
            Verdict::Stable
        }
    }
}

pub fn summarize(runs: &[RunMetrics]) -> Summary {
    let n = runs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    Summary {
        runs: runs.len(),
        throughput_bps: mean(&|r| r.throughput_bps),
        priority_delay_mean: mean(&|r| r.priority_delay_mean),
        utilization: mean(&|r| r.mean_utilization()),
        blocked_grants: runs.iter().map(|r| r.blocked_grants).sum(),
        unstable_runs: runs
            .iter()
            .filter(|r| r.stability.verdict == Verdict::Unstable)
            .count(),
        mean_slope_fraction: mean(&|r| r.stability.slope_fraction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SimTime;

    #[test]
    fn range_includes_aligned_stop() {
        let r = parse_range("0.1:0.95:0.05").unwrap();
        assert_eq!(r.len(), 18);
        assert_eq!(r[0], 0.1);
        assert_eq!(r[3], 0.25);
        assert_eq!(*r.last().unwrap(), 0.95);
        assert_eq!(parse_range("0.1:0.5:0.3").unwrap(), vec![0.1, 0.4]);
        assert_eq!(parse_range("0.7").unwrap(), vec![0.7]);
        assert!(parse_range("0.5:0.1:0.1").is_err());
        assert!(parse_range("0.1:0.5:0").is_err());
        assert!(parse_range("a:b").is_err());
    }

    #[test]
    fn sweep_size_and_order() {
        let loads = parse_range("0.1:0.95:0.05").unwrap();
        let g = grid(&loads, &seed_list(1, 5), &[Mode::Coordinated]);
        assert_eq!(g.len(), 90);
        assert_eq!((g[0].load, g[0].seed), (0.1, 1));
        assert_eq!((g[1].load, g[1].seed), (0.1, 2));
        assert_eq!(g[5].load, 0.15);
        let c = grid(&[0.3], &[7], &[Mode::Coordinated, Mode::Uncoordinated]);
        assert_eq!(c[0].seed, c[1].seed);
    }

    #[test]
    fn parallel_results_keep_point_order() {
        let base =
            ClusterScenario::new(2, 2).with_horizon(SimTime::from_ms(10), SimTime::from_ms(40));
        let loads = [0.2, 0.4];
        let seeds = [3, 4];
        let par = sweep(&base, &loads, &seeds, 2).unwrap();
        let seq = sweep(&base, &loads, &seeds, 1).unwrap();
        assert_eq!(par, seq);
        let got: Vec<_> = par.iter().map(|r| (r.load, r.seed)).collect();
        assert!((got[2].0 - 0.4).abs() < 1e-12 && got[2].1 == 3);
    }

    #[test]
    fn single_multipath_compare_is_mode_independent() {
        let base =
            ClusterScenario::new(3, 1).with_horizon(SimTime::from_ms(10), SimTime::from_ms(40));
        let rows = compare(&base, &[0.5], &[1], 1).unwrap();
        assert_eq!(rows[0].mode, Mode::Coordinated);
        assert_eq!(rows[1].mode, Mode::Uncoordinated);
        assert_eq!(rows[0].trace_digest, rows[1].trace_digest);
        assert_eq!(rows[0].throughput_bps, rows[1].throughput_bps);
    }
}
