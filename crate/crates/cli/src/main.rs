use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mpsim::kernel::SimTime;
use mpsim::metrics::{write_csv, RunMetrics};
use mpsim::model::{ClusterScenario, Mode};
use mpsim::planner::{energy_report, parse_plan, EnergyInventory};
use mpsim::scenario_file::{load_scenario, scenario_hash, to_text};
use mpsim::sim::simulate;
use mpsim::sweep::{compare, parse_range, seed_list, sweep};

#[derive(Debug, Parser)]
#[command(
    name = "mpsim",
    version,
    about = "Multipath optical MAC simulator and planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one scenario and write one CSV row
    Run {
        #[command(flatten)]
        common: Common,
        /// Multipath load, replaces the file's demand matrix with symmetric demand
        #[arg(long)]
        load: Option<f64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Simulate every load of a range for several seeds
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        batch: Batch,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Coordinated and uncoordinated runs sharing seeds at every load
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        batch: Batch,
    },
    /// Energy and dimensioning report from an inventory file (built-in ISP inventory if omitted)
    Plan { inventory: Option<PathBuf> },
    /// Check a scenario file and print its canonical form
    Validate { scenario: PathBuf },
}

#[derive(Debug, Args)]
struct Common {
    scenario: PathBuf,
    /// Run seed; the first seed of a batch
    #[arg(long, env = "MPSIM_SEED")]
    seed: Option<u64>,
    /// Total simulated time, s
    #[arg(long)]
    duration: Option<f64>,
    /// Initial interval excluded from measurement, s
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    backlogged_fraction: Option<f64>,
    /// CSV destination, stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Batch {
    /// start:stop:step, stop included when on the grid
    #[arg(long, default_value = "0.1:0.95:0.05")]
    loads: String,
    /// Number of consecutive seeds per load
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Worker threads, 0 for one per core
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn secs(s: f64, flag: &str) -> Result<SimTime> {
    if !(s >= 0.0 && s.is_finite()) {
        bail!("--{flag} must be a non-negative number of seconds");
    }
    Ok(SimTime::from_secs_f64(s))
}

/// Scenario file with command-line overrides applied, echoed to stderr.
fn effective(c: &Common, load: Option<f64>, mode: Option<Mode>) -> Result<ClusterScenario> {
    let mut s =
        load_scenario(&c.scenario).with_context(|| format!("reading {}", c.scenario.display()))?;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    if let Some(w) = c.warmup {
        s.warmup = secs(w, "warmup")?;
    }
    if let Some(d) = c.duration {
        s.sim_duration = secs(d, "duration")?;
    }
    if let Some(f) = c.backlogged_fraction {
        s.backlogged_fraction = f;
    }
    if let Some(l) = load {
        s = s.with_load(l);
    }
    if let Some(m) = mode {
        s.mode = m;
    }
    let violations = s.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        bail!("invalid scenario: {}", list.join("; "));
    }
    eprintln!("scenario {}", scenario_hash(&s));
    for line in to_text(&s).lines() {
        eprintln!("  {line}");
    }
    Ok(s)
}

fn emit(out: Option<&Path>, runs: &[RunMetrics]) -> Result<()> {
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(f, runs)?;
        }
        None => write_csv(io::stdout().lock(), runs)?,
    }
    Ok(())
}

fn batch_points(b: &Batch, first_seed: u64) -> Result<(Vec<f64>, Vec<u64>)> {
    let loads = parse_range(&b.loads)
        .map_err(anyhow::Error::msg)
        .context("--loads")?;
    if b.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    Ok((loads, seed_list(first_seed, b.seeds)))
}

fn plan(path: Option<&Path>) -> Result<()> {
    let file = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_plan(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => mpsim::planner::PlanFile {
            inventory: EnergyInventory::isp_reference(),
            traffic: None,
        },
    };
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{}", energy_report(&file.inventory))?;
    if let Some(t) = &file.traffic {
        writeln!(stdout, "inter-cluster    {:>10.3} Gb/s", t.inter() / 1e9)?;
        writeln!(stdout, "intra-cluster    {:>10.3} Gb/s", t.intra() / 1e9)?;
        writeln!(
            stdout,
            "peak throughput  {:>10.3} Gb/s",
            t.peak_throughput() / 1e9
        )?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, load, mode } => {
            let s = effective(&common, load, mode)?;
            let m = simulate(&s)?;
            emit(common.out.as_deref(), &[m])
        }
        Command::Sweep {
            common,
            batch,
            mode,
        } => {
            let s = effective(&common, None, mode)?;
            let (loads, seeds) = batch_points(&batch, s.seed)?;
            emit(
                common.out.as_deref(),
                &sweep(&s, &loads, &seeds, batch.jobs)?,
            )
        }
        Command::Compare { common, batch } => {
            let s = effective(&common, None, None)?;
            let (loads, seeds) = batch_points(&batch, s.seed)?;
            emit(
                common.out.as_deref(),
                &compare(&s, &loads, &seeds, batch.jobs)?,
            )
        }
        Command::Plan { inventory } => plan(inventory.as_deref()),
        Command::Validate { scenario } => {
            let s = load_scenario(&scenario)
                .with_context(|| format!("reading {}", scenario.display()))?;
            let violations = s.validate();
            if !violations.is_empty() {
                let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
                bail!("invalid scenario: {}", list.join("; "));
            }
            print!("# scenario {}\n{}", scenario_hash(&s), to_text(&s));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
