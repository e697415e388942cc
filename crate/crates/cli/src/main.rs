use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use enclave_serve::control::{profile_boundary, SweepConfig};
use enclave_serve::harness::{emit_report, run, summarize_latencies_csv, ClockMode, RunReport, Scenario};
use enclave_serve::serving::ModelPreset;

#[derive(Parser)]
#[command(
    name = "enclave-serve",
    version,
    about = "Run secure-serving scenarios on the simulated substrate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Real,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its CSV/text artifacts.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "virtual")]
        clock: ClockArg,
        /// Output directory; defaults to `out/<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Profile a model preset's tail latency against EPC paging and print its
    /// paging boundary for the SLO.
    Profile {
        model: String,
        /// SLO on p99 latency, milliseconds. Defaults to the preset's SLO.
        #[arg(long)]
        slo: Option<f64>,
        /// Requests per sweep point.
        #[arg(long, default_value_t = 2000)]
        requests: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the summary of a run directory, recomputing percentiles from
    /// `latencies.csv`.
    Report { dir: PathBuf },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            clock,
            out,
        } => {
            let mut s = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let clock = match clock {
                ClockArg::Virtual => ClockMode::Virtual,
                ClockArg::Real => ClockMode::Real,
            };
            let report = run(&s, clock)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("out").join(&s.name));
            emit_report(&report, &dir)?;
            print!("{}", report.summary());
            println!("artifacts: {}", dir.display());
        }
        Command::Profile {
            model,
            slo,
            requests,
            seed,
        } => {
            let Some(preset) = ModelPreset::by_name(&model) else {
                let names: Vec<_> = ModelPreset::all().into_iter().map(|p| p.name).collect();
                bail!("unknown model {model}; presets: {}", names.join(", "));
            };
            let slo = slo.map_or(preset.slo, |ms| Duration::from_secs_f64(ms / 1e3));
            let mut sweep = SweepConfig::for_preset(&preset);
            sweep.requests = requests;
            sweep.seed = seed;
            let (profile, boundary) = profile_boundary(&preset, slo, &sweep)?;
            println!("interference_mib,paging_pages_per_s,p90_ms,p95_ms,p99_ms");
            for p in &profile.points {
                println!(
                    "{},{:.1},{:.3},{:.3},{:.3}",
                    p.interference_bytes >> 20,
                    p.paging,
                    p.p90.as_secs_f64() * 1e3,
                    p.p95.as_secs_f64() * 1e3,
                    p.p99.as_secs_f64() * 1e3
                );
            }
            println!("idle_p99_ms: {:.3}", profile.idle_p99.as_secs_f64() * 1e3);
            println!("boundary_pages_per_s: {boundary:.1}");
        }
        Command::Report { dir } => {
            let json = std::fs::read(dir.join("report.json")).with_context(|| format!("reading {}", dir.display()))?;
            let report = RunReport::from_bytes(&json)?;
            print!("{}", report.summary());
            let csv = summarize_latencies_csv(&dir.join("latencies.csv"))?;
            println!("csv_sent: {}", csv.sent);
            println!("csv_completed: {}", csv.completed);
            println!("csv_p99_ms: {:.3}", csv.percentiles.p99.as_secs_f64() * 1e3);
        }
    }
    Ok(())
}
