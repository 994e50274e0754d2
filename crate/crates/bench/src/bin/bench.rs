use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use roboiaas_bench::report::by_scenario;
use roboiaas_bench::{
    emit_report, measure_irdd, measure_tad, read_csv, run_fire_suppression, run_scenario, summarize, BackendConfig,
    BenchError, Execution, FireFleet, FireOptions, Measurement, Metric, MetricSample, ScenarioConfig, SweepOptions,
    TransportConfig,
};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    Sim,
    Socket,
}

#[derive(Debug, Parser)]
#[command(name = "bench", version, about = "Boot roboiaas federations and time discovery and task assignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Transport for sweeps and the fire-suppression run. `run` uses the
    /// scenario file's transport unless this is given.
    #[arg(long, global = true, value_enum)]
    transport: Option<TransportKind>,
    #[arg(long, global = true, default_value = "bench-out")]
    out: PathBuf,
    /// One-way link latency in simulated runs.
    #[arg(long, global = true, default_value_t = 5.0)]
    latency_ms: f64,
    /// Uniform extra delay per simulated message.
    #[arg(long, global = true, default_value_t = 0.1)]
    jitter_ms: f64,
    /// Per-packet processing delay of overlay nodes.
    #[arg(long, global = true, default_value_t = 1.0)]
    d_proc_ms: f64,
    /// Run repetitions on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file.
    Run { scenario: PathBuf },
    /// Idle robot discovery delay against the number of IaaS nodes.
    Irdd {
        #[arg(long, default_value = "presence,overlay")]
        backends: String,
        /// `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "2,3,4,6,8")]
        iaas: String,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Task assignment delay at every receiving node.
    Tad {
        #[arg(long, default_value = "presence,overlay")]
        backends: String,
        #[arg(long, default_value_t = 4)]
        iaas: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// The end-to-end fire-suppression task on the default fleet.
    FireSuppression {
        #[arg(long, default_value_t = 4)]
        iaas: usize,
        #[arg(long, default_value = "presence")]
        backend: String,
        /// Start from a fleet with no light robots.
        #[arg(long)]
        without_light: bool,
        /// Robots of this type fail every task.
        #[arg(long)]
        faulty: Option<String>,
    },
    /// Redraw the plots of an existing samples CSV.
    Plot { csv: PathBuf },
}

impl Cli {
    fn transport(&self) -> TransportConfig {
        match self.transport {
            Some(TransportKind::Socket) => TransportConfig::Socket {
                d_proc_ms: self.d_proc_ms,
            },
            _ => TransportConfig::Sim {
                latency_ms: self.latency_ms,
                jitter_ms: self.jitter_ms,
                d_proc_ms: self.d_proc_ms,
            },
        }
    }

    fn sweep(&self, reps: usize) -> SweepOptions {
        SweepOptions {
            transport: self.transport(),
            seed: self.seed,
            reps,
            execution: if self.sequential {
                Execution::Sequential
            } else {
                Execution::default()
            },
        }
    }
}

fn parse_backends(s: &str) -> Result<Vec<BackendConfig>, BenchError> {
    s.split(',').filter(|b| !b.trim().is_empty()).map(BackendConfig::parse).collect()
}

fn parse_counts(s: &str) -> Result<Vec<usize>, BenchError> {
    let bad = || BenchError::Usage(format!("cannot read IaaS counts from `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|c| c.trim().parse().map_err(|_| bad())).collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(samples: &[MetricSample]) {
    for (metric, backends) in summarize(samples) {
        for (backend, counts) in backends {
            for (n, s) in counts {
                println!(
                    "{:<5} {:<9} iaas={n:<3} n={:<4} mean={:>9.3} ms  sd={:>7.3} ms",
                    metric.as_str(),
                    backend,
                    s.n,
                    s.mean,
                    s.stddev
                );
            }
        }
    }
}

fn finish_measurement(cli: &Cli, m: &Measurement) -> Result<()> {
    if !m.aborted.is_empty() {
        bail!("{} runs failed to boot; first: {}", m.aborted.len(), m.aborted[0]);
    }
    let files = emit_report(&m.samples, &cli.out)?;
    write_json(&cli.out.join("measurement.json"), m)?;
    print_summary(&m.samples);
    if m.censored > 0 {
        println!("censored: {} measurements excluded", m.censored);
    }
    println!("wrote {} and {} plot(s)", files.csv.display(), files.plots.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { scenario } => {
            let mut cfg = ScenarioConfig::load(scenario)?;
            if cli.transport.is_some() {
                cfg.transport = cli.transport();
            }
            let report = run_scenario(&cfg)?;
            if let Some(cause) = &report.aborted {
                bail!("scenario aborted: {cause}");
            }
            fs::create_dir_all(&cli.out)?;
            write_json(&cli.out.join("events.json"), &report.log)?;
            println!(
                "{} IaaS, {} backend: {} marketplace records, replies {:?}",
                report.iaas_count, report.backend, report.marketplace_records, report.replies
            );
            if report.samples.is_empty() {
                println!("no samples recorded");
            } else {
                emit_report(&report.samples, &cli.out)?;
                print_summary(&report.samples);
            }
            Ok(())
        }
        Command::Irdd { backends, iaas, reps } => {
            let m = measure_irdd(&parse_counts(iaas)?, &parse_backends(backends)?, &cli.sweep(*reps))?;
            finish_measurement(cli, &m)
        }
        Command::Tad { backends, iaas, reps } => {
            let m = measure_tad(*iaas, &parse_backends(backends)?, &cli.sweep(*reps))?;
            finish_measurement(cli, &m)?;
            for b in parse_backends(backends)? {
                for (receiver, s) in by_scenario(&m.samples, Metric::Tad, b.label()) {
                    println!("tad   {:<9} {receiver:<8} mean={:>9.3} ms  sd={:>7.3} ms", b.label(), s.mean, s.stddev);
                }
            }
            Ok(())
        }
        Command::FireSuppression {
            iaas,
            backend,
            without_light,
            faulty,
        } => {
            let report = run_fire_suppression(&FireOptions {
                iaas_count: *iaas,
                backend: BackendConfig::parse(backend)?,
                transport: cli.transport(),
                seed: cli.seed,
                fleet: if *without_light {
                    FireFleet::WithoutLight
                } else {
                    FireFleet::Default
                },
                faulty_type: faulty.clone(),
                entry_node: 0,
            })?;
            fs::create_dir_all(&cli.out)?;
            write_json(&cli.out.join("fire-suppression.json"), &report)?;
            write_json(&cli.out.join("events.json"), &report.log)?;
            println!("outcome: {} (HTTP {})", report.outcome, report.http_status);
            for m in &report.coalition {
                println!("  {} [{}] at {} -> {}", m.robot_id, m.robot_type, m.owner, m.assigned.join(","));
            }
            println!("composite: {}", report.composite.join(","));
            for f in report.frames.iter().chain(&report.events) {
                println!("  {f}");
            }
            if let Err(violated) = report.check() {
                bail!("invariant violated: {violated}");
            }
            println!("all robots IDLE, marketplace converged");
            Ok(())
        }
        Command::Plot { csv } => {
            let samples = read_csv(csv)?;
            let files = emit_report(&samples, &cli.out)?;
            println!("redrew {} plot(s) from {} samples", files.plots.len(), samples.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<BenchError>() {
                Some(BenchError::Usage(_) | BenchError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
