use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use widthlab::runner::{run_experiment, write_oracles, ExperimentKind, ExperimentSpec, RunMode, RunOptions};
use widthlab::LabError;

#[derive(Parser, Debug)]
#[command(author, version, about = "Width, frequency and retention experiments on a multi-task linear student")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-task loss phase diagrams over width and prior exponent (also long-horizon and complexity sweeps).
    Phase(Common),
    /// Rank-one staircase: alignment per task and width.
    Staircase(Common),
    /// Rare-task signal against the frequent-task residual.
    Residual(Common),
    /// Matched-frequency retention surface over width and injection gap.
    Retain(Common),
    /// One-neuron decay and drift, and the gated two-neuron toy.
    Neuron(Common),
    /// Data-vs-model scaling classification for a scaling law.
    Classify(Common),
    /// Oracle tables for every mixture in the config, without training.
    Oracle(Common),
    /// Redraw figures from completed runs in the output directory.
    Plot(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,

    /// Output directory; defaults to `out_dir` from the config, then `out/<kind>`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the number of seeds per grid point.
    #[arg(long)]
    seeds: Option<usize>,

    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,

    /// Rerun cells even when a matching completed record exists.
    #[arg(long)]
    force: bool,

    #[arg(long)]
    no_plots: bool,
}

fn accepts(command: &Command, kind: ExperimentKind) -> bool {
    use ExperimentKind::*;
    match command {
        Command::Phase(_) => matches!(kind, Phase | LongHorizon | ComplexitySweep),
        Command::Staircase(_) => kind == Rank1Staircase,
        Command::Residual(_) => kind == ResidualScatter,
        Command::Retain(_) => kind == Retention,
        Command::Neuron(_) => kind == Neuron,
        Command::Classify(_) => kind == Classify,
        Command::Oracle(_) => kind.is_sweep() || kind == Retention,
        Command::Plot(_) => true,
    }
}

fn fail(e: LabError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Phase(c)
        | Command::Staircase(c)
        | Command::Residual(c)
        | Command::Retain(c)
        | Command::Neuron(c)
        | Command::Classify(c)
        | Command::Oracle(c)
        | Command::Plot(c) => c,
    };
    let text = match std::fs::read_to_string(&common.config) {
        Ok(t) => t,
        Err(e) => return fail(e.into()),
    };
    let mut spec: ExperimentSpec = match toml::from_str(&text) {
        Ok(s) => s,
        Err(e) => return fail(LabError::Config(e)),
    };
    if let Some(n) = common.seeds {
        spec.seeds = n;
    }
    if let Err(e) = spec.validate() {
        return fail(e);
    }
    if !accepts(&cli.command, spec.kind) {
        eprintln!("error: config kind `{}` does not match this subcommand", spec.kind.name());
        return ExitCode::from(1);
    }
    let out = common
        .out
        .clone()
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(spec.kind.name()));

    if let Command::Oracle(_) = cli.command {
        return match write_oracles(&spec, &out) {
            Ok(ms) => {
                for (beta, _, h, report) in ms {
                    println!("beta = {beta}: {}", out.join("oracle").join(format!("{h}.csv")).display());
                    print!("{}", report.to_text());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        };
    }

    let mut opts = RunOptions::new(&out);
    opts.workers = common.workers;
    opts.force = common.force;
    opts.plots = !common.no_plots;
    if let Command::Plot(_) = cli.command {
        opts.mode = RunMode::PlotOnly;
        opts.plots = true;
    }
    let outcome = match run_experiment(&spec, &opts) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    println!(
        "{}: {} cells ({} reused, {} failed) -> {}",
        spec.kind.name(),
        outcome.records.len(),
        outcome.resumed,
        outcome.failed(),
        out.display()
    );
    for r in outcome.records.iter().filter(|r| r.error.is_some()) {
        println!("  failed {}: {}", r.cell_id, r.error.as_deref().unwrap_or(""));
    }
    for w in &outcome.warnings {
        println!("  warning: {w}");
    }
    for a in &outcome.artifacts {
        println!("  wrote {}", a.display());
    }
    ExitCode::from(outcome.exit_code() as u8)
}
