use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use horobm::harness::{run, Experiment, ExperimentConfig, Report};

/// Numerical checks of the horocyclic Brunn-Minkowski inequality and its relatives.
///
/// Exit status is 0 when every verdict passes, 1 when some verdict fails and
/// 2 on usage or input errors. HOROBM_THREADS caps the number of worker threads.
#[derive(Parser)]
#[command(name = "horobm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Horocyclic Brunn-Minkowski on configured and random region pairs.
    VerifyBm(RunArgs),
    /// Directed one-dimensional and horocyclic Borell-Brascamp-Lieb checks.
    VerifyBbl(RunArgs),
    /// Area scaling of horocyclic dilation and the succinct inequality.
    Scaling(RunArgs),
    /// Geodesic midpoint bottlenecks against horocyclic sums.
    Bottleneck(RunArgs),
    /// Kantorovich potentials, transport rays, mass balance and Jacobians.
    Needles(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also emit SVG figures.
    #[arg(long)]
    svg: bool,
}

impl Command {
    fn split(self) -> (Experiment, RunArgs) {
        match self {
            Command::VerifyBm(a) => (Experiment::VerifyBm, a),
            Command::VerifyBbl(a) => (Experiment::VerifyBbl, a),
            Command::Scaling(a) => (Experiment::Scaling, a),
            Command::Bottleneck(a) => (Experiment::Bottleneck, a),
            Command::Needles(a) => (Experiment::Needles, a),
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("HOROBM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("HOROBM_THREADS must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err("HOROBM_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn print_summary(report: &Report) {
    for v in &report.verdicts {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {}  measured={} tolerance={}", v.name, v.measured, v.tolerance);
    }
    let failed = report.verdicts.iter().filter(|v| !v.passed).count();
    println!("{}: {} verdicts, {} failed, {:.2}s", report.experiment.name(), report.verdicts.len(), failed, report.wall_clock_s);
}

fn execute(experiment: Experiment, args: RunArgs) -> Result<bool, String> {
    configure_threads()?;
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.output.dir = Some(out);
    }
    config.output.svg |= args.svg;
    let report = run(experiment, &config).map_err(|e| e.to_string())?;
    print_summary(&report);
    if let Some(dir) = &config.output.dir {
        let files = report.write(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        println!("wrote {} files to {}", files.len(), dir.display());
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = cli.command.split();
    match execute(experiment, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
