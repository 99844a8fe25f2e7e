use clap::{Args, Parser, Subcommand};
use mde_cli::commands::{self, Command, Context};
use mde_cli::{config, CliError};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mde", version, about = "Matrix Dyson equation solver and random matrix experiments")]
struct Cli {
    /// Worker threads for Monte Carlo and grid evaluation.
    #[arg(long, global = true, env = "MDE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the equation at a single spectral parameter.
    Solve(RunArgs),
    /// Self-consistent density on a grid (CSV tau,rho).
    Density(RunArgs),
    /// Support, edges and slope parameters.
    Edges(RunArgs),
    /// Unstable eigentriple and stability bounds.
    Stability(RunArgs),
    /// Band mass below a gap against the eigenvalue count of A.
    Bandmass(RunArgs),
    /// Sample eigenvalues (CSV trial,index,eigenvalue).
    Sample(RunArgs),
    /// Interpolating flow and gap crossing experiment.
    Flow(RunArgs),
    /// Averaged and isotropic local law errors.
    Locallaw(RunArgs),
    /// Band counts, outliers and rigidity.
    Rigidity(RunArgs),
    /// Edge statistics against the Gaussian reference.
    Universality(RunArgs),
    /// Check flatness and fullness of the model.
    Validate(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Model configuration (TOML).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Override the matrix dimension.
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    edge_index: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    vectors: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    margin: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    /// Density CSV to read instead of recomputing (edges).
    #[arg(long)]
    curve: Option<PathBuf>,
}

impl Cmd {
    fn split(self) -> (Command, RunArgs) {
        match self {
            Cmd::Solve(a) => (Command::Solve, a),
            Cmd::Density(a) => (Command::Density, a),
            Cmd::Edges(a) => (Command::Edges, a),
            Cmd::Stability(a) => (Command::Stability, a),
            Cmd::Bandmass(a) => (Command::BandMass, a),
            Cmd::Sample(a) => (Command::Sample, a),
            Cmd::Flow(a) => (Command::Flow, a),
            Cmd::Locallaw(a) => (Command::LocalLaw, a),
            Cmd::Rigidity(a) => (Command::Rigidity, a),
            Cmd::Universality(a) => (Command::Universality, a),
            Cmd::Validate(a) => (Command::Validate, a),
        }
    }
}

fn apply(cfg: &mut config::RunConfig, a: &RunArgs) -> Result<(), CliError> {
    if let Some(n) = a.n {
        cfg.set_dimension(n)?;
    }
    macro_rules! set {
        ($($src:ident => $dst:expr),*) => { $(if let Some(v) = a.$src.clone() { $dst = v; })* };
    }
    set!(seed => cfg.ensemble.seed, trials => cfg.ensemble.trials, tau => cfg.run.tau, eta => cfg.run.eta,
         t => cfg.run.t, edge_index => cfg.run.edge_index, k => cfg.run.k, steps => cfg.run.steps,
         vectors => cfg.run.vectors, margin => cfg.run.margin);
    if a.lo.is_some() {
        cfg.grid.lo = a.lo;
    }
    if a.hi.is_some() {
        cfg.grid.hi = a.hi;
    }
    if a.out.is_some() {
        cfg.output.out = a.out.clone();
    }
    if a.manifest.is_some() {
        cfg.output.manifest = a.manifest.clone();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Validation("--threads must be at least 1".into())),
        Some(t) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| CliError::Validation(e.to_string()))?;
            t
        }
        None => rayon::current_num_threads(),
    };
    let (command, args) = cli.command.split();
    let mut cfg = config::parse_config(&args.model)?;
    apply(&mut cfg, &args)?;
    let ctx = Context::new(cfg, args.curve.clone())?;
    let summary = commands::dispatch(command, &ctx)?;
    let manifest = commands::write_manifest(&ctx.cfg, command, threads, Some(&args.model))?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "command": command.name(),
        "manifest": manifest,
        "result": summary,
    }))
    .map_err(|e| CliError::Io(e.to_string()))?;
    let csv_on_stdout = ctx.cfg.output.out.is_none()
        && matches!(command, Command::Density | Command::Sample | Command::Universality);
    // A closed pipe on the reader side is not an error of the run.
    if csv_on_stdout {
        let _ = writeln!(std::io::stderr(), "{text}");
    } else {
        let _ = writeln!(std::io::stdout(), "{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let err = CliError::Validation(e.kind().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
