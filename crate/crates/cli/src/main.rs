use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptflow::{compare_dynamics, run_experiment, sinkhorn_between, write_gibbs, CliError, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "ptflow", version, about = "Policy-transport flow experiments")]
struct Cli {
    /// Overrides the output directory of the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Records every STRIDE-th step (0 picks the stepper default).
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Suppresses the summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one experiment.
    Run { config: PathBuf },
    /// Runs several experiments on the same problem and compares their terminal policies.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Entropic transport between two `center,weight` tables.
    Sinkhorn {
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        nu: PathBuf,
        #[arg(long)]
        eps: f64,
    },
    /// Writes the closed-form optimal policy of a config.
    Gibbs { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let opts = RunOptions { out_dir: cli.out_dir.clone(), stride: cli.stride };
    let say = |line: String| {
        if !cli.quiet {
            println!("{line}");
        }
    };
    match &cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let out = run_experiment(&cfg, &opts)?;
            let r = &out.report;
            say(format!(
                "{}: {} steps, tv_to_gibbs {:.3e}, free_energy {:.10}, converged {} ({:.2} s) -> {}",
                r.name,
                r.steps_executed,
                r.tv_to_gibbs,
                r.free_energy,
                r.converged,
                r.wall_time,
                r.output_dir.display()
            ));
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Compare { configs } => {
            let cfgs = configs.iter().map(|p| ExperimentConfig::load(p)).collect::<Result<Vec<_>, _>>()?;
            let dir = cli.out_dir.clone().unwrap_or_else(|| cfgs[0].output.dir.clone());
            let cmp = compare_dynamics(&cfgs, &dir, cli.stride)?;
            for row in &cmp.rows {
                say(format!("{:>20} {:>20}  tv {:.3e}  sinkhorn {:.3e}", row.a, row.b, row.tv, row.sinkhorn_divergence));
            }
            say(format!("-> {}", dir.join("compare.csv").display()));
        }
        Command::Sinkhorn { mu, nu, eps } => {
            let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            let s = sinkhorn_between(mu, nu, *eps, &dir)?;
            // The cost is the primary output; print it even when quiet.
            println!("{:.16e}", s.cost);
            say(format!(
                "regularized {:.16e}, {} iterations, marginal error {:.2e} -> {}",
                s.reg_cost,
                s.iterations,
                s.marginal_err,
                s.plan_path.display()
            ));
        }
        Command::Gibbs { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let (_, path) = write_gibbs(&cfg, &opts)?;
            say(format!("-> {}", path.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
