use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cyclodamp::echo_growth::{backward_moment, forward_moment_table, EchoKernelParams};
use cyclodamp::runner_io::{load_scenario, run_scenario, scenario_hash, Experiment, RunnerError, RunnerResult};

/// Magnetized Vlasov experiments: linear damping, nonlinear runs, echoes,
/// analytic norms and echo-kernel moments.
#[derive(Parser)]
#[command(name = "cyclodamp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Output directory; defaults to the scenario's [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a scenario and print its normalized form.
    Validate { scenario: PathBuf },
    /// Run the analytic norm inequality suite.
    NormsSuite {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Forward and backward moments of the echo kernel.
    Moments {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 50.0)]
        t_min: f64,
        #[arg(long, default_value_t = 400.0)]
        t_max: f64,
        #[arg(long, default_value_t = 6)]
        n_t: usize,
        #[arg(long, default_value_t = 100.0)]
        tau_max: f64,
        #[arg(long, default_value_t = 20)]
        n_tau: usize,
    },
    /// Stability reports for the perturbation modes of a scenario.
    Stability {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Echo experiment of a scenario.
    Echo {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_file(path: &Path, out: Option<&Path>, force: Option<Experiment>) -> RunnerResult<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| RunnerError::Read { path: path.display().to_string(), message: e.to_string() })?;
    let mut scenario = load_scenario(path)?;
    if let Some(kind) = force {
        scenario.experiment = kind;
        scenario.validate()?;
    }
    let summary = run_scenario(&scenario, &scenario_hash(&bytes), out)?;
    for f in &summary.files {
        eprintln!("wrote {}", f.display());
    }
    println!("{}", serde_json::to_string_pretty(&summary.summary).expect("summary serializes"));
    Ok(())
}

fn numeric(source: cyclodamp::Error, module: &'static str, block: &str) -> RunnerError {
    RunnerError::Numeric { module, block: block.to_string(), source }
}

fn dispatch(cli: Cli) -> RunnerResult<()> {
    match cli.command {
        Command::Run { scenario, out } => run_file(&scenario, out.as_deref(), None),
        Command::Stability { scenario, out } => run_file(&scenario, out.as_deref(), Some(Experiment::Stability)),
        Command::Echo { scenario, out } => run_file(&scenario, out.as_deref(), Some(Experiment::Echo)),
        Command::Validate { scenario } => {
            let s = load_scenario(&scenario)?;
            print!("{}", s.dump());
            Ok(())
        }
        Command::NormsSuite { seed, samples } => {
            let rep = cyclodamp::analytic_norms::prop25_suite(seed, samples)
                .map_err(|e| numeric(e, "analytic_norms", "norms"))?;
            println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
            if rep.all_pass() {
                Ok(())
            } else {
                Err(numeric(cyclodamp::Error::Parameter("an asserted norm inequality failed".into()), "analytic_norms", "norms"))
            }
        }
        Command::Moments { alpha, gamma, eps, t_min, t_max, n_t, tau_max, n_tau } => {
            let p = EchoKernelParams::new(alpha, gamma, eps)
                .map_err(|e| RunnerError::Invalid { block: "moments".into(), message: e.to_string() })?;
            if !(t_min > 0.0 && t_max > t_min) || n_t < 2 {
                return Err(RunnerError::Invalid { block: "moments".into(), message: "need 0 < t_min < t_max and n_t >= 2".into() });
            }
            let table = forward_moment_table(t_min, t_max, n_t, &p);
            println!("t,moment,bound_shape");
            for r in &table.rows {
                println!("{:.16e},{:.16e},{:.16e}", r.t, r.moment, r.bound_shape);
            }
            let back = backward_moment(tau_max, n_tau, &p);
            eprintln!(
                "forward slope {:.4} (expected {:.4}); backward sup {:.6e} at tau = {} (bound shape {:.6e})",
                table.slope,
                -(gamma - 1.0),
                back.value,
                back.argmax_tau,
                back.bound_shape
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("CYCLODAMP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
