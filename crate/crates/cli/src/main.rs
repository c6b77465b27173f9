use std::path::PathBuf;
use std::process::ExitCode;

use aqn_cli::{cli_compare, cli_run, read_config, CliError, Settings};
use clap::{Args, Parser, Subcommand};

/// Adaptive quasi-Newton solvers and baselines.
#[derive(Parser)]
#[command(name = "aqn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method and write its trace as CSV.
    Run {
        #[command(flatten)]
        shared: Shared,
        /// type1 | type2 | accel | gd | nesterov | lbfgs
        #[arg(long)]
        method: Option<String>,
        /// Trace file; stdout when omitted.
        #[arg(long)]
        out: Option<String>,
    },
    /// Run several methods on one problem and rank them.
    Compare {
        #[command(flatten)]
        shared: Shared,
        /// Method descriptor `name[:key=value...]`; repeat for each method.
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Directory for `<method>.csv` files and `summary.json`.
        #[arg(long)]
        out_dir: Option<String>,
    },
}

/// Flags shared by both commands. Each one overrides the config file key of
/// the same name.
#[derive(Args)]
struct Shared {
    /// `key=value` file with defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// e.g. `quadratic:d=10:seed=1`, `logistic:n=500:d=50`, `rosenbrock:d=100`,
    /// `cubic-ls:d=15:c=0.1`, `libsvm:loss=logistic:reg=1e-3:path=FILE`
    #[arg(long)]
    problem: Option<String>,
    /// forward | random | iterates | greedy | ortho-batch
    #[arg(long)]
    rule: Option<String>,
    /// Memory size.
    #[arg(long)]
    n: Option<String>,
    /// Forward-estimate step.
    #[arg(long)]
    h: Option<String>,
    #[arg(long)]
    kappa_max: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<String>,
    /// Gradient-norm tolerance.
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    max_iter: Option<String>,
    /// Budget on gradient calls.
    #[arg(long)]
    max_calls: Option<String>,
    /// Initial regularization; estimated when omitted.
    #[arg(long)]
    m0: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    lbfgs_memory: Option<String>,
}

impl Shared {
    fn settings(self, extra: [(&str, Option<String>); 2]) -> Result<Settings, CliError> {
        let mut s = match &self.config {
            Some(path) => read_config(path)?,
            None => Settings::new(),
        };
        let flags = [
            ("problem", self.problem),
            ("rule", self.rule),
            ("n", self.n),
            ("h", self.h),
            ("kappa-max", self.kappa_max),
            ("seed", self.seed),
            ("tol", self.tol),
            ("max-iter", self.max_iter),
            ("max-calls", self.max_calls),
            ("m0", self.m0),
            ("tau", self.tau),
            ("lbfgs-memory", self.lbfgs_memory),
        ];
        for (k, v) in flags.into_iter().chain(extra) {
            if let Some(v) = v {
                s.insert(k.to_string(), v);
            }
        }
        Ok(s)
    }
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { shared, method, out } => {
            let settings = shared.settings([("method", method), ("out", out)])?;
            cli_run(&settings)?;
        }
        Command::Compare { shared, methods, out_dir } => {
            let settings = shared.settings([("out-dir", out_dir), ("methods", None)])?;
            let methods = if methods.is_empty() {
                settings
                    .get("methods")
                    .map(|m| m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                    .unwrap_or_default()
            } else {
                methods
            };
            let out_dir = settings.get("out-dir").ok_or_else(|| CliError::Usage("missing out-dir".into()))?;
            let rows = cli_compare(&settings, &methods, &PathBuf::from(out_dir))?;
            for r in rows {
                let calls = r.oracle_calls_to_tol.map_or_else(|| "-".to_string(), |c| c.to_string());
                println!("{:<24} {:>10} {:>14.6e} {:>14.6e}", r.method, calls, r.final_f, r.final_grad_norm);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
