//! `robtree` — train, evaluate, calibrate, and export shift-robust
//! classification trees over integer and categorical features.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use robtree_cli::{
    cmd_calibrate, cmd_evaluate, cmd_export, cmd_train, BackendChoice, CalibrateArgs, CliError,
    EvaluateArgs, ExportArgs, TrainArgs, TrainMode,
};
use robtree_core::master::BudgetMode;

#[derive(Parser)]
#[command(
    name = "robtree",
    about = "Optimal classification trees that stay correct under bounded covariate shifts",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Robust,
    NonrobustRegularized,
    Proxy,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Robust => TrainMode::Robust,
            ModeArg::NonrobustRegularized => TrainMode::NonrobustRegularized,
            ModeArg::Proxy => TrainMode::Proxy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    BuiltinEnum,
    External,
}

impl From<BackendArg> for BackendChoice {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::BuiltinEnum => BackendChoice::BuiltinEnum,
            BackendArg::External => BackendChoice::External,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetModeArg {
    Shared,
    PerSample,
}

impl From<BudgetModeArg> for BudgetMode {
    fn from(b: BudgetModeArg) -> Self {
        match b {
            BudgetModeArg::Shared => BudgetMode::Shared,
            BudgetModeArg::PerSample => BudgetMode::PerSample,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a tree and write the tree blob plus a training report.
    Train {
        /// CSV with feature columns and one label column.
        #[arg(long)]
        data: PathBuf,
        /// JSON column descriptions (kinds, bounds, shift directions, ρ).
        #[arg(long)]
        schema: PathBuf,
        /// Maximum tree depth d; the tree has at most 2^d − 1 branches.
        #[arg(long)]
        depth: u32,
        /// Training objective.
        #[arg(long, value_enum, default_value = "robust")]
        mode: ModeArg,
        /// Per-sample survival probability λ; sets the budget to −n·ln λ.
        #[arg(long)]
        lambda: Option<f64>,
        /// Explicit shift budget (alternative to --lambda).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Uniform stay-probability ρ for features whose schema has none.
        #[arg(long)]
        rho: Option<f64>,
        /// Draw per-feature ρ ~ Normal(mean, 0.2), clamped to admissible values.
        #[arg(long)]
        rho_mean: Option<f64>,
        /// Accuracy weight for nonrobust-regularized mode (1 = accuracy only).
        #[arg(long = "R")]
        r: Option<f64>,
        /// How proxy mode accounts the budget.
        #[arg(long, value_enum, default_value = "shared")]
        budget_mode: BudgetModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "builtin-enum")]
        backend: BackendArg,
        /// Stop after this many cut iterations and return the incumbent.
        #[arg(long)]
        iter_cap: Option<usize>,
        /// Stop after this many seconds and return the incumbent.
        #[arg(long)]
        time_cap: Option<f64>,
        /// Add only the aggregate cut each iteration, no per-sample cuts.
        #[arg(long)]
        no_strengthen: bool,
        /// Directory for tree.json and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved tree on nominal data and K sampled perturbed copies.
    Evaluate {
        /// Tree blob written by `train`.
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Uniform stay-probability ρ overriding the schema's values.
        #[arg(long)]
        rho: Option<f64>,
        /// Draw per-feature ρ ~ Normal(mean, 0.2) instead of schema values.
        #[arg(long)]
        rho_mean: Option<f64>,
        /// Add this to every feature's ρ before sampling (clamped);
        /// negative values probe more noise than the tree was trained for.
        #[arg(long, allow_negative_numbers = true)]
        rho_offset: Option<f64>,
        /// Re-draw each run's ρ uniformly within ±radius of the base value.
        #[arg(long)]
        rho_radius: Option<f64>,
        /// Number of sampled perturbed test sets.
        #[arg(long = "K", default_value_t = 1000)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report JSON here (it always goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the budget and per-cell deviation costs a dataset calibrates to.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        rho_mean: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a tree blob as indented text (stdout) and Graphviz dot (--out).
    Export {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            data,
            schema,
            depth,
            mode,
            lambda,
            epsilon,
            rho,
            rho_mean,
            r,
            budget_mode,
            seed,
            backend,
            iter_cap,
            time_cap,
            no_strengthen,
            out,
        } => {
            let args = TrainArgs {
                data,
                schema,
                depth,
                mode: mode.into(),
                lambda,
                epsilon,
                rho,
                rho_mean,
                r,
                budget_mode: budget_mode.into(),
                seed,
                backend: backend.into(),
                iter_cap,
                time_cap,
                no_strengthen,
                out,
            };
            let outcome = cmd_train(&args)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.report).expect("report serializes")
            );
            eprintln!(
                "trained {} tree (depth {}) in {:.3}s: objective {}, bound {}, status {}",
                outcome.report.mode,
                outcome.report.depth,
                outcome.solve.wall_time.as_secs_f64(),
                outcome.report.objective,
                outcome.report.bound,
                outcome.report.status,
            );
            eprintln!(
                "wrote {} and {}",
                outcome.tree_path.display(),
                outcome.report_path.display()
            );
            Ok(())
        }
        Command::Evaluate {
            tree,
            data,
            schema,
            rho,
            rho_mean,
            rho_offset,
            rho_radius,
            k,
            seed,
            out,
        } => {
            let args = EvaluateArgs {
                tree,
                data,
                schema,
                rho,
                rho_mean,
                rho_offset,
                rho_radius,
                k,
                seed,
                out,
            };
            let report = cmd_evaluate(&args)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::Calibrate {
            data,
            schema,
            lambda,
            epsilon,
            rho,
            rho_mean,
            seed,
            out,
        } => {
            let args = CalibrateArgs {
                data,
                schema,
                lambda,
                epsilon,
                rho,
                rho_mean,
                seed,
                out,
            };
            let rendered = cmd_calibrate(&args)?;
            print!("{rendered}");
            Ok(())
        }
        Command::Export { tree, out } => {
            let args = ExportArgs { tree, out };
            let text = cmd_export(&args)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
