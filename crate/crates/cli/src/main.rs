use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dlrt::harness::{
    compare, halving_ratios, run_energy_study, run_experiment, run_scaling_study, verify_suite,
    write_rows, EnergyStudy, ExperimentConfig, OptimizerKind, ScalingStudy,
};
use dlrt::Error;

#[derive(Parser)]
#[command(
    name = "dlrt",
    version,
    about = "Momentum-based dynamical low-rank training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Train(RunArgs),
    /// Run several optimizers on the same task and join their metrics.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated optimizer names; all six by default.
        #[arg(long, value_delimiter = ',')]
        optimizers: Vec<OptimizerKind>,
    },
    /// Integrate the continuous-time flows and write their traces.
    Flow {
        #[arg(long, default_value = "runs/flow")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Study::All)]
        study: Study,
    },
    /// Run the self-check suite; exits nonzero if any check fails.
    Verify,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Study {
    Energy,
    Scaling,
    All,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    init_rank: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> dlrt::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(seed => seed, out_dir => out_dir, optimizer => optimizer, lr => lambda, gamma => gamma,
             beta1 => beta1, beta2 => beta2, eps => eps, tau => tau, init_rank => init_rank,
             max_steps => max_steps);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Numeric(_) | Error::Stiffness { .. } => 3,
        Error::Verification(_) => 4,
        _ => 1,
    }
}

fn train(args: &RunArgs) -> dlrt::Result<()> {
    let cfg = args.resolve()?;
    let out = run_experiment(&cfg)?;
    let row = &out.last;
    println!(
        "{} step {} loss {:.6e} val {:.6} ranks [{}] params {} compression {:.2}%",
        cfg.optimizer,
        row.step,
        row.loss,
        row.val_metric,
        row.ranks,
        row.total_params,
        row.compression_ratio
    );
    if let Some(acc) = out.train_accuracy {
        println!("train accuracy {acc:.4}");
    }
    println!("wrote {}", out.out_dir.display());
    Ok(())
}

fn compare_cmd(args: &RunArgs, optimizers: &[OptimizerKind]) -> dlrt::Result<()> {
    let cfg = args.resolve()?;
    let kinds = if optimizers.is_empty() {
        OptimizerKind::ALL.to_vec()
    } else {
        optimizers.to_vec()
    };
    let outcomes = compare(&cfg, &kinds, &cfg.out_dir)?;
    for (kind, out) in kinds.iter().zip(&outcomes) {
        println!(
            "{:<14} loss {:.6e} val {:.6} ranks [{}] compression {:.2}%",
            kind.name(),
            out.last.loss,
            out.last.val_metric,
            out.last.ranks,
            out.last.compression_ratio
        );
    }
    println!("wrote {}", cfg.out_dir.join("compare.csv").display());
    Ok(())
}

fn flow(out_dir: &Path, study: Study) -> dlrt::Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut failed = Vec::new();
    if study != Study::Scaling {
        let res = run_energy_study(&EnergyStudy::default())?;
        write_rows(&out_dir.join("energy.csv"), &res.trace)?;
        println!(
            "energy: monotone {}, identity error {:.3e}, terminal residual {:.3e}",
            res.report.first_violation.is_none(),
            res.report
                .identity_rel_error
                .unwrap_or(res.report.identity_defect),
            res.terminal_residual
        );
        if !res.report.passed {
            failed.push("energy");
        }
    }
    if study != Study::Energy {
        let s = ScalingStudy::default();
        let rows = run_scaling_study(&s)?;
        write_rows(&out_dir.join("scaling.csv"), &rows)?;
        for &c in &s.conds {
            let ratios = halving_ratios(&rows, c);
            println!("scaling: cond(S0) {c:e}, error ratios {ratios:.3?}");
            if !ratios.iter().all(|r| (1.33..=3.0).contains(r)) {
                failed.push("scaling");
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "flow studies failed: {}",
            failed.join(", ")
        )))
    }
}

fn verify() -> dlrt::Result<()> {
    let outcomes = verify_suite();
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "{failed} of {} checks failed",
            outcomes.len()
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Compare { run, optimizers } => compare_cmd(run, optimizers),
        Command::Flow { out_dir, study } => flow(out_dir, *study),
        Command::Verify => verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
