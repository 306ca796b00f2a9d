use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbsee::experiment::{parse_config, run, schema, ExperimentConfig};
use fbsee::Error;

const OUTPUTS: &str = "Outputs (CSV floats carry 17 significant digits; every run also writes manifest.json):
  operators-check  operators.csv: suite,case,value,reference,error,tolerance,pass
                   operators_summary.json
  smp-scaling      scaling.csv, scaling_nonlinear.csv: epsilon,sup_E_p2,sup_E_p4,remainder,flags
                   variation.csv, variation_nonlinear.csv: epsilon,lhs,lhs_se,rhs,rhs_se,gap,gap_se
                   smp_summary.json
  lq-solve         control.csv: t,u<k>...,psi<k>... (path means)
                   lq_summary.json
  lq-verify        perturbations.csv: direction,epsilon,cost_increase,standard_error
                   stationarity.csv: direction,first_variation,standard_error
                   finite_difference.csv: direction,adjoint_variation,adjoint_se,finite_difference,finite_difference_se
                   verify_summary.json
  ibp-check        ibp.csv: pair,n_steps,lhs,rhs,gap,ratio";

#[derive(Parser)]
#[command(name = "fbsee-lab", version = fbsee::experiment::VERSION, about = "Fractional backward evolution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    #[command(after_help = OUTPUTS)]
    Run {
        /// JSON configuration; see `fbsee-lab schema`.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a configuration file without running it.
    Validate {
        /// JSON configuration; see `fbsee-lab schema`.
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the JSON schema of configuration files.
    Schema,
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Config { .. } => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn execute(cfg: ExperimentConfig, threads: Option<usize>) -> Result<PathBuf, Error> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Io(format!("thread pool: {e}")))?;
    let output = pool.install(|| run(&cfg))?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    for (name, content) in &output.files {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Schema => {
            println!("{}", schema());
            Ok(())
        }
        Command::Validate { config } => load(&config).map(|cfg| println!("{}: valid {} configuration", config.display(), cfg.experiment.name())),
        Command::Run { config, seed, output_dir, threads } => {
            if threads == Some(0) {
                Err(Error::Config { field: "--threads".into(), detail: "must be at least 1".into() })
            } else {
                load(&config).and_then(|mut cfg| {
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    if let Some(d) = output_dir {
                        cfg.output_dir = d;
                    }
                    let dir = execute(cfg, threads)?;
                    println!("results written to {}", dir.display());
                    Ok(())
                })
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
