use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mziln_cli::commands::{
    cmd_fit, cmd_simulate, cmd_spearman, cmd_transform, format_table1, CellReport, FitOptions,
    SimulateOptions, SpearmanOptions, TransformOptions,
};
use mziln_cli::ingest::{AbundanceMode, IngestOptions, Orientation};
use mziln_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "mziln", version, about = "Zero-inflated logistic-normal regression for compositional data")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MZILN_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
}

#[derive(Args)]
struct InputArgs {
    /// Taxa table: subject ids in the first column, one column per taxon.
    #[arg(long)]
    taxa: PathBuf,

    /// Taxon name or 1-based column used as reference (default: last column).
    #[arg(long)]
    reference_taxon: Option<String>,

    #[arg(long, value_enum, default_value_t = Orientation::SubjectsAsRows)]
    orientation: Orientation,

    #[arg(long, value_enum, default_value_t = AbundanceMode::Auto)]
    abundance: AbundanceMode,

    #[arg(long, value_enum, default_value_t = Format::Tsv)]
    format: Format,
}

impl InputArgs {
    fn options(&self) -> IngestOptions {
        IngestOptions {
            orientation: self.orientation,
            mode: self.abundance,
            reference_taxon: self.reference_taxon.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated penalized fit of taxa on covariates.
    Fit {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        covariates: PathBuf,
        /// lasso, alasso, enet, scad or mcp.
        #[arg(long, default_value = "mcp")]
        penalty: String,
        /// Concavity for MCP and SCAD.
        #[arg(long)]
        penalty_gamma: Option<f64>,
        #[arg(long)]
        enet_alpha: Option<f64>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 100)]
        lambda_grid_size: usize,
        /// Pick the largest lambda within one standard error of the minimum.
        #[arg(long)]
        one_se: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the scenarios of a manifest.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Write per-subject log-ratios.
    Transform {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "transform.tsv")]
        out: PathBuf,
    },
    /// Spearman tests with Benjamini-Hochberg selection.
    Spearman {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        covariates: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        fdr: f64,
        #[arg(long, default_value = "spearman.tsv")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Fit {
            input,
            covariates,
            penalty,
            penalty_gamma,
            enet_alpha,
            folds,
            lambda_grid_size,
            one_se,
            seed,
            out_dir,
        } => {
            let report = cmd_fit(&FitOptions {
                taxa: input.taxa.clone(),
                covariates,
                ingest: input.options(),
                penalty,
                penalty_gamma,
                enet_alpha,
                folds,
                lambda_grid_size,
                one_se,
                seed,
                out_dir,
            })?;
            println!(
                "reference {}; lambda {:.4e}; {} pairs selected",
                report.reference_taxon,
                report.lambda_selected,
                report.selected.len()
            );
        }
        Command::Simulate { manifest, out_dir } => {
            for cell in cmd_simulate(&SimulateOptions { manifest, out_dir })? {
                let key: Vec<String> = cell.key.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("[{}]", key.join(", "));
                match &cell.report {
                    CellReport::LowDim(r) => print!("{}", format_table1(r)),
                    CellReport::HighDim(r) => {
                        println!(
                            "recall {:.4} precision {:.4} f1 {:.4} ({} failed)",
                            r.mziln.recall_mean, r.mziln.precision_mean, r.mziln.f1_mean, r.n_failed
                        );
                        if let Some(s) = &r.spearman {
                            println!("spearman recall {:.4} precision {:.4} f1 {:.4}", s.recall_mean, s.precision_mean, s.f1_mean);
                        }
                    }
                }
            }
        }
        Command::Transform { input, out } => {
            let degenerate = cmd_transform(&TransformOptions {
                taxa: input.taxa.clone(),
                ingest: input.options(),
                out,
            })?;
            if degenerate > 0 {
                println!("{degenerate} degenerate subjects");
            }
        }
        Command::Spearman {
            input,
            covariates,
            fdr,
            out,
        } => {
            let n = cmd_spearman(&SpearmanOptions {
                taxa: input.taxa.clone(),
                covariates,
                ingest: input.options(),
                fdr,
                out,
            })?;
            println!("{n} pairs selected");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
