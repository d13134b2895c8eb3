//! Command-line front end: dataset import, experiment runs, archive replay,
//! and dependence analytics.
//!
//! Exit codes: 0 success, 1 configuration error, 2 backend failure,
//! 3 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fieldvqa::dataset::{
    import_cord, import_funsd_vqa, import_sroie, load_canonical, save_canonical,
};
use fieldvqa::dependence::{dependence_matrix, recommend_groups};
use fieldvqa::report::DependenceSection;
use fieldvqa::runner::{replay, run_experiment, ExperimentConfig, RunnerError};

#[derive(Parser)]
#[command(
    name = "fieldvqa",
    version,
    about = "Multi-field document VQA extraction harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a third-party annotation layout into the canonical format.
    Import {
        /// Source format: cord, sroie, funsd, or canonical.
        format: String,
        /// Annotation directory (cord, sroie) or file (funsd, canonical).
        src: PathBuf,
        /// Canonical output file.
        #[arg(short, long)]
        output: PathBuf,
        /// Override the dataset name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Run an experiment described by a config file.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Regrade an archive without backend traffic.
    Replay {
        #[arg(short, long)]
        archive: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Fit the field-dependence matrix over a dataset's numeric fields.
    AnalyzeDependence {
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Write the matrix as CSV here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print recommended joint-prompt field groups.
    RecommendGroups {
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
    /// Re-emit report CSVs from an archive.
    Report {
        #[arg(short, long)]
        archive: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        /// Print accuracy CSV to stdout.
        #[arg(long)]
        csv: bool,
        /// Print plot CSV to stdout.
        #[arg(long)]
        plot: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), RunnerError> {
    match command {
        Command::Import {
            format,
            src,
            output,
            name,
        } => {
            let mut bundle = match format.as_str() {
                "cord" => import_cord(&src)?,
                "sroie" => import_sroie(&src)?,
                "funsd" | "funsd-vqa" => import_funsd_vqa(&src)?,
                "canonical" => load_canonical(&src)?,
                other => {
                    return Err(RunnerError::Config(format!(
                        "unknown import format `{other}` (expected cord, sroie, funsd, canonical)"
                    )))
                }
            };
            if let Some(name) = name {
                bundle.name = name;
            }
            save_canonical(&bundle, &output)?;
            println!(
                "imported {} document(s), {} field(s) -> {}",
                bundle.documents.len(),
                bundle.fields.len(),
                output.display()
            );
            Ok(())
        }
        Command::Run { config } => {
            let config = ExperimentConfig::from_file(&config)?;
            let report = run_experiment(&config)?;
            print_summary(&report);
            println!("outputs written under: {}", config.output_dir.display());
            Ok(())
        }
        Command::Replay { archive, config } => {
            let config = ExperimentConfig::from_file(&config)?;
            let report = replay(&archive, &config)?;
            print_summary(&report);
            println!("outputs written under: {}", config.output_dir.display());
            Ok(())
        }
        Command::AnalyzeDependence {
            dataset,
            threshold,
            output,
        } => {
            let bundle = load_canonical(&dataset)?;
            let targets = bundle.numeric_field_ids();
            let matrix = dependence_matrix(&bundle, &targets)?;
            let groups = recommend_groups(&matrix, threshold);
            let section = DependenceSection::from_matrix(&matrix, groups);
            if !section.skipped.is_empty() {
                eprintln!(
                    "note: {} triplet(s) skipped for insufficient data",
                    section.skipped.len()
                );
            }
            let csv = section.to_csv();
            match output {
                Some(path) => {
                    std::fs::write(&path, csv).map_err(|source| RunnerError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    println!("wrote {} fit(s) -> {}", section.rows.len(), path.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::RecommendGroups { dataset, threshold } => {
            let bundle = load_canonical(&dataset)?;
            let targets = bundle.numeric_field_ids();
            let matrix = dependence_matrix(&bundle, &targets)?;
            for group in recommend_groups(&matrix, threshold) {
                println!("{}", group.join(","));
            }
            Ok(())
        }
        Command::Report {
            archive,
            config,
            csv,
            plot,
        } => {
            let config = ExperimentConfig::from_file(&config)?;
            let report = replay(&archive, &config)?;
            if csv {
                print!("{}", report.accuracy_csv());
            }
            if plot {
                print!("{}", report.plot_csv()?);
            }
            if !csv && !plot {
                print_summary(&report);
            }
            Ok(())
        }
    }
}

fn print_summary(report: &fieldvqa::report::ExperimentReport) {
    println!("dataset: {}  model: {}", report.dataset, report.model);
    for table in &report.tables {
        println!(
            "{}: document-level {:.4} ({}/{})",
            table.strategy,
            table.document_level.value(),
            table.document_level.correct,
            table.document_level.total
        );
    }
    if let Some(delta) = report.document_delta {
        println!(
            "document-level delta (joint - separate): {}",
            fieldvqa::metrics::format_delta(delta)
        );
    }
    for warning in &report.provenance.warnings {
        println!("warning: {warning}");
    }
    println!("raw responses archived at: {}", report.archive_dir);
}
