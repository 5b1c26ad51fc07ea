//! `cgrl`: split a graph into a stream, train a continual-learning
//! strategy over it, re-evaluate saved checkpoints and consolidate
//! run directories into report tables.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 training divergence.

mod settings;

use cgrl_core::data::{
    load_stream, read_citation_files, read_triple_file, save_stream, statistics_table,
};
use cgrl_core::error::{Error, Result};
use cgrl_core::eval::evaluate_upto;
use cgrl_core::graph::StreamMode;
use cgrl_core::model::Model;
use cgrl_core::pipeline::{
    emit_report, run_experiment, split_stream_kg, split_stream_ne, ExperimentSpec, ReportRow,
    SplitSpec, Strategy,
};
use cgrl_core::Scalar;
use clap::{Parser, Subcommand};
use settings::{parse_ratios, ConfigOverrides};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cgrl", version, about = "Continual graph representation learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split raw graph data into a deterministic stream directory.
    Split {
        /// Tab-separated `head relation tail` file (link-prediction mode).
        #[arg(long, conflicts_with_all = ["nodes", "edges"], required_unless_present = "nodes")]
        triples: Option<PathBuf>,
        /// Node table `id<TAB>label<TAB>f1,f2,...` (node-classification mode).
        #[arg(long, requires = "edges")]
        nodes: Option<PathBuf>,
        /// Edge list `id<TAB>id`, one edge per line.
        #[arg(long, requires = "nodes")]
        edges: Option<PathBuf>,
        /// Comma-separated part fractions.
        #[arg(long, default_value = "0.8,0.05,0.05,0.05,0.05")]
        parts: String,
        /// Train,validation,query fractions within each part.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        within: String,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Stream directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one strategy over a stream and write its run directory.
    Train {
        /// Stream directory produced by `split`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// dicgrl | lower | upper | ewc | emr | agem.
        #[arg(long)]
        strategy: Strategy,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Re-evaluate a saved checkpoint on every query set released up
    /// to a part. Honors CGRL_EVAL_THREADS for parallel ranking.
    Eval {
        /// Stream directory the run was trained on.
        #[arg(long)]
        data: PathBuf,
        /// Completed run directory (reads experiment.json, checkpoints/).
        #[arg(long)]
        run: PathBuf,
        /// Part index; defaults to the final part.
        #[arg(long)]
        part: Option<usize>,
        /// Write the metrics row here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Consolidate the run directories under a parent into summary tables.
    Report {
        /// Directory holding one completed run directory per strategy.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { triples, nodes, edges, parts, within, seed, out } => {
            let part_ratios = parse_ratios(&parts)?;
            let within = parse_ratios(&within)?;
            let within: [f64; 3] = within.try_into().map_err(|v: Vec<f64>| {
                Error::Config(format!("within needs 3 fractions, got {}", v.len()))
            })?;
            let stream = match (triples, nodes, edges) {
                (Some(triples), None, None) => {
                    let raw = read_triple_file(&triples)?;
                    let spec = SplitSpec {
                        part_ratios,
                        within,
                        seed,
                        mode: StreamMode::LinkPrediction,
                    };
                    split_stream_kg::<Scalar>(&raw, &spec)?
                }
                (None, Some(nodes), Some(edges)) => {
                    let raw = read_citation_files::<Scalar>(&nodes, &edges)?;
                    let spec = SplitSpec {
                        part_ratios,
                        within,
                        seed,
                        mode: StreamMode::NodeClassification,
                    };
                    split_stream_ne(&raw, &spec)?
                }
                _ => unreachable!("clap enforces the input combinations"),
            };
            save_stream(&out, &stream)?;
            print!("{}", statistics_table(&stream));
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train { data, out, strategy, overrides } => {
            let (config, lambda) = overrides.resolve()?;
            let spec = ExperimentSpec { dataset: data, output: out, strategy, config, lambda };
            let rows = run_experiment::<Scalar>(&spec)?;
            for row in &rows {
                println!("{}", format_row(row));
            }
            println!("wrote {}", spec.output.display());
            Ok(())
        }
        Command::Eval { data, run, part, out } => {
            let dataset = load_stream::<Scalar>(&data)?;
            let text = std::fs::read_to_string(run.join("experiment.json")).map_err(|e| {
                Error::Data(format!("cannot read {}: {e}", run.join("experiment.json").display()))
            })?;
            let spec: ExperimentSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("bad experiment.json: {e}")))?;
            let part = part.unwrap_or(dataset.parts.len().saturating_sub(1));
            let mut model = if dataset.mode == StreamMode::LinkPrediction {
                Model::<Scalar>::new_kg(
                    spec.config.clone(),
                    dataset.node_count,
                    dataset.relation_count,
                )?
            } else {
                let features = dataset
                    .node_features
                    .as_ref()
                    .ok_or_else(|| Error::Data("stream lacks node features".into()))?;
                Model::<Scalar>::new_ne(spec.config.clone(), features, dataset.num_classes)?
            };
            let checkpoint = run.join("checkpoints").join(format!("part_{part}.json"));
            model.store.load_checkpoint(&checkpoint)?;
            let row = evaluate_upto(&model, &dataset, part)?;
            let json = serde_json::to_string_pretty(&row)
                .map_err(|e| Error::Data(format!("metrics serialization failed: {e}")))?;
            match out {
                Some(path) => {
                    std::fs::write(&path, json).map_err(Error::Io)?;
                    println!("wrote {}", path.display());
                }
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Report { dir } => {
            emit_report(&dir)?;
            println!("wrote {}", dir.join("summary.csv").display());
            Ok(())
        }
    }
}

fn format_row(row: &ReportRow) -> String {
    let m = &row.metrics;
    if m.accuracy_whole > 0.0 || m.accuracy_avg > 0.0 {
        format!(
            "part {}: accuracy whole={:.4} avg={:.4} over {} queries ({:.1}s)",
            m.part, m.accuracy_whole, m.accuracy_avg, m.n_queries, row.runtime_s
        )
    } else {
        format!(
            "part {}: mrr whole={:.4} avg={:.4} hits@10 whole={:.4} avg={:.4} over {} queries ({:.1}s)",
            m.part, m.mrr_whole, m.mrr_avg, m.hits10_whole, m.hits10_avg, m.n_queries, row.runtime_s
        )
    }
}
