use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crossat::config::RunConfig;
use crossat::datamodel::{load_features, load_word_table, synth_generate, Dataset, FeatureRecord};
use crossat::eval::{evaluate, evaluate_classes, permutation_null};
use crossat::network::{load_checkpoint, save_checkpoint, ModelParams};
use crossat::pipeline::{
    ablation_medians, embeddings_text, init_for, run_ablation_on, AblationRow, EvalPlan,
};
use crossat::retrieval::{build_index, Gating, GalleryIndex};
use crossat::trainer::{fit, StopReason};

#[derive(Parser)]
#[command(name = "crossat", version, about = "Cross-modal zero-shot sketch/image embedding and retrieval")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, env = "CROSSAT_CONFIG")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature file and word-vector table.
    Synth,
    /// Train on the seen classes; writes the checkpoint and metrics log.
    Train,
    /// Write shared-space embeddings (hash codes for code metrics) of every record.
    Encode,
    /// Build and export a gallery index over the unseen classes.
    Index,
    /// Print the k nearest gallery entries for one query record.
    Query {
        /// Record id in the feature file.
        id: String,
    },
    /// Zero-shot evaluation; writes the report and prints its summary line.
    Eval {
        /// Score the seen classes instead of the unseen ones.
        #[arg(long)]
        seen: bool,
    },
    /// Train and evaluate every cell of the ablation grid.
    Ablate,
    /// Print the effective configuration.
    Config,
}

/// Missing inputs the user must supply; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
            None => Err(Usage(format!("--set expects KEY=VALUE, got {s:?}")).into()),
        })
        .collect()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Usage(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

fn model(cfg: &RunConfig) -> Result<ModelParams> {
    require(&cfg.checkpoint, "checkpoint")?;
    load_checkpoint(&cfg.checkpoint).with_context(|| format!("loading {}", cfg.checkpoint.display()))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    require(&cfg.features, "feature file")?;
    load_features(&cfg.features).with_context(|| format!("loading {}", cfg.features.display()))
}

fn unseen_gallery<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<Vec<&'a FeatureRecord>> {
    let split = cfg.split(ds)?;
    Ok(ds
        .select(cfg.task.gallery, &split.unseen)
        .into_iter()
        .map(|i| ds.record(i))
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    let overrides = parse_overrides(&cli.overrides)?;
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_text()),
        Command::Synth => {
            let (ds, words) = synth_generate(&cfg.synth)?;
            ds.save(&cfg.features)?;
            words.save(&cfg.words)?;
            eprintln!(
                "wrote {} records to {} and {} word vectors to {}",
                ds.len(),
                cfg.features.display(),
                words.len(),
                cfg.words.display()
            );
        }
        Command::Train => {
            let ds = dataset(&cfg)?;
            require(&cfg.words, "word-vector file")?;
            let words = load_word_table(&cfg.words)?;
            let split = cfg.split(&ds)?;
            let train = cfg.training();
            let params = init_for(&cfg.arch, &ds, &words, &split, train.seed)?;
            let result = fit(&ds, &split, &words, params, &train)?;
            save_checkpoint(&result.params, &cfg.checkpoint)?;
            result.log.save(&cfg.metrics)?;
            match result.stop {
                StopReason::Diverged { epoch, total } => {
                    bail!("training diverged at epoch {epoch} (total {total}); last good parameters saved")
                }
                StopReason::Converged { epoch } => eprintln!("converged at epoch {epoch}"),
                StopReason::Completed => eprintln!("completed {} epochs", result.log.epochs.len()),
            }
        }
        Command::Encode => {
            let m = model(&cfg)?;
            let ds = dataset(&cfg)?;
            std::fs::write(&cfg.embeddings, embeddings_text(&m, &ds, cfg.metric.uses_codes())?)?;
            eprintln!("wrote {} embeddings to {}", ds.len(), cfg.embeddings.display());
        }
        Command::Index => {
            let m = model(&cfg)?;
            let ds = dataset(&cfg)?;
            if cfg.gating == Gating::QueryConditioned {
                bail!("a query-conditioned gallery is encoded per query and cannot be exported");
            }
            let gallery = unseen_gallery(&cfg, &ds)?;
            let index = build_index(&gallery, &m, cfg.task, cfg.metric, cfg.gating)?;
            index.save(&cfg.index)?;
            eprintln!("indexed {} entries into {}", index.len(), cfg.index.display());
        }
        Command::Query { id } => {
            let m = model(&cfg)?;
            let ds = dataset(&cfg)?;
            let query = ds
                .find(&id)
                .ok_or_else(|| Usage(format!("no record with id {id:?} in {}", cfg.features.display())))?;
            let index = if cfg.gating == Gating::QueryConditioned {
                build_index(&unseen_gallery(&cfg, &ds)?, &m, cfg.task, cfg.metric, cfg.gating)?
            } else {
                require(&cfg.index, "index")?;
                GalleryIndex::load(&cfg.index)?
            };
            let result = index.query_knn(query, &m, cfg.k)?;
            if result.truncated {
                eprintln!("warning: k={} exceeds the gallery size {}", cfg.k, index.len());
            }
            for h in result.hits {
                println!("{}\t{}\t{}", h.id, h.label, h.distance);
            }
        }
        Command::Eval { seen } => {
            let m = model(&cfg)?;
            let ds = dataset(&cfg)?;
            let split = cfg.split(&ds)?;
            let opts = cfg.eval_options();
            let (report, rankings) = if seen {
                evaluate_classes(&m, &ds, &split.seen, &opts)?
            } else {
                evaluate(&m, &ds, &split, &opts)?
            };
            report.save(&cfg.report)?;
            let null = permutation_null(&rankings, cfg.null_shuffles, opts.map_cutoff, cfg.train.seed)?;
            eprintln!(
                "mAP {:.4} (permutation null {:.4} ± {:.4} over {} shuffles)",
                report.map, null.mean, null.std, null.shuffles
            );
            println!("{}", report.summary_line());
        }
        Command::Ablate => {
            let ds = dataset(&cfg)?;
            require(&cfg.words, "word-vector file")?;
            let words = load_word_table(&cfg.words)?;
            let split = cfg.split(&ds)?;
            let cells = cfg.ablate_grid.cells();
            let plan = EvalPlan { k: cfg.k, gating: cfg.gating, null_shuffles: cfg.null_shuffles };
            let rows = run_ablation_on(&ds, &words, &split, &cfg.arch, &cfg.train, &plan, &cells, &cfg.ablate_seeds)?;
            let mut csv = format!("#crossat-ablation v1\n{}\n", AblationRow::HEADER);
            for r in &rows {
                csv.push_str(&r.csv_line());
                csv.push('\n');
            }
            std::fs::write(&cfg.ablation_out, csv)?;
            println!("configuration\tmedian_unseen_map");
            for (cell, m) in ablation_medians(&cells, &rows) {
                println!("{cell}\t{m}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
