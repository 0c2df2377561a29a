use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::Value;

use urbanrep::config::{Head, RunConfig};
use urbanrep::diffusion::{self, PredictionSet, RegionRow};
use urbanrep::encoder::{CellEncoder, EMBED_WALK_EPOCH};
use urbanrep::eval::{covering_grid, density_csv, density_svg, kde, quantile, silverman_bandwidth};
use urbanrep::io::tables::{read_embeddings, read_predictions, write_embeddings, write_predictions, write_priors};
use urbanrep::io::{
    load_checkpoint, load_city, read_json, save_checkpoint, save_city, write_json, write_synthetic, SyntheticSpec,
    Targets,
};
use urbanrep::numerics::Seeds;
use urbanrep::pipeline::{self, TrainedHead};
use urbanrep::region::{CellEmbeddings, RegionEmbedding};
use urbanrep::walks::{walk_corpus, write_walks_jsonl, CellGraph};
use urbanrep::{Error, Result};

#[derive(Parser)]
#[command(
    name = "urbanrep",
    version,
    about = "Urban region representations and multi-task region prediction"
)]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: a JSON file overlaid with any flags given explicitly.
#[derive(Args)]
struct ConfigArgs {
    /// RunConfig JSON used as the base before flags are applied.
    #[arg(long = "config")]
    config_file: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city with known ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Synthetic city description (JSON); the built-in city when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the hexagonal grid for a city and write it as cells/edges.
    Grid {
        #[arg(long)]
        city: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sample the walk corpus used for embedding extraction.
    Walks {
        #[arg(long)]
        city: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the cell encoder on one or more cities.
    Pretrain {
        #[arg(long, required = true)]
        city: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Extract cell embeddings for a city with a pretrained encoder.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        city: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Aggregate cell embeddings into region embeddings.
    Aggregate {
        #[arg(long)]
        city: PathBuf,
        /// cell_embeddings.csv from `embed`.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the prediction head on region embeddings and targets.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predict targets for every region of an embeddings file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// region_embeddings.csv of the regions to predict.
        #[arg(long)]
        embeddings: PathBuf,
        /// Only predict the regions held out by `train`.
        #[arg(long)]
        test_only: bool,
        /// Task ids to predict; every trained task when omitted.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against targets.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// City directory holding targets.csv.
        #[arg(long)]
        city: PathBuf,
        /// Region whose sample density is plotted; the first prediction when omitted.
        #[arg(long)]
        region: Option<u64>,
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and score the full model and each ablation on one dataset.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Continue diffusion training on new task ids with every other parameter warm-started.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Task ids trained during fine-tuning.
        #[arg(long, value_delimiter = ',', required = true)]
        finetune_tasks: Vec<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// region_embeddings.csv, one per city.
    #[arg(long, required = true)]
    embeddings: Vec<PathBuf>,
    /// City directory holding targets.csv, paired with `--embeddings` by position.
    #[arg(long, required = true)]
    city: Vec<PathBuf>,
    /// Fraction of regions held out for testing.
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    /// Restrict training targets to these task ids.
    #[arg(long, value_delimiter = ',')]
    train_tasks: Vec<usize>,
}

/// Overlays the flags that were set explicitly (or through the environment) onto the config file.
fn resolve_config(args: &ConfigArgs, matches: &ArgMatches) -> Result<RunConfig> {
    let Some(path) = &args.config_file else {
        args.run.validate()?;
        return Ok(args.run.clone());
    };
    let mut base = serde_json::to_value(RunConfig::from_json_file(path)?)?;
    let flags = serde_json::to_value(&args.run)?;
    if let (Value::Object(base), Value::Object(flags)) = (&mut base, flags) {
        for (key, value) in flags {
            let explicit = matches!(
                matches.value_source(&key),
                Some(ValueSource::CommandLine | ValueSource::EnvVariable)
            );
            if explicit {
                base.insert(key, value);
            }
        }
    }
    let cfg: RunConfig = serde_json::from_value(base)?;
    cfg.validate()?;
    Ok(cfg)
}

fn snapshot(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&out.join("config.json"), cfg)
}

fn region_table(path: &Path) -> Result<Vec<RegionEmbedding>> {
    Ok(read_embeddings(path, "region_id", "aggregate")?
        .into_iter()
        .map(|(region_id, h)| RegionEmbedding { region_id, h })
        .collect())
}

/// Region rows of every (embeddings, city) pair. With several cities, ids are
/// keyed by city position in the top 16 bits so they stay unique.
fn load_rows(data: &DataArgs) -> Result<(Vec<RegionRow>, Targets)> {
    if data.embeddings.len() != data.city.len() {
        return Err(Error::Config(format!(
            "{} embeddings files but {} city directories",
            data.embeddings.len(),
            data.city.len()
        )));
    }
    let multi = data.city.len() > 1;
    let mut tables = Vec::new();
    let mut targets = Targets::default();
    for (ci, (emb, city)) in data.embeddings.iter().zip(&data.city).enumerate() {
        let key = |id: u64| if multi { ((ci as u64) << 48) | id } else { id };
        let mut t = urbanrep::io::dataset::read_targets(city)?;
        if t.is_empty() {
            return Err(Error::MissingArtifact {
                path: city.join("targets.csv"),
                producer: "synth (or supply targets.csv)".into(),
            });
        }
        for r in &mut t.rows {
            r.0 = key(r.0);
        }
        let mut table = region_table(emb)?;
        for r in &mut table {
            r.region_id = key(r.region_id);
        }
        tables.extend(table);
        targets.rows.extend(t.rows);
    }
    let tasks = targets.tasks();
    let mut rows = pipeline::region_rows(&tables, &targets, tasks);
    if !data.train_tasks.is_empty() {
        let keep: BTreeSet<usize> = data.train_tasks.iter().copied().collect();
        if let Some(bad) = keep.iter().find(|&&u| u >= tasks) {
            return Err(Error::Config(format!("task {bad} not present in targets")));
        }
        // tasks beyond the largest kept id are dropped so the model does not allocate them
        let width = keep.iter().max().map(|m| m + 1).unwrap_or(0);
        for r in &mut rows {
            r.y.truncate(width);
            for (u, y) in r.y.iter_mut().enumerate() {
                if !keep.contains(&u) {
                    *y = None;
                }
            }
        }
        rows.retain(|r| r.y.iter().any(Option::is_some));
    }
    Ok((rows, targets))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Split {
    train: Vec<u64>,
    test: Vec<u64>,
}

fn split_rows(rows: Vec<RegionRow>, data: &DataArgs, seed: u64) -> Result<(Vec<RegionRow>, Split)> {
    let ids: Vec<u64> = rows.iter().map(|r| r.region_id).collect();
    let (train, test) = pipeline::split_regions(&ids, data.test_fraction, seed)?;
    let rows = rows
        .into_iter()
        .filter(|r| train.binary_search(&r.region_id).is_ok())
        .collect();
    Ok((rows, Split { train, test }))
}

fn write_history(out: &Path, history: &[f64]) -> Result<()> {
    write_json(&out.join("history.json"), history)
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match cli.command {
        Command::Synth { out, spec, cfg } => {
            let cfg = resolve_config(&cfg, sub)?;
            let mut spec: SyntheticSpec = match spec {
                Some(p) => read_json(&p, "a synthetic city description")?,
                None => SyntheticSpec::default(),
            };
            if sub.value_source("edge_m") == Some(ValueSource::CommandLine) {
                spec.edge_m = cfg.edge_m;
            }
            let (city, _) = write_synthetic(&out, &spec, cfg.seed)?;
            snapshot(&out, &cfg)?;
            log::info!(
                "wrote {} cells, {} regions, {} targets to {}",
                city.cells.len(),
                city.regions.len(),
                city.targets.rows.len(),
                out.display()
            );
        }
        Command::Grid { city, out, cfg } => {
            let cfg = resolve_config(&cfg, sub)?;
            let c = load_city(&city)?;
            let meta = urbanrep::io::dataset::read_grid_meta(&city)?;
            save_city(&out, &c, meta.bbox)?;
            snapshot(&out, &cfg)?;
        }
        Command::Walks { city, out, cfg } => {
            let cfg = resolve_config(&cfg, sub)?;
            let c = load_city(&city)?;
            let graph = CellGraph::from_cells(&c.cells)?;
            let walks = walk_corpus(&graph, &cfg.walks(), &Seeds::new(cfg.seed), 0, EMBED_WALK_EPOCH)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_walks_jsonl(&out.join("walks.jsonl"), &walks)?;
            snapshot(&out, &cfg)?;
        }
        Command::Pretrain { city, out, cfg } => {
            let cfg = resolve_config(&cfg, sub)?;
            let cities = city.iter().map(|d| load_city(d)).collect::<Result<Vec<_>>>()?;
            let cells: Vec<_> = cities.iter().map(|c| &c.cells).collect();
            let (model, history) = pipeline::pretrain_encoder(&cells, &cfg)?;
            save_checkpoint(&out.join("encoder"), "encoder", &model.store)?;
            write_history(&out, &history)?;
            snapshot(&out, &cfg)?;
        }
        Command::Embed { model, city, out, cfg } => {
            let cfg = resolve_config(&cfg, sub)?;
            // the architecture and walk shape come from the pretraining run
            let trained: RunConfig = read_json(&model.join("config.json"), "pretrain")?;
            let mut enc = CellEncoder::new(trained.encoder(), &Seeds::new(trained.seed))?;
            load_checkpoint(&model.join("encoder"), "encoder", &mut enc.store, "pretrain")?;
            let walk_cfg = RunConfig {
                seed: cfg.seed,
                ..trained
            };
            let c = load_city(&city)?;
            let emb = pipeline::embed_cells(&enc, &c.cells, &walk_cfg)?;
            let rows: Vec<(u64, Vec<f32>)> = emb
                .sorted()
                .into_iter()
                .map(|(id, x)| (id as u64, x.to_vec()))
                .collect();
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_embeddings(&out.join("cell_embeddings.csv"), "cell_id", "x", &rows)?;
            snapshot(&out, &cfg)?;
        }
        Command::Aggregate {
            city,
            embeddings,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, sub)?;
            let c = load_city(&city)?;
            let rows = read_embeddings(&embeddings, "cell_id", "embed")?
                .into_iter()
                .map(|(id, x)| {
                    u32::try_from(id)
                        .map(|id| (id, x))
                        .map_err(|_| Error::Data(format!("cell id {id} out of range")))
                })
                .collect::<Result<Vec<_>>>()?;
            let emb = CellEmbeddings::new(rows)?;
            let regions = pipeline::aggregate_regions(&c.regions, &c.cells, &emb)?;
            let table: Vec<(u64, Vec<f32>)> = regions.into_iter().map(|r| (r.region_id, r.h)).collect();
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_embeddings(&out.join("region_embeddings.csv"), "region_id", "h", &table)?;
            snapshot(&out, &cfg)?;
        }
        Command::Train { data, out, cfg } => {
            let cfg = resolve_config(&cfg, sub)?;
            let (rows, _) = load_rows(&data)?;
            let (rows, split) = split_rows(rows, &data, cfg.seed)?;
            let (head, history) = pipeline::train_head(&rows, &cfg)?;
            pipeline::save_head(&out, &head)?;
            write_json(&out.join("split.json"), &split)?;
            write_history(&out, &history)?;
            snapshot(&out, &cfg)?;
        }
        Command::Predict {
            model,
            embeddings,
            test_only,
            tasks,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, sub)?;
            let head = pipeline::load_head(&model)?;
            let mut table = region_table(&embeddings)?;
            if test_only {
                let split: Split = read_json(&model.join("split.json"), "train")?;
                table.retain(|r| split.test.binary_search(&r.region_id).is_ok());
            }
            let trained = head.repository().tasks;
            let tasks = if tasks.is_empty() {
                (0..trained).collect()
            } else {
                tasks
            };
            let reqs = pipeline::requests(&table, &tasks);
            let preds = pipeline::predict_head(&head, &reqs, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_predictions(&out.join("predictions.csv"), &preds)?;
            write_priors(&out.join("priors.csv"), &preds)?;
            snapshot(&out, &cfg)?;
        }
        Command::Eval {
            predictions,
            city,
            region,
            task,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, sub)?;
            let targets = urbanrep::io::dataset::read_targets(&city)?;
            let preds: Vec<PredictionSet> = read_predictions(&predictions)?
                .into_iter()
                .map(|(region_id, task, point, samples)| PredictionSet {
                    region_id,
                    task,
                    point,
                    samples,
                    prior: 0.0,
                    neighbors: Vec::new(),
                    weights: Vec::new(),
                })
                .collect();
            let reports = pipeline::evaluate(&preds, &targets)?;
            let covered = preds
                .iter()
                .filter_map(|p| targets.get(p.region_id, p.task).map(|y| (p, y)))
                .filter(|(p, _)| p.samples.len() > 1)
                .map(|(p, y)| (quantile(&p.samples, 0.025) <= y && y <= quantile(&p.samples, 0.975)) as u8 as f64)
                .collect::<Vec<_>>();
            let coverage = if covered.is_empty() {
                None
            } else {
                Some(covered.iter().sum::<f64>() / covered.len() as f64)
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({ "tasks": reports, "band_coverage_95": coverage }),
            )?;
            let chosen = preds
                .iter()
                .find(|p| region.is_none_or(|r| r == p.region_id) && task.is_none_or(|u| u == p.task))
                .ok_or_else(|| Error::Data("no prediction matches --region/--task".into()))?;
            if chosen.samples.len() > 1 {
                let bw = silverman_bandwidth(&chosen.samples);
                let curve = kde(&chosen.samples, bw, &covering_grid(&chosen.samples, bw, 200))?;
                let csv_path = out.join("density.csv");
                std::fs::write(&csv_path, density_csv(&curve)).map_err(|e| Error::io(&csv_path, e))?;
                let svg_path = out.join("density.svg");
                let truth = targets.get(chosen.region_id, chosen.task);
                std::fs::write(&svg_path, density_svg(&curve, truth)).map_err(|e| Error::io(&svg_path, e))?;
            } else {
                log::warn!("single-sample predictions; density plot skipped");
            }
            for r in &reports {
                println!(
                    "task {}: R2 {:.4} MAE {:.4} RMSE {:.4} (n={})",
                    r.task, r.r2, r.mae, r.rmse, r.n
                );
            }
            snapshot(&out, &cfg)?;
        }
        Command::Ablate { data, out, cfg } => {
            let cfg = resolve_config(&cfg, sub)?;
            let (rows, targets) = load_rows(&data)?;
            if data.test_fraction <= 0.0 {
                return Err(Error::Config("ablate needs --test-fraction above 0".into()));
            }
            let all = rows.clone();
            let (train, split) = split_rows(rows, &data, cfg.seed)?;
            let test: Vec<RegionEmbedding> = all
                .iter()
                .filter(|r| split.test.binary_search(&r.region_id).is_ok())
                .map(|r| RegionEmbedding {
                    region_id: r.region_id,
                    h: r.h.clone(),
                })
                .collect();
            let tasks: Vec<usize> = (0..all[0].y.len()).collect();
            let table = pipeline::run_ablation(&train, &pipeline::requests(&test, &tasks), &targets, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut w = String::from("variant,task,r2,mae,rmse\n");
            for row in &table {
                for r in &row.reports {
                    w.push_str(&format!("{},{},{},{},{}\n", row.variant, r.task, r.r2, r.mae, r.rmse));
                }
                let mean = row.reports.iter().map(|r| r.r2).sum::<f64>() / row.reports.len() as f64;
                println!("{:<10} mean R2 {:.4}", row.variant, mean);
            }
            let path = out.join("ablation.csv");
            std::fs::write(&path, w).map_err(|e| Error::io(&path, e))?;
            write_json(&out.join("ablation.json"), &table)?;
            snapshot(&out, &cfg)?;
        }
        Command::Finetune {
            model,
            data,
            finetune_tasks,
            finetune_epochs,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, sub)?;
            let TrainedHead::Diffusion(base) = pipeline::load_head(&model)? else {
                return Err(Error::Config("fine-tuning needs a diffusion head".into()));
            };
            if cfg.head != Head::Diffusion {
                return Err(Error::Config("fine-tuning needs --head diffusion".into()));
            }
            let (rows, _) = load_rows(&data)?;
            let (rows, split) = split_rows(rows, &data, cfg.seed)?;
            let epochs = finetune_epochs.unwrap_or(cfg.diff_epochs);
            let (tuned, history) = diffusion::finetune(&base, &rows, &finetune_tasks, epochs, &Seeds::new(cfg.seed))?;
            pipeline::save_head(&out, &TrainedHead::Diffusion(tuned))?;
            write_json(&out.join("split.json"), &split)?;
            write_history(&out, &history)?;
            snapshot(&out, &cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
