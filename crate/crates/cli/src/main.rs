use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use nudge_core::candidates::rules_from_library;
use nudge_core::eval::{grid_search, scaling_benchmark, table_space, DailyMonitor, Experiment};
use nudge_core::gnn::{train, train_with, HyperParams, ModelState, TrainOptions};
use nudge_core::graph::{
    construct_graph, read_jsonl, write_jsonl, ConstructOptions, EntityId, GraphSnapshot, InteractionEvent,
    MarkerCatalog, NudgeTemplate, ParticipantRecord,
};
use nudge_core::pipeline::{
    run_parallel, Budget, DailyInputs, DailyRun, DayRecord, DeliveryHistory, PipelineConfig, PipelineError, Selected,
};
use nudge_core::serving::{router, NudgeService};
use nudge_core::synth::{generate_population, PopulationSpec};
use serde::Deserialize;

const FEEDBACK_LOG: &str = "feedback.jsonl";

#[derive(Parser)]
#[command(name = "nudge", version, about = "Personalized health nudge recommender")]
struct Cli {
    /// TOML file with optional [model], [pipeline] and [eval] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of parallel batches.
    #[arg(long = "batches", short = 'b', global = true)]
    batches: Option<usize>,
    /// Nudges per user per day, or "unlimited".
    #[arg(long, global = true)]
    k_daily: Option<String>,
    #[arg(long, global = true)]
    p_diversity: Option<f64>,
    #[arg(long, global = true)]
    d_neg_filter: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataDir {
    /// Directory holding catalog.toml, participants.jsonl, library.jsonl and
    /// interactions.jsonl.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population into a data directory.
    Synth {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 96)]
        nudges: usize,
        /// Use the sparse benchmark preset.
        #[arg(long)]
        bench: bool,
    },
    /// Build the knowledge graph and print its statistics.
    Construct {
        #[command(flatten)]
        data: DataDir,
        /// Write the snapshot as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one tab-separated line per triplet.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Train a model from scratch and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataDir,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Warm-start a checkpoint on the current graph and continue training.
    Finetune {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the daily pipeline and write the day's nudge file.
    Score {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Defaults to the day after the latest interaction.
        #[arg(long)]
        day: Option<u32>,
    },
    /// Serve published day files over HTTP.
    Serve {
        #[command(flatten)]
        data: DataDir,
        /// Day files written by `score`.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Train on a holdout split and report ranking metrics.
    Evaluate {
        #[command(flatten)]
        data: DataDir,
        /// Append the report to this monitoring log.
        #[arg(long)]
        monitor: Option<PathBuf>,
    },
    /// Train and score every configuration in the search space.
    Gridsearch {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on training epochs per configuration.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Time the daily run over synthetic populations of several sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "200,500,2000,5000,25000")]
        users: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    model: HyperParams,
    pipeline: PipelineConfig,
    eval: EvalConfig,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    holdout: f64,
    k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { holdout: 0.2, k: 3 }
    }
}

impl Cli {
    fn config(&self) -> Result<Config> {
        let mut cfg: Config = match &self.config {
            Some(p) => {
                let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&s).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.pipeline.seed = s;
        }
        if let Some(b) = self.batches {
            cfg.pipeline.batches = b;
        }
        if let Some(k) = &self.k_daily {
            cfg.pipeline.k_daily = match k.as_str() {
                "unlimited" => Budget::Unlimited,
                n => Budget::Limited(n.parse().context("--k-daily takes a count or \"unlimited\"")?),
            };
        }
        if let Some(p) = self.p_diversity {
            cfg.pipeline.p_diversity = p;
        }
        if let Some(d) = self.d_neg_filter {
            cfg.pipeline.d_neg_filter = d;
        }
        cfg.pipeline.validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

struct Data {
    catalog: MarkerCatalog,
    participants: Vec<ParticipantRecord>,
    library: Vec<NudgeTemplate>,
    interactions: Vec<InteractionEvent>,
}

fn jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

impl Data {
    /// Loads a data directory. Accepted feedback logged by `serve` is merged
    /// into the interaction history.
    fn load(dir: &Path) -> Result<Self> {
        let catalog = std::fs::read_to_string(dir.join("catalog.toml")).context("reading catalog.toml")?;
        let mut interactions: Vec<InteractionEvent> = jsonl(&dir.join("interactions.jsonl"))?;
        let log = dir.join(FEEDBACK_LOG);
        if log.exists() {
            interactions.extend(jsonl::<InteractionEvent>(&log)?);
            interactions.sort_by_key(|e| e.day);
        }
        Ok(Self {
            catalog: MarkerCatalog::from_toml(&catalog)?,
            participants: jsonl(&dir.join("participants.jsonl"))?,
            library: jsonl(&dir.join("library.jsonl"))?,
            interactions,
        })
    }

    fn graph(&self) -> Result<GraphSnapshot> {
        let built = construct_graph(
            &self.library,
            &self.participants,
            &self.interactions,
            &self.catalog,
            &ConstructOptions::default(),
        )?;
        for r in &built.rejected {
            log::warn!("{r:?}");
        }
        Ok(built.snapshot)
    }

    fn experiment(&self, cfg: &Config) -> Result<Experiment> {
        Ok(Experiment::prepare(
            &self.library,
            &self.participants,
            &self.interactions,
            &self.catalog,
            cfg.eval.holdout,
            cfg.model.seed,
            &cfg.model.positives,
        )?)
    }
}

fn save_model(m: &ModelState, path: &Path) -> Result<()> {
    m.save(BufWriter::new(File::create(path)?))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_records(path: &Path, run: &DailyRun) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, &run.records())?;
    w.flush()?;
    info!("wrote {} records to {}", run.records().len(), path.display());
    Ok(())
}

/// Rebuilds a run from its day file.
fn run_from_records(records: Vec<DayRecord>) -> Result<DailyRun> {
    let day = match records.first() {
        Some(r) => r.day,
        None => bail!("empty day file"),
    };
    let mut selections: BTreeMap<EntityId, Vec<(usize, Selected)>> = BTreeMap::new();
    for r in records {
        if r.day != day {
            bail!("day file mixes days {day} and {}", r.day);
        }
        selections.entry(EntityId::user(r.user_id)).or_default().push((
            r.rank,
            Selected {
                nudge: EntityId::nudge(r.nudge_id),
                text: r.text,
                replaced: r.was_diversity_replacement,
            },
        ));
    }
    Ok(DailyRun {
        day,
        selections: selections
            .into_iter()
            .map(|(u, mut list)| {
                list.sort_by_key(|(rank, _)| *rank);
                (u, list.into_iter().map(|(_, s)| s).collect())
            })
            .collect(),
        ..DailyRun::default()
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = cli.config()?;
    match &cli.command {
        Command::Synth {
            out,
            users,
            nudges,
            bench,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let base = if *bench {
                PopulationSpec::bench(*users, seed)
            } else {
                PopulationSpec::small(seed)
            };
            let pop = generate_population(&PopulationSpec {
                n_users: *users,
                n_nudges: *nudges,
                ..base
            })?;
            pop.write_to(out)?;
            println!(
                "{} participants, {} nudges, {} events -> {}",
                pop.participants.len(),
                pop.library.len(),
                pop.interactions.len(),
                out.display()
            );
        }
        Command::Construct { data, out, tsv } => {
            let g = Data::load(&data.data)?.graph()?;
            let s = g.stats();
            println!("nodes\t{}\nedges\t{}\ndensity\t{:.6e}", s.node_count, s.edge_count, s.density());
            if let Some(p) = out {
                serde_json::to_writer(BufWriter::new(File::create(p)?), &g)?;
            }
            if let Some(p) = tsv {
                g.export_tsv(BufWriter::new(File::create(p)?))?;
            }
        }
        Command::Train { data, out } => {
            let g = Data::load(&data.data)?.graph()?;
            let (m, tel) = train(&g, &cfg.model, ModelState::init(&g, &cfg.model)?)?;
            println!("epochs {}\tloss {:.6}\tconverged {}", tel.epochs_run, tel.final_loss, tel.converged);
            save_model(&m, out)?;
        }
        Command::Finetune {
            data,
            model,
            out,
            epochs,
        } => {
            let g = Data::load(&data.data)?.graph()?;
            let old = ModelState::load(BufReader::new(File::open(model)?))?;
            let mut hp = old.hyperparams().clone();
            hp.max_epochs = epochs.unwrap_or(cfg.model.max_epochs);
            let warm = ModelState::warm_start(&old, &g, &hp)?;
            let (m, tel) = train(&g, &hp, warm)?;
            println!("epochs {}\tloss {:.6}", tel.epochs_run, tel.final_loss);
            save_model(&m, out)?;
        }
        Command::Score {
            data,
            model,
            out_dir,
            day,
        } => {
            let d = Data::load(&data.data)?;
            let g = d.graph()?;
            let m = ModelState::load(BufReader::new(File::open(model)?))?;
            let rules = rules_from_library(&d.library)?;
            let contexts = d
                .participants
                .iter()
                .map(|p| (EntityId::user(p.user_id.as_str()), p.fields.clone()))
                .collect();
            let history = DeliveryHistory::from_events(&d.interactions);
            let today = day.unwrap_or(g.time() + 1);
            let inputs = DailyInputs {
                snapshot: &g,
                model: &m,
                rules: &rules,
                library: &d.library,
                contexts: &contexts,
                history: &history,
                today,
            };
            match run_parallel(&inputs, &cfg.pipeline, None) {
                Ok(run) => {
                    write_records(&out_dir.join(format!("day-{today}.jsonl")), &run)?;
                    std::fs::write(
                        out_dir.join(format!("day-{today}.telemetry.json")),
                        serde_json::to_string_pretty(&run.telemetry)?,
                    )?;
                }
                Err(PipelineError::BatchesFailed { failed, reasons, partial }) => {
                    write_records(&out_dir.join(format!("day-{today}.partial.jsonl")), &partial)?;
                    bail!("batches {failed:?} failed after retries: {}", reasons.join("; "));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Serve { data, runs, addr } => {
            let d = Data::load(&data.data)?;
            let g = d.graph()?;
            let history = DeliveryHistory::from_events(&d.interactions);
            let mut svc = NudgeService::new(d.catalog, g, history).with_event_log(data.data.join(FEEDBACK_LOG));
            for p in runs {
                let run = run_from_records(jsonl(p)?)?;
                info!("published day {} from {}", run.day, p.display());
                svc.publish_run(&run);
            }
            let app = router(Arc::new(tokio::sync::RwLock::new(svc)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr.as_str()).await?;
                info!("listening on {addr}");
                axum::serve(listener, app).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::Evaluate { data, monitor } => {
            let d = Data::load(&data.data)?;
            let exp = d.experiment(&cfg)?;
            let init = ModelState::init(&exp.train_snapshot, &cfg.model)?;
            let opts = TrainOptions {
                candidates: Some(&exp.candidates),
            };
            let (m, tel) = train_with(&exp.train_snapshot, &cfg.model, init, opts)?;
            let report = exp.evaluate(&m, cfg.eval.k)?;
            let k = cfg.eval.k;
            println!("epochs\t{}", tel.epochs_run);
            println!("users\t{}", report.users);
            println!("precision@{k}\t{:.4}", report.precision_at_k);
            println!("recall@{k}\t{:.4}", report.recall_at_k);
            println!("ndcg@{k}\t{:.4}", report.ndcg_at_k);
            println!("map\t{:.4}", report.mean_average_precision);
            println!("random precision@{k}\t{:.4}", exp.random_precision(k));
            if let Some(p) = monitor {
                let mut mon = DailyMonitor::with_log(p)?;
                mon.record(exp.train_snapshot.time(), report)?;
                println!("precision std over last 7\t{:.4}", mon.precision_stability(7));
            }
        }
        Command::Gridsearch { data, out, epochs } => {
            let d = Data::load(&data.data)?;
            let exp = d.experiment(&cfg)?;
            let mut base = cfg.model.clone();
            if let Some(e) = epochs {
                base.max_epochs = *e;
            }
            let report = grid_search(&table_space(&base), &exp, cfg.eval.k)?;
            print!("{}", report.layer_summary());
            if let Some(p) = out {
                std::fs::write(p, report.to_tsv())?;
            }
        }
        Command::Bench { users, repeats, out } => {
            let report = scaling_benchmark(users, &cfg.pipeline, &cfg.model, cli.seed.unwrap_or(0), *repeats)?;
            print!("{}", report.to_tsv());
            if let Some(p) = out {
                std::fs::write(p, report.to_tsv())?;
            }
        }
    }
    Ok(())
}
