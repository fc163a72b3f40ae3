use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use kgtune::config::BackendKind;
use kgtune::eval::{load_counterfact, run_online, save_counterfact, EfficacyReading};
use kgtune::fixture::{generate_fixture, synthetic_cases, FixtureProfile};
use kgtune::kg::{load_graph, render_journal_delta, save_graph};
use kgtune::optimizer::{tune, LossModeKind, TuneRequest};
use kgtune::{Error, KnowledgeGraph, Scorer, Settings};
use kgtune_service::{AppState, ServiceConfig};
use serde::de::DeserializeOwned;

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

/// Personalize a KG-enhanced language model by editing its knowledge graph.
#[derive(Parser)]
#[command(name = "kgtune", version)]
struct Cli {
    /// TOML configuration file; defaults to $KGTUNE_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    flags: ConfigFlags,

    #[command(subcommand)]
    command: Command,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

/// One flag per configuration key.
#[derive(Args, Default)]
struct ConfigFlags {
    /// synthetic | remote
    #[arg(long, global = true, value_parser = parse_enum::<BackendKind>)]
    backend: Option<BackendKind>,
    /// Synthetic backend score tables (JSON).
    #[arg(long, global = true)]
    fixture: Option<PathBuf>,
    #[arg(long, global = true)]
    remote_url: Option<String>,
    #[arg(long, global = true)]
    remote_model: Option<String>,
    #[arg(long, global = true)]
    remote_timeout_ms: Option<u64>,
    #[arg(long, global = true)]
    remote_retries: Option<u32>,
    #[arg(long, global = true)]
    remote_backoff_ms: Option<u64>,
    #[arg(long, global = true)]
    remote_api_key: Option<String>,
    #[arg(long, global = true)]
    length_normalized: Option<bool>,
    /// Maximum number of personalized triples.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Loss threshold in nats.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Retrieval probability used for personalized triples missing from the graph.
    #[arg(long, global = true)]
    floor: Option<f64>,
    /// floor | intersect
    #[arg(long, global = true, value_parser = parse_enum::<LossModeKind>)]
    loss_mode: Option<LossModeKind>,
    #[arg(long, global = true)]
    protect_prior_feedback: Option<bool>,
    /// paired | pre-post
    #[arg(long, global = true, value_parser = parse_enum::<EfficacyReading>)]
    efficacy_reading: Option<EfficacyReading>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CounterFact-format case file.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Tab-separated triple file.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    bind: Option<String>,
    #[arg(long, global = true)]
    storage_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    feedback_deadline_ms: Option<u64>,
}

impl ConfigFlags {
    fn into_settings(self) -> Settings {
        Settings {
            backend: self.backend,
            fixture: self.fixture,
            remote_url: self.remote_url,
            remote_model: self.remote_model,
            remote_timeout_ms: self.remote_timeout_ms,
            remote_retries: self.remote_retries,
            remote_backoff_ms: self.remote_backoff_ms,
            remote_api_key: self.remote_api_key,
            length_normalized: self.length_normalized,
            k: self.k,
            epsilon: self.epsilon,
            floor: self.floor,
            loss_mode: self.loss_mode,
            protect_prior_feedback: self.protect_prior_feedback,
            efficacy_reading: self.efficacy_reading,
            seed: self.seed,
            dataset: self.dataset,
            graph: self.graph,
            output: self.output,
            bind: self.bind,
            storage_dir: self.storage_dir,
            feedback_deadline_ms: self.feedback_deadline_ms,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the online protocol over a dataset and report efficacy and paraphrase scores.
    Eval {
        /// Skip tuning to measure the no-edit baseline.
        #[arg(long)]
        no_tune: bool,
    },
    /// Tune the graph from one query/feedback pair and save it.
    Tune {
        #[arg(long)]
        query: String,
        #[arg(long)]
        answer: String,
        /// Query entity.
        #[arg(long)]
        subject: String,
        /// Answer entity.
        #[arg(long)]
        object: String,
        /// Relation linking subject and object; repeat for several. Extracted
        /// by the model when omitted.
        #[arg(long = "relation")]
        relations: Vec<String>,
        #[arg(long, default_value = "cli")]
        interaction: String,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve,
    /// Inspect graph files.
    Kg {
        #[command(subcommand)]
        command: KgCommand,
    },
    /// Build synthetic fixtures and case files.
    Fixture {
        #[command(subcommand)]
        command: FixtureCommand,
    },
}

#[derive(Subcommand)]
enum KgCommand {
    /// Summarize a graph and list its triples.
    Inspect {
        #[arg(long)]
        subject: Option<String>,
    },
    /// Show journal edits with sequence numbers in (from, to].
    Diff {
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long)]
        to: Option<u64>,
    },
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// Score tables (and optionally a seed graph) for the cases in --dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        graph_out: Option<PathBuf>,
    },
    /// Write synthetic CounterFact-format cases.
    Cases {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-"))).into())
}

fn load_or_empty(path: Option<&Path>) -> CliResult<KnowledgeGraph> {
    Ok(match path {
        Some(p) => load_graph(p)?.graph,
        None => KnowledgeGraph::new(),
    })
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    let settings = Settings::layered(cli.config.as_deref(), cli.flags.into_settings())?;
    match cli.command {
        Command::Eval { no_tune } => {
            let backend = settings.build_backend()?;
            let cases = load_counterfact(required(&settings.dataset, "dataset")?)?;
            let mut graph = load_or_empty(settings.graph.as_deref())?;
            let cfg = settings.tuning()?;
            let scorer = Scorer::new(backend.as_ref());
            let report = run_online(&cases, &mut graph, &cfg, &scorer, &settings.eval_options(!no_tune))?;
            print!("{}", report.render_table());
            if let Some(out) = &settings.output {
                std::fs::write(out, serde_json::to_string_pretty(&report)?)
                    .map_err(|e| format!("{}: {e}", out.display()))?;
            }
            Ok(if report.has_fatal() { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Tune {
            query,
            answer,
            subject,
            object,
            relations,
            interaction,
            json,
        } => {
            let path = required(&settings.graph, "graph")?;
            let mut graph = load_graph(path)?.graph;
            let backend = settings.build_backend()?;
            let cfg = settings.tuning()?;
            let request = TuneRequest {
                query,
                answer,
                subject,
                object,
                relations: (!relations.is_empty()).then_some(relations),
                interaction,
            };
            let report = tune(&mut graph, &request, &cfg, &Scorer::new(backend.as_ref()))?;
            save_graph(&graph, path)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve => {
            let backend = settings.build_backend()?;
            let defaults = ServiceConfig::default();
            let config = ServiceConfig {
                storage_dir: settings.storage_dir.clone(),
                feedback_deadline: settings
                    .feedback_deadline_ms
                    .map_or(defaults.feedback_deadline, Duration::from_millis),
                tuning: settings.tuning()?,
                ..defaults
            };
            if let Some(dir) = &config.storage_dir {
                std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            }
            let bind = settings.bind.clone().unwrap_or_else(|| "127.0.0.1:8080".into());
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(kgtune_service::serve(&bind, AppState::new(Arc::clone(&backend), config)))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Kg { command } => {
            let graph = load_graph(required(&settings.graph, "graph")?)?.graph;
            match command {
                KgCommand::Inspect { subject } => {
                    println!("triples   {}", graph.len());
                    println!("subjects  {}", graph.subjects().count());
                    println!("journal   {} entries, last seq {}", graph.journal().len(), graph.last_seq());
                    let listed: Vec<_> = match &subject {
                        Some(s) => graph.triples_from_subject(s).into_iter().collect(),
                        None => graph.iter().cloned().collect(),
                    };
                    for z in listed {
                        println!("{z}");
                    }
                }
                KgCommand::Diff { from, to } => {
                    let entries: Vec<_> = graph
                        .journal_since(from)
                        .iter()
                        .filter(|e| to.is_none_or(|t| e.seq <= t))
                        .cloned()
                        .collect();
                    print!("{}", render_journal_delta(&entries));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Fixture { command } => {
            match command {
                FixtureCommand::Generate { out, graph_out } => {
                    let cases = load_counterfact(required(&settings.dataset, "dataset")?)?;
                    let generated = generate_fixture(&cases, &FixtureProfile::default())?;
                    generated.fixture.save(&out)?;
                    if let Some(path) = graph_out {
                        save_graph(&KnowledgeGraph::from_triples(generated.seed_triples), &path)?;
                    }
                    println!("wrote fixture for {} cases to {}", cases.len(), out.display());
                }
                FixtureCommand::Cases { n, out } => {
                    save_counterfact(&synthetic_cases(n, settings.seed.unwrap_or(0)), &out)?;
                    println!("wrote {n} cases to {}", out.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
