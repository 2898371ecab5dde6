//! `vidgraph`: answer questions about long videos, evaluate QA sets, and
//! inspect graphs and caption parses.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 model backend unreachable or failing.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use vidgraph_core::agent::prompt::PromptTemplate;
use vidgraph_core::agent::{Agent, AgentError};
use vidgraph_core::config::{override_seed, AppConfig};
use vidgraph_core::eval::run_eval;
use vidgraph_core::gateway::{Gateway, GatewayConfig, GatewayError};
use vidgraph_core::graph::{FrameRecord, VideoGraph};
use vidgraph_core::parser::{parse_caption, parse_question, Lexicon};
use vidgraph_core::store::{self, load_bundle, load_qa, LoadOptions, TranscriptRecord};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const BACKEND: u8 = 3;

const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";

#[derive(Parser, Debug)]
#[command(name = "vidgraph", version, about = "Graph-memory question answering over long videos")]
struct Cli {
    /// TOML config with agent settings and provider profiles.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Provider profile from the config.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// Seed for scripted providers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Answer one question about one video.
    Run(RunArgs),
    /// Answer every question of a QA file and report metrics.
    Eval(EvalArgs),
    /// Build a bundle's graph from all its captions, or inspect a saved one.
    Graph(GraphArgs),
    /// Parse captions and print the extracted mentions, triples and states.
    Extract(ExtractArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    question: String,
    /// Answer option; repeat for each option, in order.
    #[arg(long = "option", required = true)]
    options: Vec<String>,
    /// Directory for the transcript and final graph.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// QA file, one JSON object per line.
    #[arg(long)]
    qa: PathBuf,
    /// A bundle directory, or a directory of bundles named by video id.
    #[arg(long)]
    bundle: PathBuf,
    /// Directory for report.json, report.txt and transcripts.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long, required_unless_present = "load", conflicts_with = "load")]
    bundle: Option<PathBuf>,
    /// Saved graph snapshot to inspect instead of building one.
    #[arg(long)]
    load: Option<PathBuf>,
    /// Write the snapshot to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rank the printed summary by this question's entities.
    #[arg(long, default_value = "")]
    question: String,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long, required_unless_present = "caption", conflicts_with = "caption")]
    bundle: Option<PathBuf>,
    /// Parse this caption (frame 0) instead of a bundle's captions.
    #[arg(long)]
    caption: Option<String>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome = Result<(), Failure>;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    fail(USAGE)(e.into())
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    fail(DATA)(e.into())
}

fn gateway_code(e: &GatewayError) -> u8 {
    if e.is_exhaustion() {
        BACKEND
    } else if e.is_config() {
        USAGE
    } else {
        DATA
    }
}

fn agent_failure(e: AgentError) -> Failure {
    let code = match &e {
        AgentError::Gateway(g) => gateway_code(g),
        AgentError::Config(_) | AgentError::Select(_) => USAGE,
        AgentError::Question(_) | AgentError::NoCaptions(_) | AgentError::Graph(_) => DATA,
    };
    Failure { code, error: e.into() }
}

struct Setup {
    app: AppConfig,
    lexicon: Lexicon,
    template: PromptTemplate,
}

fn setup(cli: &Cli) -> Result<Setup, Failure> {
    let app = match &cli.config {
        Some(path) => AppConfig::load(path).map_err(usage)?,
        None => AppConfig::default(),
    };
    let lexicon = match &app.lexicon_dir {
        Some(dir) => Lexicon::load_dir(dir).map_err(usage)?,
        None => Lexicon::default(),
    };
    let template = match &app.prompt_template {
        Some(path) => PromptTemplate::load(path).map_err(usage)?,
        None => PromptTemplate::default(),
    };
    app.agent.validate().map_err(usage)?;
    Ok(Setup { app, lexicon, template })
}

fn gateway_config(cli: &Cli, app: &AppConfig) -> Result<GatewayConfig, Failure> {
    let mut cfg = app.gateway(cli.provider.as_deref()).map_err(usage)?;
    if let Some(seed) = cli.seed {
        override_seed(&mut cfg, seed);
    }
    Ok(cfg)
}

fn build_gateway(cfg: &GatewayConfig) -> Result<Gateway, Failure> {
    Gateway::new(cfg).map_err(|e| Failure {
        code: gateway_code(&e),
        error: e.into(),
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(data)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).map_err(data)
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Outcome {
    let s = setup(cli)?;
    let gcfg = gateway_config(cli, &s.app)?;
    let gateway = build_gateway(&gcfg)?;
    let opts = LoadOptions {
        embeddings: gateway.has_embeddings(),
        qa: false,
    };
    let bundle = load_bundle(&args.bundle, opts).map_err(data)?;
    let agent = Agent {
        cfg: &s.app.agent,
        gateway: &gateway,
        lexicon: &s.lexicon,
        template: &s.template,
    };
    let (session, graph) = agent.run(&bundle, &args.question, &args.options).map_err(agent_failure)?;
    let record = TranscriptRecord::new(None, session);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(data)?;
        store::save_transcript(out.join(TRANSCRIPTS_FILE), &record).map_err(data)?;
        write_file(&out.join("graph.json"), store::save_graph(&graph))?;
    }
    println!("{}", serde_json::to_string_pretty(&record).map_err(data)?);
    match &record.session.error {
        Some(e) => Err(fail(BACKEND)(anyhow!("session ended early: {e}"))),
        None => Ok(()),
    }
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Outcome {
    let s = setup(cli)?;
    let items = load_qa(&args.qa).map_err(data)?;
    let gcfg = gateway_config(cli, &s.app)?;
    let gateway = build_gateway(&gcfg)?;
    let agent = Agent {
        cfg: &s.app.agent,
        gateway: &gateway,
        lexicon: &s.lexicon,
        template: &s.template,
    };
    let run = run_eval(&items, &args.bundle, &agent, args.parallel).map_err(usage)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(data)?;
    let transcripts = args.out.join(TRANSCRIPTS_FILE);
    if transcripts.exists() {
        fs::remove_file(&transcripts)
            .with_context(|| format!("replacing {}", transcripts.display()))
            .map_err(data)?;
    }
    for record in &run.transcripts {
        store::save_transcript(&transcripts, record).map_err(data)?;
    }
    write_file(&args.out.join("report.json"), run.report.to_json())?;
    let text = run.report.to_text();
    write_file(&args.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_graph(cli: &Cli, args: &GraphArgs) -> Outcome {
    let s = setup(cli)?;
    let graph = match (&args.load, &args.bundle) {
        (Some(path), _) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(data)?;
            store::load_graph(&bytes).map_err(data)?
        }
        (None, Some(dir)) => {
            let bundle = load_bundle(dir, LoadOptions::default()).map_err(data)?;
            let records: Vec<FrameRecord> = bundle
                .captions
                .iter()
                .map(|(f, c)| FrameRecord {
                    frame_index: *f,
                    caption: c.clone(),
                    embedding: bundle.embeddings.get(f).cloned(),
                })
                .collect();
            let parses: Vec<_> = records
                .iter()
                .map(|r| parse_caption(&r.caption, r.frame_index, &s.lexicon))
                .collect();
            VideoGraph::new(s.app.agent.graph.clone())
                .map_err(usage)?
                .update_graph(&records, &parses)
                .map_err(data)?
        }
        (None, None) => return Err(usage(anyhow!("either --bundle or --load is required"))),
    };
    if let Some(out) = &args.out {
        write_file(out, store::save_graph(&graph))?;
    }
    let query = parse_question(&args.question, &[], &s.lexicon);
    let summary = graph.summarize(&query, usize::MAX);
    println!(
        "version {}, {} entities, {} relations, {} frames",
        graph.version,
        graph.node_count(),
        graph.edges.len(),
        graph.processed_frames.len()
    );
    println!("\nEntities:\n{}", summary.entity_summary);
    println!("\nRelations:\n{}", summary.relation_summary);
    println!("\nState changes:\n{}", summary.temporal_summary);
    Ok(())
}

fn cmd_extract(cli: &Cli, args: &ExtractArgs) -> Outcome {
    let s = setup(cli)?;
    let captions: Vec<(u32, String)> = match (&args.caption, &args.bundle) {
        (Some(c), _) => vec![(0, c.clone())],
        (None, Some(dir)) => {
            let opts = LoadOptions {
                embeddings: false,
                qa: false,
            };
            load_bundle(dir, opts).map_err(data)?.captions.into_iter().collect()
        }
        (None, None) => return Err(usage(anyhow!("either --bundle or --caption is required"))),
    };
    for (frame, caption) in captions {
        let parse = parse_caption(&caption, frame, &s.lexicon);
        println!("{}", serde_json::to_string(&parse).map_err(data)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Graph(a) => cmd_graph(&cli, a),
        Command::Extract(a) => cmd_extract(&cli, a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            tracing::debug!(code = f.code, "exiting with failure");
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
