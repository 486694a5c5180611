use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gretel_core::config::RunConfig;
use gretel_core::corpus::{load_corpus, LoadOptions};
use gretel_core::eval::MetricsReport;
use gretel_core::pipeline::{ErrorKind, Pipeline, PipelineError};
use gretel_core::sandbox::{serve_mock, MockScenario};
use gretel_core::synth::{generate, SynthSpec};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "gretel", version, about = "Tool retrieval validated by execution trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `paths.output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order.
    Pipeline(RunArgs),
    /// Validate tools and queries; writes ingest.json.
    Ingest(RunArgs),
    /// BM25 (and optional dense) retrieval; writes candidates.jsonl.
    Retrieve(RunArgs),
    /// Plan/execute/simulate trials per candidate; writes evidence.jsonl.
    Trial(RunArgs),
    /// Evidence-based re-ranking; writes reranked.jsonl.
    Rerank(RunArgs),
    /// Metrics for every available ranking; writes report.json and report.csv.
    Eval(RunArgs),
    /// Serve a mock tool scenario until interrupted.
    ServeMock {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 8089)]
        port: u16,
        /// Tool corpus the scenario refers to.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        tools: Option<PathBuf>,
        /// Take the tool corpus from a run configuration instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write a synthetic gap-injection fixture.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        tools: usize,
        #[arg(long, default_value_t = 20)]
        queries: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn pipeline(args: &RunArgs) -> Result<Pipeline, PipelineError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        cfg.paths.output_dir = dir.clone();
    }
    Pipeline::new(cfg)
}

fn print_report(report: &MetricsReport) {
    println!(
        "{:<10} {:>4} {:>8} {:>8} {:>9}",
        "method", "k", "recall", "ndcg", "pass_rate"
    );
    for (method, rows) in &report.methods {
        for (k, row) in rows {
            let pass = row.pass_rate.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into());
            println!("{method:<10} {k:>4} {:>8.3} {:>8.3} {pass:>9}", row.recall, row.ndcg);
        }
    }
    if let Some(h) = &report.failure_histogram {
        let parts: Vec<String> = h.iter().map(|(c, f)| format!("{c}={f:.3}")).collect();
        println!("failure histogram: {}", parts.join(" "));
    }
    println!("queries: {} (excluded {})", report.query_count, report.excluded_queries);
}

async fn serve(
    scenario: &Path,
    port: u16,
    host: &str,
    tools: Option<&Path>,
    config: Option<&Path>,
) -> Result<(), PipelineError> {
    let stage = "serve-mock";
    let (tools_path, permissive) = match (tools, config) {
        (Some(t), _) => (t.to_path_buf(), false),
        (None, Some(c)) => {
            let cfg = RunConfig::load(c)?;
            (cfg.paths.tools.clone(), cfg.ingest.permissive)
        }
        (None, None) => unreachable!("clap requires one of --tools/--config"),
    };
    let corpus = load_corpus(&tools_path, LoadOptions { permissive })
        .map_err(|e| PipelineError::new(ErrorKind::Data, stage, e))?;
    let scenario = MockScenario::load(scenario).map_err(|e| PipelineError::new(ErrorKind::Data, stage, e))?;
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| PipelineError::new(ErrorKind::Config, stage, format!("bad address {host}:{port}: {e}")))?;
    let server = serve_mock(&scenario, &corpus, addr)
        .await
        .map_err(|e| PipelineError::new(ErrorKind::Runtime, stage, e))?;
    println!("mock server listening on {}", server.base_url());
    tokio::signal::ctrl_c()
        .await
        .map_err(|e| PipelineError::new(ErrorKind::Runtime, stage, e))?;
    server.shutdown().await;
    Ok(())
}

async fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Pipeline(args) => {
            let p = pipeline(&args)?;
            let report = p.run().await?;
            print_report(&report);
            println!("artifacts in {}", p.config.paths.output_dir.display());
        }
        Command::Ingest(args) => {
            let s = pipeline(&args)?.ingest()?;
            println!(
                "{} tools, {} APIs, {} queries ({} labeled), {} warnings",
                s.tool_count,
                s.api_count,
                s.query_count,
                s.labeled_queries,
                s.warnings.len()
            );
        }
        Command::Retrieve(args) => {
            let records = pipeline(&args)?.retrieve().await?;
            println!("retrieved candidates for {} queries", records.len());
        }
        Command::Trial(args) => {
            let records = pipeline(&args)?.trial().await?;
            println!("{} trials", records.len());
        }
        Command::Rerank(args) => {
            let records = pipeline(&args)?.rerank().await?;
            println!("re-ranked {} queries", records.len());
        }
        Command::Eval(args) => print_report(&pipeline(&args)?.eval()?),
        Command::ServeMock {
            scenario,
            port,
            tools,
            config,
            host,
        } => serve(&scenario, port, &host, tools.as_deref(), config.as_deref()).await?,
        Command::GenFixture {
            out,
            tools,
            queries,
            seed,
        } => {
            let defaults = SynthSpec::default();
            let spec = SynthSpec {
                tools,
                queries,
                seed: seed.unwrap_or(defaults.seed),
                ..defaults
            };
            let fx = generate(&spec).map_err(|e| PipelineError::new(ErrorKind::Config, "gen-fixture", e))?;
            fx.write_to(&out).map_err(|e| {
                PipelineError::new(ErrorKind::Runtime, "gen-fixture", format!("{}: {e}", out.display()))
            })?;
            println!(
                "wrote {} tools and {} queries to {}",
                fx.tools.len(),
                fx.queries.len(),
                out.display()
            );
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("GRETEL_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
