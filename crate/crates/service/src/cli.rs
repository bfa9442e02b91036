//! Operator CLI.

use std::collections::HashSet;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lgir_core::adapters::{run_query, run_session_round, Session, SessionStore};
use lgir_core::eval::{load_cases, run_benchmark, validate_case, BenchOptions, HitsMode};
use lgir_core::index::{ingest, read_manifest};
use lgir_core::model::{QueryKind, RankedEntry, RankedList, RetrievalQuery, Stage};
use lgir_core::{EmbeddingIndex, Engine, PipelineConfig};

use crate::api::{reference_record, router};
use crate::state::AppState;

#[derive(Debug, Parser)]
#[command(name = "lgir", version, about = "Language-guided image retrieval: ingest, search, chat, benchmark, serve")]
pub struct Cli {
    /// TOML config file. Without one every backend role uses the built-in mock.
    #[arg(long, global = true, env = "LGIR_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption and embed the images of a JSON-lines manifest into an index file.
    Ingest {
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// One-shot text-to-image or composed retrieval.
    Search {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        text: String,
        /// Reference image for CIR: an indexed id, a URI or a file path.
        #[arg(long = "ref")]
        reference: Option<String>,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 3)]
        stages: u8,
        /// Rows printed.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Where the full trace JSON is written.
        #[arg(long, default_value = "lgir-trace.json")]
        trace: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Interactive chat retrieval: one line of feedback per round.
    Chat {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 3)]
        stages: u8,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Write the session JSON here on exit.
        #[arg(long)]
        save: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Run a JSON-lines benchmark and write report.json and report.md.
    Bench {
        cases: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 3)]
        stages: u8,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, value_enum, default_value = "cumulative")]
        hits_mode: HitsArg,
        /// Directory for the report files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Serve the HTTP API.
    Serve {
        /// Index file; created by POST /v1/index when missing.
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Session files directory (defaults to the config's session_dir).
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Check a benchmark file, and its ground truth against an index when given.
    Validate {
        cases: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
    },
}

/// Hyperparameter overrides applied on top of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Tuning {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "k-verify")]
    pub k_verify: Option<usize>,
    #[arg(long = "alpha")]
    pub alpha: Option<usize>,
    #[arg(long = "top-n")]
    pub top_n: Option<usize>,
    #[arg(long = "cache-dir")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Tir,
    Cir,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HitsArg {
    Cumulative,
    PerRound,
}

pub fn load_config(path: Option<&Path>, tuning: &Tuning) -> lgir_core::Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let mut c = PipelineConfig::all_mock();
            c.apply_env(std::env::vars())?;
            c
        }
    };
    if let Some(t) = tuning.tau {
        cfg.tau = t;
    }
    if let Some(k) = tuning.k_verify {
        cfg.k_verify = k;
    }
    if let Some(a) = tuning.alpha {
        cfg.alpha_evaluate = a;
    }
    if let Some(n) = tuning.top_n {
        cfg.top_n = n;
    }
    if let Some(d) = &tuning.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(n: u8) -> anyhow::Result<Stage> {
    Stage::from_number(n).with_context(|| format!("--stages must be 1, 2 or 3, got {n}"))
}

fn load_index(path: &Path) -> anyhow::Result<EmbeddingIndex> {
    EmbeddingIndex::load(path).with_context(|| format!("loading index {}", path.display()))
}

/// Rank table: position, id, fused score, satisfied count, evaluator flag.
pub fn format_table(entries: &[RankedEntry]) -> String {
    let mut out = format!("{:>4}  {:<24} {:>8} {:>6} {:>6}\n", "rank", "image", "score", "count", "eval");
    for (i, e) in entries.iter().enumerate() {
        let count = e.stage2_count.map_or("-".to_string(), |c| c.to_string());
        let flag = match e.stage3_flag {
            Some(true) => "yes",
            Some(false) => "no",
            None => "-",
        };
        out.push_str(&format!(
            "{:>4}  {:<24} {:>8.4} {:>6} {:>6}\n",
            i + 1,
            e.image_id,
            e.stage1_score,
            count,
            flag
        ));
    }
    out
}

#[derive(Serialize)]
struct SearchTrace<'a> {
    query: &'a RetrievalQuery,
    stage: u8,
    ranking: &'a RankedList,
}

async fn ingest_cmd(cfg: PipelineConfig, manifest: &Path, output: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let records = read_manifest(&text, manifest.parent())?;
    let engine = Engine::from_config(cfg)?;
    let index = ingest(&engine, records).await?;
    index.save(output)?;
    println!(
        "indexed {} images (dim {}) into {} [{}]",
        index.len(),
        index.dim(),
        output.display(),
        index.fingerprint()?
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
async fn search_cmd(
    cfg: PipelineConfig,
    kind: KindArg,
    text: String,
    reference: Option<String>,
    index_path: &Path,
    last: Stage,
    top: usize,
    trace: &Path,
) -> anyhow::Result<()> {
    let index = load_index(index_path)?;
    let top_n = cfg.top_n;
    let engine = Engine::from_config(cfg)?;
    let query = match kind {
        KindArg::Tir => {
            if reference.is_some() {
                bail!("--ref is only valid with --kind cir");
            }
            RetrievalQuery::tir(text)
        }
        KindArg::Cir => {
            let r = reference.context("--kind cir requires --ref")?;
            // bare file paths become file:// URIs
            let r = if index.position(&r).is_none() && Path::new(&r).exists() {
                format!("file://{}", std::fs::canonicalize(&r)?.display())
            } else {
                r
            };
            RetrievalQuery::cir(text, reference_record(&index, &r)?)
        }
    };
    let out = run_query(&engine, &index, &query, last).await?;
    let ranking = out.ranking.truncated(top_n);
    print!("{}", format_table(&ranking.entries[..top.min(ranking.len())]));
    let json = serde_json::to_vec_pretty(&SearchTrace {
        query: &query,
        stage: last.number(),
        ranking: &ranking,
    })?;
    std::fs::write(trace, json).with_context(|| format!("writing {}", trace.display()))?;
    eprintln!("trace written to {}", trace.display());
    Ok(())
}

fn chat_cmd(
    rt: &tokio::runtime::Runtime,
    cfg: PipelineConfig,
    index_path: &Path,
    last: Stage,
    top: usize,
    save: Option<&Path>,
) -> anyhow::Result<()> {
    let index = load_index(index_path)?;
    let engine = Engine::from_config(cfg)?;
    let mut session = Session::new("cli", QueryKind::ChatIr);
    let stdin = std::io::stdin();
    eprintln!("describe the image you want; refine it round by round (empty line or EOF to stop)");
    loop {
        eprint!("round {}> ", session.rounds.len() + 1);
        std::io::stderr().flush().ok();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 || line.trim().is_empty() {
            break;
        }
        match rt.block_on(run_session_round(&engine, &index, &mut session, line.trim(), None, last)) {
            Ok(out) => {
                print!("{}", format_table(&out.ranking.entries[..top.min(out.ranking.len())]));
                std::io::stdout().flush().ok();
            }
            Err(e) => eprintln!("error: {}: {e}", e.code()),
        }
    }
    if let Some(path) = save {
        std::fs::write(path, serde_json::to_vec_pretty(&session)?)?;
        eprintln!("session written to {}", path.display());
    }
    Ok(())
}

async fn bench_cmd(
    cfg: PipelineConfig,
    cases_path: &Path,
    index_path: &Path,
    opts: BenchOptions,
    out: &Path,
) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(cases_path).with_context(|| format!("reading {}", cases_path.display()))?;
    let cases = load_cases(&text)?;
    let index = load_index(index_path)?;
    let db: HashSet<&str> = index.image_ids().collect();
    for case in &cases {
        validate_case(case, Some(&db))?;
    }
    let engine = Engine::from_config(cfg)?;
    let report = run_benchmark(&engine, &index, &cases, &opts).await;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    let md = report.to_markdown();
    std::fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

async fn serve_cmd(
    cfg: PipelineConfig,
    index_path: PathBuf,
    host: &str,
    port: u16,
    sessions: Option<PathBuf>,
) -> anyhow::Result<()> {
    let index = if index_path.exists() {
        Some(load_index(&index_path)?)
    } else {
        tracing::warn!("{} does not exist yet; POST /v1/index to build it", index_path.display());
        None
    };
    let store = match sessions.or_else(|| cfg.session_dir.clone()) {
        Some(dir) => SessionStore::open(&dir)?,
        None => SessionStore::in_memory(),
    };
    let engine = Engine::from_config(cfg)?;
    let state = Arc::new(AppState::new(engine, store, index, Some(index_path)));
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await?;
    Ok(())
}

fn validate_cmd(cases_path: &Path, index_path: Option<&Path>) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(cases_path).with_context(|| format!("reading {}", cases_path.display()))?;
    let cases = load_cases(&text)?;
    let index = index_path.map(load_index).transpose()?;
    let db: Option<HashSet<&str>> = index.as_ref().map(|i| i.image_ids().collect());
    let errors: Vec<String> = cases
        .iter()
        .filter_map(|c| validate_case(c, db.as_ref()).err().map(|e| e.to_string()))
        .collect();
    for e in &errors {
        eprintln!("{e}");
    }
    if !errors.is_empty() {
        bail!("{} of {} cases invalid", errors.len(), cases.len());
    }
    println!("ok: {} cases", cases.len());
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest { manifest, output, tuning } => {
            let cfg = load_config(config, &tuning)?;
            rt.block_on(ingest_cmd(cfg, &manifest, &output))
        }
        Command::Search {
            kind,
            text,
            reference,
            index,
            stages,
            top,
            trace,
            tuning,
        } => {
            let cfg = load_config(config, &tuning)?;
            rt.block_on(search_cmd(cfg, kind, text, reference, &index, stage(stages)?, top, &trace))
        }
        Command::Chat {
            index,
            stages,
            top,
            save,
            tuning,
        } => {
            let cfg = load_config(config, &tuning)?;
            chat_cmd(&rt, cfg, &index, stage(stages)?, top, save.as_deref())
        }
        Command::Bench {
            cases,
            index,
            stages,
            workers,
            hits_mode,
            out,
            tuning,
        } => {
            let cfg = load_config(config, &tuning)?;
            let opts = BenchOptions {
                stages: stage(stages)?,
                workers,
                hits_mode: match hits_mode {
                    HitsArg::Cumulative => HitsMode::Cumulative,
                    HitsArg::PerRound => HitsMode::PerRound,
                },
                ..BenchOptions::default()
            };
            rt.block_on(bench_cmd(cfg, &cases, &index, opts, &out))
        }
        Command::Serve {
            index,
            port,
            host,
            sessions,
            tuning,
        } => {
            let cfg = load_config(config, &tuning)?;
            rt.block_on(serve_cmd(cfg, index, &host, port, sessions))
        }
        Command::Validate { cases, index } => validate_cmd(&cases, index.as_deref()),
    }
}
