//! Command-line driver for plot-uniqueness scoring.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 backend failure,
//! 4 budget exhausted, 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;

use sui_generis::baselines;
use sui_generis::corpus::{self, CorpusFormat, RawStory};
use sui_generis::gateway::{
    Budget, CacheStore, Gateway, HttpBackend, HttpBackendConfig, MockBackend, MockScript,
    UsageLog,
};
use sui_generis::judge::{judge_matrix, write_judgments};
use sui_generis::pipeline::{score_story, ScoreRun};
use sui_generis::report::{
    self, behavior_hash, corpus_digest, csv_escape, derive_run_id, emit_heatmap, estimate_calls,
    positions_csv, positions_svg, summary_csv, RunDir, RunManifest,
};
use sui_generis::sampler::{read_continuations, sample_all_prefixes, write_continuations};
use sui_generis::scorer::{aggregate_by_position, EchoMatrix, ScoreConfig, StoryReport};
use sui_generis::sggen::{generate_sg_guided, GenConfig};
use sui_generis::templates::PromptTemplates;

#[derive(Parser)]
#[command(
    name = "sui-generis",
    version,
    about = "Plot-uniqueness scoring for stories via alternative-continuation echo analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a corpus of stories end to end
    Score(ScoreArgs),
    /// Sample and persist alternative continuations for every prefix
    Continuations(ContinuationsArgs),
    /// Judge previously sampled continuations and build echo matrices
    Judge(JudgeArgs),
    /// Compute reference diversity metrics over groups of texts
    Baselines(BaselinesArgs),
    /// Grow a story segment by segment, keeping the best-scoring candidate
    GenerateSg(GenerateSgArgs),
    /// Render an echo-matrix CSV as an SVG heatmap
    Heatmap(HeatmapArgs),
    /// Aggregate story reports by segment position
    Aggregate(AggregateArgs),
    /// Print the number of LLM calls scoring one story takes
    Estimate(EstimateArgs),
}

/// Backend and concurrency options shared by the networked subcommands.
#[derive(Args)]
struct BackendOpts {
    /// TOML config file ([defaults] plus [backend.<id>] tables)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Offline run: path to a mock-script JSON served for every request
    #[arg(long, value_name = "FILE")]
    mock: Option<PathBuf>,
    /// Backend id for generation (must appear in the config file)
    #[arg(long)]
    backend: Option<String>,
    /// Backend id for judging (defaults to the generation backend)
    #[arg(long)]
    judge_backend: Option<String>,
    /// Model for story/continuation sampling
    #[arg(long)]
    model: Option<String>,
    /// Model for plot judgments
    #[arg(long)]
    judge_model: Option<String>,
    /// Abort once this many live calls have been dispatched
    #[arg(long)]
    max_calls: Option<u64>,
    /// Abort once this many tokens have been spent
    #[arg(long)]
    max_tokens_budget: Option<u64>,
    /// Concurrent in-flight requests per backend
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
    /// Worker threads for story- and judgment-level parallelism
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ScoringFlags {
    /// Continuations per prefix
    #[arg(long)]
    k: Option<u32>,
    /// Prefix-weight decay, in (0, 1)
    #[arg(long)]
    lambda: Option<f64>,
    /// Drop-ratio threshold, in [0, 1)
    #[arg(long)]
    theta: Option<f64>,
    /// Echo-likelihood floor, in (0, 1/k)
    #[arg(long)]
    epsilon: Option<f64>,
    /// Count "partially" verdicts as half an echo
    #[arg(long)]
    soft_judgments: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSONL corpus: one story object per line
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Directory that receives run directories and the shared cache
    #[arg(long, default_value = "runs", value_name = "DIR")]
    out_dir: PathBuf,
    /// Run id (defaults to a digest of the parameters and the corpus)
    #[arg(long)]
    run_id: Option<String>,
    /// Segment width in words
    #[arg(long)]
    width: Option<u32>,
    /// Condensed-summary corpora: width 30 unless --width is given
    #[arg(long)]
    wiki: bool,
    /// Sample continuations from this backend instead of the default one
    #[arg(long, value_name = "BACKEND")]
    cross_model: Option<String>,
    /// Response cache directory (default <out-dir>/cache, shared by runs)
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[command(flatten)]
    backend: BackendOpts,
}

#[derive(Args)]
struct ContinuationsArgs {
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long, default_value = "runs", value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    wiki: bool,
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[command(flatten)]
    backend: BackendOpts,
}

#[derive(Args)]
struct JudgeArgs {
    /// Corpus the continuations were sampled from
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Existing run directory holding continuations/
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    wiki: bool,
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[command(flatten)]
    backend: BackendOpts,
}

#[derive(Args)]
struct BaselinesArgs {
    /// JSONL of {"id": ..., "texts": [...]} groups
    #[arg(long, value_name = "FILE")]
    groups: PathBuf,
    /// Write the CSV here instead of stdout
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Largest n-gram order for self-BLEU
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    /// Additive smoothing epsilon for self-BLEU zero matches
    #[arg(long)]
    smooth_eps: Option<f64>,
    /// Also compute mean pairwise embedding similarity with this model
    #[arg(long)]
    embed_model: Option<String>,
    /// Also compute mean perplexity with this model
    #[arg(long)]
    ppl_model: Option<String>,
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendOpts,
}

#[derive(Args)]
struct GenerateSgArgs {
    /// Writing prompt to grow a story for
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value = "runs", value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    /// Candidate next segments per step
    #[arg(long, default_value_t = 5)]
    m: u32,
    /// Continuations per prefix when scoring candidates
    #[arg(long, default_value_t = 5)]
    k_prime: u32,
    #[arg(long, default_value_t = 10)]
    max_segments: u32,
    #[arg(long)]
    width: Option<u32>,
    /// Seed for the first-segment pick
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[command(flatten)]
    backend: BackendOpts,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Echo-matrix CSV to render
    #[arg(long, value_name = "FILE")]
    echo: PathBuf,
    /// Second matrix for the upper-right triangle
    #[arg(long, value_name = "FILE")]
    echo_b: Option<PathBuf>,
    /// Continuations per prefix the matrices were built with
    #[arg(long, default_value_t = 20)]
    k: u32,
    /// Output SVG (default: the input path with .svg)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Run directory holding reports/*.json
    #[arg(long, value_name = "DIR")]
    run_dir: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Number of story segments
    #[arg(long)]
    segments: u64,
    /// Continuations per prefix
    #[arg(long, default_value_t = 20)]
    k: u64,
}

// ─────────────────────────────────────────────────────────────────────────────
// Config file
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    defaults: FileDefaults,
    #[serde(default)]
    backend: BTreeMap<String, BackendEntry>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileDefaults {
    k: Option<u32>,
    lambda: Option<f64>,
    theta: Option<f64>,
    epsilon: Option<f64>,
    width: Option<u32>,
    backend: Option<String>,
    judge_backend: Option<String>,
    model: Option<String>,
    judge_model: Option<String>,
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct BackendEntry {
    base_url: String,
    api_key_env: String,
    model: Option<String>,
    timeout_secs: Option<u64>,
}

fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let raw = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            toml::from_str(&raw).map_err(|e| {
                anyhow::Error::new(sui_generis::Error::Config(format!(
                    "config file {}: {e}",
                    path.display()
                )))
            })
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Resolution: flags > config file > built-in defaults
// ─────────────────────────────────────────────────────────────────────────────

fn resolve_score_config(flags: &ScoringFlags, file: &FileConfig) -> anyhow::Result<ScoreConfig> {
    let defaults = ScoreConfig::default();
    let config = ScoreConfig {
        k: flags.k.or(file.defaults.k).unwrap_or(defaults.k),
        lambda: flags.lambda.or(file.defaults.lambda).unwrap_or(defaults.lambda),
        theta: flags.theta.or(file.defaults.theta).unwrap_or(defaults.theta),
        epsilon: flags.epsilon.or(file.defaults.epsilon).unwrap_or(defaults.epsilon),
        soft: flags.soft_judgments,
    };
    config.validate()?;
    Ok(config)
}

fn resolve_width(width: Option<u32>, wiki: bool, file: &FileConfig) -> u32 {
    width.or(file.defaults.width).unwrap_or(if wiki {
        corpus::WIKI_SEGMENT_WIDTH
    } else {
        corpus::DEFAULT_SEGMENT_WIDTH
    })
}

/// Built gateways plus everything recorded about them.
struct Backends {
    gen: Arc<Gateway>,
    judge: Arc<Gateway>,
    budget: Arc<Budget>,
    gen_backend_id: String,
    judge_backend_id: String,
    continuation_model: String,
    judge_model: String,
}

impl Backends {
    fn shared(&self) -> bool {
        Arc::ptr_eq(&self.gen, &self.judge)
    }

    fn print_stats(&self) {
        let print = |role: &str, id: &str, gw: &Gateway| {
            let s = gw.stats();
            eprintln!(
                "{role} backend '{id}': {} logical calls, {} cache hits, {} dispatched \
                 (generate {}, judge {}, embed {}, logprob {})",
                s.logical_calls,
                s.cache_hits,
                s.dispatched_total,
                s.dispatched_generate,
                s.dispatched_judge,
                s.dispatched_embed,
                s.dispatched_logprob
            );
        };
        if self.shared() {
            print("shared", &self.gen_backend_id, &self.gen);
        } else {
            print("generation", &self.gen_backend_id, &self.gen);
            print("judge", &self.judge_backend_id, &self.judge);
        }
        eprintln!(
            "budget: {} calls, {} tokens spent",
            self.budget.spent_calls(),
            self.budget.spent_tokens()
        );
    }
}

struct BackendRequestSpec<'a> {
    opts: &'a BackendOpts,
    file: &'a FileConfig,
    /// Overrides the generation backend (cross-model scoring).
    cross_model: Option<&'a str>,
    cache: Arc<CacheStore>,
    usage_log: Option<Arc<UsageLog>>,
    run_id: String,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(sui_generis::Error::Config(msg.into()))
}

fn build_backends(spec: BackendRequestSpec) -> anyhow::Result<Backends> {
    let opts = spec.opts;
    let file = spec.file;
    let budget = Arc::new(Budget::new(opts.max_calls, opts.max_tokens_budget));

    let default_backend_id = opts
        .backend
        .clone()
        .or_else(|| file.defaults.backend.clone())
        .or_else(|| opts.mock.is_some().then(|| "mock".to_string()));
    let gen_backend_id = spec
        .cross_model
        .map(str::to_string)
        .or_else(|| default_backend_id.clone())
        .ok_or_else(|| config_err("no backend configured; pass --mock or --backend/--config"))?;
    let judge_backend_id = opts
        .judge_backend
        .clone()
        .or_else(|| file.defaults.judge_backend.clone())
        .or_else(|| default_backend_id.clone())
        .ok_or_else(|| config_err("no judge backend configured"))?;

    let entry_model = |id: &str| file.backend.get(id).and_then(|e| e.model.clone());
    let continuation_model = opts
        .model
        .clone()
        .or_else(|| entry_model(&gen_backend_id))
        .or_else(|| file.defaults.model.clone())
        .or_else(|| {
            opts.mock.is_some().then(|| {
                if gen_backend_id == "mock" {
                    "mock-writer".to_string()
                } else {
                    gen_backend_id.clone()
                }
            })
        })
        .ok_or_else(|| config_err("no model configured; pass --model or set it in the config"))?;
    let judge_model = opts
        .judge_model
        .clone()
        .or_else(|| entry_model(&judge_backend_id))
        .or_else(|| file.defaults.judge_model.clone())
        .or_else(|| opts.mock.is_some().then(|| "mock-judge".to_string()))
        .ok_or_else(|| {
            config_err("no judge model configured; pass --judge-model or set it in the config")
        })?;

    let build_gateway = |backend: Arc<dyn sui_generis::gateway::Backend>| {
        let mut builder = Gateway::builder(backend)
            .budget(Arc::clone(&budget))
            .cache_store(Arc::clone(&spec.cache))
            .max_in_flight(opts.max_in_flight)
            .run_id(&spec.run_id);
        if let Some(log) = &spec.usage_log {
            builder = builder.usage_log(Arc::clone(log));
        }
        Arc::new(builder.build())
    };

    if let Some(script_path) = &opts.mock {
        let script = MockScript::from_path(script_path)
            .with_context(|| format!("loading mock script {}", script_path.display()))?;
        let backend: Arc<dyn sui_generis::gateway::Backend> = Arc::new(MockBackend::new(script));
        let gateway = build_gateway(backend);
        return Ok(Backends {
            gen: Arc::clone(&gateway),
            judge: gateway,
            budget,
            gen_backend_id,
            judge_backend_id,
            continuation_model,
            judge_model,
        });
    }

    let http_backend = |id: &str| -> anyhow::Result<Arc<dyn sui_generis::gateway::Backend>> {
        let entry = file
            .backend
            .get(id)
            .ok_or_else(|| config_err(format!("backend '{id}' not found in the config file")))?;
        let mut config = HttpBackendConfig::new(id, &entry.base_url, &entry.api_key_env);
        if let Some(timeout) = entry.timeout_secs {
            config.timeout_secs = timeout;
        }
        Ok(Arc::new(HttpBackend::new(config)?))
    };

    let gen = build_gateway(http_backend(&gen_backend_id)?);
    let judge = if judge_backend_id == gen_backend_id {
        Arc::clone(&gen)
    } else {
        build_gateway(http_backend(&judge_backend_id)?)
    };
    Ok(Backends {
        gen,
        judge,
        budget,
        gen_backend_id,
        judge_backend_id,
        continuation_model,
        judge_model,
    })
}

fn thread_pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        if jobs == 0 {
            bail!(config_err("--jobs must be at least 1"));
        }
        builder = builder.num_threads(jobs);
    }
    builder.build().context("building worker pool")
}

fn load_stories(path: &Path) -> anyhow::Result<Vec<RawStory>> {
    let stories = corpus::load_corpus(path, CorpusFormat::Jsonl)
        .with_context(|| format!("loading corpus {}", path.display()))?;
    if stories.is_empty() {
        eprintln!("warning: corpus {} contains no stories", path.display());
    }
    Ok(stories)
}

fn fmt_opt(value: Option<f64>, precision: usize) -> String {
    match value {
        Some(v) => format!("{v:.precision$}"),
        None => "--".to_string(),
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Subcommands
// ─────────────────────────────────────────────────────────────────────────────

fn cmd_score(args: ScoreArgs) -> anyhow::Result<()> {
    let file = load_file_config(args.backend.config.as_deref())?;
    let config = resolve_score_config(&args.scoring, &file)?;
    let width = resolve_width(args.width, args.wiki, &file);
    let templates = PromptTemplates::default();
    let stories = load_stories(&args.corpus)?;

    let cache_dir = args.cache_dir.clone().unwrap_or_else(|| args.out_dir.join("cache"));
    let cache = Arc::new(CacheStore::open(cache_dir)?);

    // a provisional resolution picks ids/models so the run id can be derived
    let probe = build_backends(BackendRequestSpec {
        opts: &args.backend,
        file: &file,
        cross_model: args.cross_model.as_deref(),
        cache: Arc::clone(&cache),
        usage_log: None,
        run_id: "probe".into(),
    })?;
    let config_hash = behavior_hash(
        &config,
        width,
        &probe.continuation_model,
        &probe.judge_model,
        &probe.gen_backend_id,
        &probe.judge_backend_id,
        &templates.hash(),
    );
    let digest = corpus_digest(&args.corpus)?;
    let run_id = args.run_id.clone().unwrap_or_else(|| derive_run_id(&config_hash, &digest));

    let run_dir = RunDir::create(args.out_dir.join(&run_id))?;
    let usage_log = UsageLog::create(&run_dir.usage_log_path())?;
    let backends = build_backends(BackendRequestSpec {
        opts: &args.backend,
        file: &file,
        cross_model: args.cross_model.as_deref(),
        cache,
        usage_log: Some(usage_log),
        run_id: run_id.clone(),
    })?;

    RunManifest {
        run_id: run_id.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: report::now_unix(),
        corpus_digest: digest,
        segment_width: width,
        config,
        continuation_model: backends.continuation_model.clone(),
        judge_model: backends.judge_model.clone(),
        gen_backend: backends.gen_backend_id.clone(),
        judge_backend: backends.judge_backend_id.clone(),
        template_hash: templates.hash(),
        config_hash: config_hash.clone(),
    }
    .save(&run_dir.manifest_path())?;

    let run = ScoreRun {
        gen_gateway: &backends.gen,
        judge_gateway: &backends.judge,
        continuation_model: &backends.continuation_model,
        judge_model: &backends.judge_model,
        templates: &templates,
        config,
        run_id: run_id.clone(),
        config_hash,
        run_dir: Some(&run_dir),
    };

    let pool = thread_pool(args.backend.jobs)?;
    let outcomes: Vec<Option<StoryReport>> = pool.install(|| {
        stories
            .par_iter()
            .map(|story| -> anyhow::Result<Option<StoryReport>> {
                let segmented = corpus::segment(story, width)?;
                if segmented.n() < 2 {
                    eprintln!(
                        "warning: skipping story '{}': fewer than 2 segments of {width} words",
                        story.id
                    );
                    return Ok(None);
                }
                Ok(Some(score_story(&run, story, width)?))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    let mut reports: Vec<StoryReport> = outcomes.into_iter().flatten().collect();
    let skipped = stories.len() - reports.len();
    reports.sort_by(|a, b| a.story_id.cmp(&b.story_id));

    fs::write(run_dir.reports_dir().join("summary.csv"), summary_csv(&reports))?;
    let aggregates = aggregate_by_position(&reports);
    if !aggregates.is_empty() {
        fs::write(run_dir.reports_dir().join("positions.csv"), positions_csv(&aggregates))?;
        positions_svg(&aggregates, &run_dir.figures_dir().join("positions.svg"))?;
    }

    println!("run {run_id}");
    for report in &reports {
        println!(
            "{}  n={}  mean_sg={}  drop={}%",
            report.story_id,
            report.n,
            fmt_opt(report.story_mean_sg, 4),
            fmt_opt(report.story_drop_ratio_pct, 2)
        );
    }
    println!("total: {} scored, {skipped} skipped", reports.len());
    backends.print_stats();
    Ok(())
}

fn cmd_continuations(args: ContinuationsArgs) -> anyhow::Result<()> {
    let file = load_file_config(args.backend.config.as_deref())?;
    let config = resolve_score_config(&args.scoring, &file)?;
    let width = resolve_width(args.width, args.wiki, &file);
    let templates = PromptTemplates::default();
    let stories = load_stories(&args.corpus)?;

    let cache_dir = args.cache_dir.clone().unwrap_or_else(|| args.out_dir.join("cache"));
    let cache = Arc::new(CacheStore::open(cache_dir)?);
    let probe = build_backends(BackendRequestSpec {
        opts: &args.backend,
        file: &file,
        cross_model: None,
        cache: Arc::clone(&cache),
        usage_log: None,
        run_id: "probe".into(),
    })?;
    let config_hash = behavior_hash(
        &config,
        width,
        &probe.continuation_model,
        &probe.judge_model,
        &probe.gen_backend_id,
        &probe.judge_backend_id,
        &templates.hash(),
    );
    let digest = corpus_digest(&args.corpus)?;
    let run_id = args.run_id.clone().unwrap_or_else(|| derive_run_id(&config_hash, &digest));
    let run_dir = RunDir::create(args.out_dir.join(&run_id))?;
    let usage_log = UsageLog::create(&run_dir.usage_log_path())?;
    let backends = build_backends(BackendRequestSpec {
        opts: &args.backend,
        file: &file,
        cross_model: None,
        cache,
        usage_log: Some(usage_log),
        run_id: run_id.clone(),
    })?;

    RunManifest {
        run_id: run_id.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: report::now_unix(),
        corpus_digest: digest,
        segment_width: width,
        config,
        continuation_model: backends.continuation_model.clone(),
        judge_model: backends.judge_model.clone(),
        gen_backend: backends.gen_backend_id.clone(),
        judge_backend: backends.judge_backend_id.clone(),
        template_hash: templates.hash(),
        config_hash,
    }
    .save(&run_dir.manifest_path())?;

    let pool = thread_pool(args.backend.jobs)?;
    let mut lines: Vec<String> = pool.install(|| {
        stories
            .par_iter()
            .map(|story| -> anyhow::Result<String> {
                let segmented = corpus::segment(story, width)?;
                if segmented.n() < 2 {
                    eprintln!(
                        "warning: skipping story '{}': fewer than 2 segments of {width} words",
                        story.id
                    );
                    return Ok(format!("{}: skipped", story.id));
                }
                let sets = sample_all_prefixes(
                    &segmented,
                    &story.prompt,
                    config.k,
                    &backends.gen,
                    &backends.continuation_model,
                    None,
                    &templates,
                )
                .map_err(|e| sui_generis::Error::for_story(&story.id, e))?;
                for set in &sets {
                    write_continuations(&run_dir.continuations_dir(), set)?;
                }
                Ok(format!("{}: {} sets of {} continuations", story.id, sets.len(), config.k))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    lines.sort();
    println!("run {run_id}");
    for line in lines {
        println!("{line}");
    }
    backends.print_stats();
    Ok(())
}

fn cmd_judge(args: JudgeArgs) -> anyhow::Result<()> {
    let file = load_file_config(args.backend.config.as_deref())?;
    let config = resolve_score_config(&args.scoring, &file)?;
    let width = resolve_width(args.width, args.wiki, &file);
    let templates = PromptTemplates::default();
    let stories = load_stories(&args.corpus)?;

    if !args.run_dir.join("continuations").is_dir() {
        bail!(config_err(format!(
            "{} has no continuations/ directory; run `continuations` first",
            args.run_dir.display()
        )));
    }
    let run_dir = RunDir::create(&args.run_dir)?;
    let cache_dir = args.cache_dir.clone().unwrap_or_else(|| {
        args.run_dir.parent().map(|p| p.join("cache")).unwrap_or_else(|| "cache".into())
    });
    let cache = Arc::new(CacheStore::open(cache_dir)?);
    let run_id = args
        .run_dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("judge")
        .to_string();
    let usage_log = UsageLog::create(&run_dir.usage_log_path())?;
    let backends = build_backends(BackendRequestSpec {
        opts: &args.backend,
        file: &file,
        cross_model: None,
        cache,
        usage_log: Some(usage_log),
        run_id: run_id.clone(),
    })?;

    // record the judge settings actually used, keeping the sampling-side
    // fields from the continuation run when its manifest is present
    let templates_hash = templates.hash();
    let manifest = match RunManifest::load(&run_dir.manifest_path()) {
        Ok(previous) => RunManifest {
            judge_model: backends.judge_model.clone(),
            judge_backend: backends.judge_backend_id.clone(),
            config,
            template_hash: templates_hash,
            ..previous
        },
        Err(_) => RunManifest {
            run_id: run_id.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created_unix: report::now_unix(),
            corpus_digest: corpus_digest(&args.corpus)?,
            segment_width: width,
            config,
            continuation_model: "stored".into(),
            judge_model: backends.judge_model.clone(),
            gen_backend: "stored".into(),
            judge_backend: backends.judge_backend_id.clone(),
            template_hash: templates_hash,
            config_hash: String::new(),
        },
    };
    manifest.save(&run_dir.manifest_path())?;

    let pool = thread_pool(args.backend.jobs)?;
    let mut lines: Vec<String> = pool.install(|| {
        stories
            .par_iter()
            .map(|story| -> anyhow::Result<String> {
                let segmented = corpus::segment(story, width)?;
                let n = segmented.n();
                if n < 2 {
                    return Ok(format!("{}: skipped", story.id));
                }
                let story_dir = run_dir.continuations_dir().join(&story.id);
                if !story_dir.is_dir() {
                    eprintln!("warning: no continuations for story '{}'; skipping", story.id);
                    return Ok(format!("{}: skipped", story.id));
                }
                let sets = (1..n)
                    .map(|j| read_continuations(&story_dir.join(format!("{j}.jsonl"))))
                    .collect::<sui_generis::Result<Vec<_>>>()
                    .map_err(|e| sui_generis::Error::for_story(&story.id, e))?;
                let k = sets.first().map(|s| s.items.len() as u32).unwrap_or(0);
                let (records, _usage) = judge_matrix(
                    &segmented,
                    &sets,
                    &backends.judge,
                    &backends.judge_model,
                    &templates,
                )
                .map_err(|e| sui_generis::Error::for_story(&story.id, e))?;
                write_judgments(&run_dir.judgments_dir(), &story.id, &records)?;
                let story_config = ScoreConfig { k, ..config };
                let matrix = EchoMatrix::from_judgments(&story.id, n, &records, &story_config)?;
                fs::write(run_dir.echo_dir().join(format!("{}.csv", story.id)), matrix.to_csv())?;
                let mut json = serde_json::to_vec_pretty(&matrix)?;
                json.push(b'\n');
                fs::write(run_dir.echo_dir().join(format!("{}.json", story.id)), json)?;
                Ok(format!("{}: {} verdicts", story.id, records.len()))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    lines.sort();
    for line in lines {
        println!("{line}");
    }
    backends.print_stats();
    Ok(())
}

#[derive(Deserialize)]
struct TextGroup {
    id: String,
    texts: Vec<String>,
}

fn cmd_baselines(args: BaselinesArgs) -> anyhow::Result<()> {
    let raw = fs::read_to_string(&args.groups)
        .with_context(|| format!("reading groups file {}", args.groups.display()))?;
    let mut groups = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let group: TextGroup = serde_json::from_str(line).map_err(|e| {
            config_err(format!("groups file line {}: {e}", idx + 1))
        })?;
        groups.push(group);
    }
    if groups.is_empty() {
        bail!(config_err("groups file contains no groups"));
    }

    let needs_backend = args.embed_model.is_some() || args.ppl_model.is_some();
    let backends = if needs_backend {
        let file = load_file_config(args.backend.config.as_deref())?;
        let cache_dir = args.cache_dir.clone().unwrap_or_else(|| "cache".into());
        Some(build_backends(BackendRequestSpec {
            opts: &args.backend,
            file: &file,
            cross_model: None,
            cache: Arc::new(CacheStore::open(cache_dir)?),
            usage_log: None,
            run_id: "baselines".into(),
        })?)
    } else {
        None
    };

    let smoothing = match args.smooth_eps {
        Some(eps) => baselines::Smoothing::Epsilon(eps),
        None => baselines::Smoothing::Off,
    };

    let mut out = String::from("group,metric,value,inputs_digest,parameters\n");
    for group in &groups {
        let digest = baselines::inputs_digest(&group.texts);
        let mut push = |metric: &str, value: sui_generis::Result<f64>, params: serde_json::Value| {
            match value {
                Ok(value) => out.push_str(&format!(
                    "{},{metric},{value},{digest},{}\n",
                    csv_escape(&group.id),
                    csv_escape(&params.to_string())
                )),
                Err(err) => eprintln!("warning: {}/{metric}: {err}", group.id),
            }
        };

        push(
            "compression_ratio",
            baselines::compression_ratio(&group.texts),
            serde_json::json!({}),
        );
        push(
            "self_bleu",
            baselines::self_bleu(&group.texts, args.max_n, smoothing),
            serde_json::json!({"max_n": args.max_n, "smooth_eps": args.smooth_eps}),
        );
        for n in 1..=3usize {
            push(
                "ngram_diversity",
                baselines::ngram_diversity(&group.texts, n),
                serde_json::json!({"n": n}),
            );
        }
        push(
            "homogenization_rouge_l",
            baselines::homogenization_rouge_l(&group.texts),
            serde_json::json!({}),
        );

        if let (Some(backends), Some(model)) = (&backends, &args.embed_model) {
            let mean_similarity = || -> sui_generis::Result<f64> {
                let mut sum = 0.0;
                let mut pairs = 0u64;
                for (i, a) in group.texts.iter().enumerate() {
                    for b in &group.texts[i + 1..] {
                        sum += baselines::embedding_similarity(a, b, &backends.gen, model)?;
                        pairs += 1;
                    }
                }
                if pairs == 0 {
                    return Err(sui_generis::Error::Invalid(
                        "embedding similarity requires at least two texts".into(),
                    ));
                }
                Ok(sum / pairs as f64)
            };
            push(
                "embedding_similarity_mean",
                mean_similarity(),
                serde_json::json!({"model": model}),
            );
        }
        if let (Some(backends), Some(model)) = (&backends, &args.ppl_model) {
            let mean_ppl = || -> sui_generis::Result<f64> {
                let mut sum = 0.0;
                for text in &group.texts {
                    sum += baselines::perplexity(text, &backends.gen, model)?;
                }
                Ok(sum / group.texts.len() as f64)
            };
            push("perplexity_mean", mean_ppl(), serde_json::json!({"model": model}));
        }
    }

    match &args.out {
        Some(path) => fs::write(path, out)?,
        None => print!("{out}"),
    }
    if let Some(backends) = &backends {
        backends.print_stats();
    }
    Ok(())
}

fn cmd_generate_sg(args: GenerateSgArgs) -> anyhow::Result<()> {
    let file = load_file_config(args.backend.config.as_deref())?;
    let score = resolve_score_config(&args.scoring, &file)?;
    let width = resolve_width(args.width, false, &file);
    let templates = PromptTemplates::default();
    let config = GenConfig {
        m: args.m,
        k_prime: args.k_prime,
        max_segments: args.max_segments,
        segment_width: width,
        score,
        seed: args.seed,
    };
    config.validate()?;

    let cache_dir = args.cache_dir.clone().unwrap_or_else(|| args.out_dir.join("cache"));
    let cache = Arc::new(CacheStore::open(cache_dir)?);
    let probe = build_backends(BackendRequestSpec {
        opts: &args.backend,
        file: &file,
        cross_model: None,
        cache: Arc::clone(&cache),
        usage_log: None,
        run_id: "probe".into(),
    })?;
    let config_hash = behavior_hash(
        &score,
        width,
        &probe.continuation_model,
        &probe.judge_model,
        &probe.gen_backend_id,
        &probe.judge_backend_id,
        &templates.hash(),
    );
    let prompt_digest = {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut hasher = DefaultHasher::new();
        args.prompt.hash(&mut hasher);
        format!("{:016x}", hasher.finish())
    };
    let run_id =
        args.run_id.clone().unwrap_or_else(|| derive_run_id(&config_hash, &prompt_digest));
    let run_dir = RunDir::create(args.out_dir.join(&run_id))?;
    let usage_log = UsageLog::create(&run_dir.usage_log_path())?;
    let backends = build_backends(BackendRequestSpec {
        opts: &args.backend,
        file: &file,
        cross_model: None,
        cache,
        usage_log: Some(usage_log),
        run_id: run_id.clone(),
    })?;

    RunManifest {
        run_id: run_id.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: report::now_unix(),
        corpus_digest: prompt_digest,
        segment_width: width,
        config: score,
        continuation_model: backends.continuation_model.clone(),
        judge_model: backends.judge_model.clone(),
        gen_backend: backends.gen_backend_id.clone(),
        judge_backend: backends.judge_backend_id.clone(),
        template_hash: templates.hash(),
        config_hash,
    }
    .save(&run_dir.manifest_path())?;

    let pool = thread_pool(args.backend.jobs)?;
    let partial_path = run_dir.reports_dir().join("partial.json");
    let grown = pool.install(|| {
        generate_sg_guided(
            &args.prompt,
            &backends.gen,
            &backends.judge,
            &backends.continuation_model,
            &backends.judge_model,
            &templates,
            &config,
            Some(&partial_path),
        )
    })?;

    let story_id = grown.story.id.clone();
    let mut story_json = serde_json::to_vec_pretty(&grown.story)?;
    story_json.push(b'\n');
    fs::write(run_dir.reports_dir().join(format!("{story_id}.story.json")), story_json)?;
    let mut trace_json = serde_json::to_vec_pretty(&grown.trace)?;
    trace_json.push(b'\n');
    fs::write(run_dir.reports_dir().join(format!("{story_id}.trace.json")), trace_json)?;
    // one corpus-format line, ready to feed back into `score`
    fs::write(
        run_dir.reports_dir().join(format!("{story_id}.jsonl")),
        format!("{}\n", serde_json::to_string(&grown.story)?),
    )?;

    println!("run {run_id}");
    println!("story {story_id}: {} segments", grown.segmented.n());
    for step in &grown.trace {
        println!(
            "step {}: accepted candidate {} (sg={}){}",
            step.step,
            step.accepted_index,
            fmt_opt(step.accepted_sg, 4),
            if step.ended { " [end]" } else { "" }
        );
    }
    println!("---");
    println!("{}", grown.story.body);
    backends.print_stats();
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> anyhow::Result<()> {
    let read_matrix = |path: &Path| -> anyhow::Result<EchoMatrix> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading echo CSV {}", path.display()))?;
        let story_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("echo");
        Ok(EchoMatrix::from_csv(story_id, args.k, &text)?)
    };
    let a = read_matrix(&args.echo)?;
    let b = args.echo_b.as_deref().map(read_matrix).transpose()?;
    let out = args.out.clone().unwrap_or_else(|| args.echo.with_extension("svg"));
    emit_heatmap(&a, b.as_ref(), &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_aggregate(args: AggregateArgs) -> anyhow::Result<()> {
    let run_dir = RunDir::create(&args.run_dir)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(run_dir.reports_dir())?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for path in &paths {
        // reports/ may hold non-report JSON (partial stories, traces)
        if let Ok(report) = serde_json::from_slice::<StoryReport>(&fs::read(path)?) {
            reports.push(report);
        }
    }
    if reports.is_empty() {
        bail!(config_err(format!(
            "no story reports found under {}",
            run_dir.reports_dir().display()
        )));
    }
    let aggregates = aggregate_by_position(&reports);
    fs::write(run_dir.reports_dir().join("positions.csv"), positions_csv(&aggregates))?;
    positions_svg(&aggregates, &run_dir.figures_dir().join("positions.svg"))?;

    println!("{} reports", reports.len());
    for a in &aggregates {
        println!(
            "i={}  mean_sg={:.4}  ci95={}  m={}",
            a.i,
            a.mean,
            fmt_opt(a.ci_half, 4),
            a.m
        );
    }
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> anyhow::Result<()> {
    if args.segments == 0 || args.k == 0 {
        bail!(config_err("--segments and --k must be at least 1"));
    }
    println!("{}", estimate_calls(args.segments, args.k));
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────────
// Entry point and exit codes
// ─────────────────────────────────────────────────────────────────────────────

/// Render the cause chain, skipping causes a wrapper already printed itself.
fn render_error(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    let mut cause: Option<&(dyn std::error::Error + 'static)> = err.source();
    while let Some(current) = cause {
        let msg = current.to_string();
        if !out.contains(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        cause = current.source();
    }
    out
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(lib_err) = err.downcast_ref::<sui_generis::Error>() {
        if lib_err.is_budget_exhausted() {
            return 4;
        }
        if lib_err.is_backend_failure() {
            return 3;
        }
        if matches!(lib_err.root(), sui_generis::Error::Config(_)) {
            return 2;
        }
    }
    1
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(args) => cmd_score(args),
        Command::Continuations(args) => cmd_continuations(args),
        Command::Judge(args) => cmd_judge(args),
        Command::Baselines(args) => cmd_baselines(args),
        Command::GenerateSg(args) => cmd_generate_sg(args),
        Command::Heatmap(args) => cmd_heatmap(args),
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Estimate(args) => cmd_estimate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {}", render_error(&err));
        std::process::exit(exit_code_for(&err));
    }
}
