//! Command-line front end.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Logs go to stderr;
//! data only goes to files.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use serde::Serialize;

use crate::annotation::http::{router, AppState};
use crate::annotation::{AnnotationConfig, AnnotationError, AnnotationStore, Clock};
use crate::benchmarks::{self, BenchmarkError, BenchmarkName, BenchmarkSpec};
use crate::corpus::{self, read_jsonl, write_atomic, CorpusError, HalluRecord, SourceRecord};
use crate::detection::{run_detection, BaselineShots, DetectionError, DetectionRun, Knowledge, Prediction, PromptMode};
use crate::filtering::{filter_run, FilterError};
use crate::gateway::{
    ChatBackend, EndpointConfig, Gateway, GatewayError, MockBackend, MockScript, OpenAiBackend, Registry,
    RegistryError, RetryPolicy,
};
use crate::manifest::ManifestBuilder;
use crate::metrics::{evaluate, MetricsError};
use crate::retrieval::{FileRetriever, HttpRetriever, Retriever, RetrieverError, DEFAULT_TOP_K};
use crate::rng::substream;
use crate::synthesis::{inject, FewShotPool, InjectConfig, SynthesisError, DEFAULT_CANDIDATES, DEFAULT_TEMPERATURE};
use crate::taxonomy::{Taxonomy, TaxonomyError, TypeId};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Parser, Debug)]
#[command(name = "hadkit", version, about = "Hallucination synthesis, filtering, annotation and detection toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalOpts {
    /// Taxonomy TOML replacing the built-in one.
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
    /// Endpoint registry TOML.
    #[arg(long, global = true)]
    pub endpoints: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Maximum in-flight model requests.
    #[arg(long, global = true, default_value_t = 8)]
    pub concurrency: usize,
    /// Mock script; replaces every chat endpoint with scripted replies.
    #[arg(long, global = true)]
    pub mock: Option<PathBuf>,
    /// Timestamp recorded in outputs (RFC 3339). Defaults to the Unix epoch
    /// under --mock and to the wall clock otherwise.
    #[arg(long, global = true)]
    pub now: Option<DateTime<Utc>>,
    /// Cap on total model requests.
    #[arg(long, global = true)]
    pub max_requests: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    #[serde(skip)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inject one hallucination type into source records.
    Synth(SynthArgs),
    /// Judge raw candidates with a verifier endpoint.
    Filter(FilterArgs),
    /// Human annotation service.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Run a detector over records.
    Detect(DetectArgs),
    /// Score predictions against gold records.
    Eval(EvalArgs),
    /// Ingest, detect and score an external benchmark.
    Bench(BenchArgs),
    /// Label and task counts of a record file.
    Stats(StatsArgs),
    /// Add one clean record per hallucinated record.
    Balance(BalanceArgs),
    /// Draw a per-type training mixture plus clean records.
    Mix(MixArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long = "type")]
    pub type_id: TypeId,
    #[arg(long)]
    pub sources: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    pub candidates: u32,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value = "injector")]
    pub endpoint: String,
    /// Extra few-shot examples (JSONL), appended to the built-in pool.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Draw this many compatible sources instead of using all of them.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FilterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_pass: PathBuf,
    #[arg(long)]
    pub out_fail: PathBuf,
    /// Records whose verifier call failed.
    #[arg(long)]
    pub out_deferred: Option<PathBuf>,
    #[arg(long, default_value = "verifier")]
    pub endpoint: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum AnnotateCommand {
    /// Serve the annotation API and UI.
    Serve(ServeArgs),
    /// Sample up to N records per (task kind, type) cell for annotation.
    Sample(SampleArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Annotator id; repeat for each annotator.
    #[arg(long = "annotator", required = true)]
    pub annotators: Vec<String>,
    /// Append-only event log, replayed on start.
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub export_dir: PathBuf,
    /// Clean source pool used by balanced exports.
    #[arg(long)]
    pub positives: Option<PathBuf>,
    /// Environment variable holding the shared bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    #[arg(long, default_value_t = 30)]
    pub lease_minutes: i64,
    #[arg(long)]
    pub tie_breaker: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SampleArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub per_cell: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Fine,
    Binary,
    Baseline,
}

#[derive(Args, Debug, Serialize)]
pub struct DetectorOpts {
    #[arg(long, value_enum, default_value_t = ModeArg::Fine)]
    pub mode: ModeArg,
    #[arg(long, default_value = "detector")]
    pub endpoint: String,
    /// JSON file with `correct` and `hallucinated` baseline examples.
    #[arg(long)]
    pub baseline_shots: Option<PathBuf>,
    #[arg(long)]
    pub with_knowledge: bool,
    /// Retriever id from the registry, or a path to a retrieval fixture.
    #[arg(long)]
    pub retriever: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct DetectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub detector: DetectorOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Per-category table (CSV).
    #[arg(long)]
    pub per_class: Option<PathBuf>,
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub name: BenchmarkName,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write the ingested records.
    #[arg(long)]
    pub records_out: Option<PathBuf>,
    /// Also write the predictions.
    #[arg(long)]
    pub preds_out: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BalanceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub positives: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct MixArgs {
    /// Filtered record files; repeat as needed.
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub positives: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clean records as a fraction of the hallucinated draw.
    #[arg(long, default_value_t = 0.1)]
    pub positive_fraction: f64,
    /// Per-type target such as FE=9000; types not listed use the default mixture.
    #[arg(long = "target", value_parser = parse_target)]
    #[serde(skip)]
    pub targets: Vec<(TypeId, usize)>,
}

fn parse_target(s: &str) -> Result<(TypeId, usize), String> {
    let (t, n) = s.split_once('=').ok_or("expected TYPE=COUNT")?;
    let t: TypeId = t.parse().map_err(|e: TaxonomyError| e.to_string())?;
    Ok((t, n.trim().parse().map_err(|e| format!("bad count: {e}"))?))
}

/// Everything a command needs from the global options.
struct Context {
    global: GlobalOpts,
    taxonomy: Taxonomy,
    registry: Registry,
    backend: Option<Arc<dyn ChatBackend>>,
    now: DateTime<Utc>,
}

impl Context {
    fn new(global: GlobalOpts) -> Result<Context, CliError> {
        let taxonomy = match &global.taxonomy {
            Some(p) => Taxonomy::from_path(p)?,
            None => Taxonomy::builtin(),
        };
        let mut registry = match &global.endpoints {
            Some(p) => Registry::from_path(p)?,
            None => Registry::default(),
        };
        let backend: Option<Arc<dyn ChatBackend>> = match &global.mock {
            Some(p) => {
                let script = MockScript::from_path(p)?;
                let mut ids: Vec<&String> = script.endpoints.keys().collect();
                ids.sort();
                for id in ids {
                    if registry.get(id).is_none() {
                        registry.insert(EndpointConfig::mock(id));
                    }
                }
                Some(Arc::new(MockBackend::new(script)))
            }
            None => None,
        };
        let now = global.now.unwrap_or_else(|| {
            if global.mock.is_some() {
                DateTime::UNIX_EPOCH
            } else {
                Utc::now()
            }
        });
        Ok(Context {
            global,
            taxonomy,
            registry,
            backend,
            now,
        })
    }

    fn gateway(&self) -> Gateway {
        let (backend, retry): (Arc<dyn ChatBackend>, RetryPolicy) = match &self.backend {
            Some(b) => (b.clone(), RetryPolicy::immediate(RetryPolicy::default().max_attempts)),
            None => (Arc::new(OpenAiBackend::new()), RetryPolicy::default()),
        };
        let gw = Gateway::new(self.registry.clone(), backend).with_retry(retry);
        match self.global.max_requests {
            Some(n) => gw.with_budget(n),
            None => gw,
        }
    }

    fn require_endpoint(&self, id: &str) -> Result<(), CliError> {
        if self.registry.get(id).is_none() {
            return Err(CliError::Usage(format!(
                "endpoint {id:?} is not in the registry (pass --endpoints or --mock)"
            )));
        }
        Ok(())
    }

    fn manifest(&self, command: &str, args: &impl Serialize) -> ManifestBuilder {
        let args = serde_json::json!({ "global": self.global, "command": args });
        ManifestBuilder::new(command, args, self.global.seed, self.now)
    }

    fn retriever(&self, spec: &str) -> Result<Box<dyn Retriever>, CliError> {
        if let Some(cfg) = self.registry.retriever(spec) {
            return Ok(match cfg.url.strip_prefix("file://") {
                Some(path) => Box::new(FileRetriever::from_path(Path::new(path))?),
                None => Box::new(HttpRetriever::new(cfg.clone())),
            });
        }
        let path = Path::new(spec);
        if path.is_file() {
            return Ok(Box::new(FileRetriever::from_path(path)?));
        }
        Err(CliError::Usage(format!("unknown retriever {spec:?}")))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(format!("writing {}", path.display())))
}

fn add_input(m: &mut ManifestBuilder, path: &Path) -> Result<(), CliError> {
    m.input(path).map_err(io_err(format!("hashing {}", path.display())))?;
    Ok(())
}

fn finish(m: &ManifestBuilder, primary: &Path, outputs: &[&Path], now: DateTime<Utc>) -> Result<(), CliError> {
    m.finish(primary, outputs, now)
        .map_err(io_err(format!("writing manifest for {}", primary.display())))?;
    Ok(())
}

fn prompt_mode(opts: &DetectorOpts) -> Result<PromptMode, CliError> {
    Ok(match opts.mode {
        ModeArg::Fine => PromptMode::FineGrained,
        ModeArg::Binary => PromptMode::Binary,
        ModeArg::Baseline => {
            let shots = match &opts.baseline_shots {
                None => BaselineShots::default(),
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(io_err(format!("reading {}", p.display())))?;
                    let shots: BaselineShots = serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("invalid baseline shots file: {e}")))?;
                    shots.validate()?;
                    shots
                }
            };
            PromptMode::BaselineFewShot(Box::new(shots))
        }
    })
}

async fn detect_records(
    ctx: &Context,
    opts: &DetectorOpts,
    records: &[HalluRecord],
    manifest: &mut ManifestBuilder,
) -> Result<Vec<Prediction>, CliError> {
    ctx.require_endpoint(&opts.endpoint)?;
    manifest.endpoint(&opts.endpoint);
    let mode = prompt_mode(opts)?;
    let retriever = match (opts.with_knowledge, &opts.retriever) {
        (false, _) => None,
        (true, None) => return Err(CliError::Usage("--with-knowledge needs --retriever".into())),
        (true, Some(spec)) => {
            if Path::new(spec).is_file() {
                add_input(manifest, Path::new(spec))?;
            } else {
                manifest.endpoint(spec);
            }
            Some(ctx.retriever(spec)?)
        }
    };
    let gateway = ctx.gateway();
    let run = DetectionRun {
        mode: &mode,
        endpoint: &opts.endpoint,
        knowledge: retriever.as_deref().map(|r| Knowledge {
            retriever: r,
            top_k: opts.topk,
        }),
        max_in_flight: ctx.global.concurrency,
    };
    Ok(run_detection(&ctx.taxonomy, &gateway, records, &run).await?)
}

async fn synth(ctx: &Context, a: &SynthArgs) -> Result<(), CliError> {
    ctx.require_endpoint(&a.endpoint)?;
    let mut m = ctx.manifest("synth", a);
    m.endpoint(&a.endpoint);
    add_input(&mut m, &a.sources)?;
    let mut pool = FewShotPool::builtin();
    if let Some(p) = &a.pool {
        pool.extend_from_path(p)?;
        add_input(&mut m, p)?;
    }
    let mut sources: Vec<SourceRecord> = corpus::load(&a.sources)?;
    if let Some(n) = a.sample {
        let mut compatible: Vec<SourceRecord> = sources
            .into_iter()
            .filter(|s| ctx.taxonomy.is_compatible(s.task_kind, a.type_id))
            .collect();
        compatible.sort_by(|x, y| x.id.cmp(&y.id));
        let n = n.min(compatible.len());
        let mut rng = substream(ctx.global.seed, &["synth_sources", a.type_id.as_str()]);
        let mut picks = sample(&mut rng, compatible.len(), n).into_vec();
        picks.sort_unstable();
        sources = picks.into_iter().map(|i| compatible[i].clone()).collect();
    }
    let cfg = InjectConfig {
        type_id: a.type_id,
        n_candidates: a.candidates,
        temperature: a.temperature,
        seed: ctx.global.seed,
        endpoint: a.endpoint.clone(),
        max_in_flight: ctx.global.concurrency,
        injected_at: ctx.now,
    };
    let (records, report) = inject(&ctx.taxonomy, &pool, &ctx.gateway(), &sources, &cfg).await?;
    corpus::save(&records, &a.out)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(r) = &a.report {
        write_json(r, &report)?;
        outputs.push(r);
    }
    m.count("sources", report.sources as u64)
        .count("records", report.records as u64)
        .count("dropped_unparseable", report.dropped_unparseable as u64)
        .count("failures", report.failures.len() as u64);
    finish(&m, &a.out, &outputs, ctx.now)
}

async fn filter(ctx: &Context, a: &FilterArgs) -> Result<(), CliError> {
    ctx.require_endpoint(&a.endpoint)?;
    let mut m = ctx.manifest("filter", a);
    m.endpoint(&a.endpoint);
    add_input(&mut m, &a.input)?;
    let records: Vec<HalluRecord> = corpus::load(&a.input)?;
    let out = filter_run(&ctx.taxonomy, &ctx.gateway(), &records, &a.endpoint, ctx.global.concurrency).await?;
    corpus::save(&out.passed, &a.out_pass)?;
    corpus::save(&out.failed, &a.out_fail)?;
    let mut outputs = vec![a.out_pass.as_path(), a.out_fail.as_path()];
    if let Some(p) = &a.out_deferred {
        corpus::save(&out.deferred, p)?;
        outputs.push(p);
    } else if !out.deferred.is_empty() {
        tracing::warn!(count = out.deferred.len(), "deferred records not written; pass --out-deferred to keep them");
    }
    if let Some(r) = &a.report {
        write_json(r, &out.report)?;
        outputs.push(r);
    }
    m.count("total", out.report.total as u64)
        .count("passed", out.report.passed as u64)
        .count("failed", out.report.failed as u64)
        .count("deferred", out.report.deferred as u64);
    finish(&m, &a.out_pass, &outputs, ctx.now)
}

async fn serve(ctx: &Context, a: &ServeArgs, clock: Clock) -> Result<(), CliError> {
    let records: Vec<HalluRecord> = corpus::load(&a.input)?;
    let mut cfg = AnnotationConfig::new(a.annotators.iter().cloned());
    cfg.lease = chrono::Duration::minutes(a.lease_minutes);
    cfg.tie_breaker = a.tie_breaker;
    let store = AnnotationStore::open(records, cfg, Some(&a.events), clock)?;
    let positives = match &a.positives {
        Some(p) => corpus::load(p)?,
        None => Vec::new(),
    };
    let token = match &a.token_env {
        None => None,
        Some(var) => Some(std::env::var(var).map_err(|_| CliError::Usage(format!("environment variable {var} is not set")))?),
    };
    let state = AppState {
        store: Arc::new(store),
        taxonomy: Arc::new(ctx.taxonomy.clone()),
        ui_dir: a.ui_dir.clone(),
        export_dir: a.export_dir.clone(),
        positives: Arc::new(positives),
        token,
    };
    let listener = tokio::net::TcpListener::bind(a.addr)
        .await
        .map_err(io_err(format!("binding {}", a.addr)))?;
    tracing::info!(addr = %a.addr, "annotation service listening");
    eprintln!("listening on http://{}", listener.local_addr().map_err(io_err("local address"))?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io_err("serving"))
}

fn sample_cmd(ctx: &Context, a: &SampleArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("annotate-sample", a);
    add_input(&mut m, &a.input)?;
    let records: Vec<HalluRecord> = corpus::load(&a.input)?;
    let picked = corpus::sample_per_cell(&records, a.per_cell, ctx.global.seed);
    corpus::save(&picked, &a.out)?;
    m.count("records", picked.len() as u64);
    finish(&m, &a.out, &[&a.out], ctx.now)
}

async fn detect(ctx: &Context, a: &DetectArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("detect", a);
    add_input(&mut m, &a.input)?;
    let records: Vec<HalluRecord> = corpus::load(&a.input)?;
    let preds = detect_records(ctx, &a.detector, &records, &mut m).await?;
    corpus::save(&preds, &a.out)?;
    let invalid = preds
        .iter()
        .filter(|p| matches!(p.result.predicted, crate::taxonomy::Label::Invalid(_)))
        .count();
    m.count("records", preds.len() as u64).count("invalid", invalid as u64);
    finish(&m, &a.out, &[&a.out], ctx.now)
}

fn eval(ctx: &Context, a: &EvalArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("eval", a);
    add_input(&mut m, &a.gold)?;
    add_input(&mut m, &a.preds)?;
    let gold: Vec<HalluRecord> = corpus::load(&a.gold)?;
    let preds: Vec<Prediction> = read_jsonl(&a.preds)?;
    let report = evaluate(&gold, &preds)?;
    write_json(&a.report, &report)?;
    let mut outputs = vec![a.report.as_path()];
    if let Some(p) = &a.per_class {
        write_atomic(p, report.per_class_table().as_bytes()).map_err(io_err(format!("writing {}", p.display())))?;
        outputs.push(p);
    }
    if let Some(p) = &a.confusion_csv {
        write_atomic(p, report.confusion.to_csv().as_bytes()).map_err(io_err(format!("writing {}", p.display())))?;
        outputs.push(p);
    }
    m.count("items", report.n_items as u64);
    finish(&m, &a.report, &outputs, ctx.now)
}

async fn bench(ctx: &Context, a: &BenchArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("bench", a);
    add_input(&mut m, &a.data)?;
    let spec = BenchmarkSpec::of(a.name);
    let records = benchmarks::ingest(&spec, &a.data, ctx.global.seed)?;
    let preds = detect_records(ctx, &a.detector, &records, &mut m).await?;
    let report = benchmarks::score(&spec, &records, &preds)?;
    write_json(&a.report, &report)?;
    let mut outputs = vec![a.report.as_path()];
    if let Some(p) = &a.records_out {
        corpus::save(&records, p)?;
        outputs.push(p);
    }
    if let Some(p) = &a.preds_out {
        corpus::save(&preds, p)?;
        outputs.push(p);
    }
    m.count("items", report.n_items as u64);
    finish(&m, &a.report, &outputs, ctx.now)
}

fn stats_cmd(a: &StatsArgs) -> Result<(), CliError> {
    let records: Vec<HalluRecord> = corpus::load(&a.input)?;
    let stats = corpus::stats(&records);
    match &a.out {
        Some(p) => write_json(p, &stats),
        None => {
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            Ok(())
        }
    }
}

fn balance(ctx: &Context, a: &BalanceArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("balance", a);
    add_input(&mut m, &a.input)?;
    add_input(&mut m, &a.positives)?;
    let hallu: Vec<HalluRecord> = corpus::load(&a.input)?;
    let pool: Vec<SourceRecord> = corpus::load(&a.positives)?;
    let out = corpus::assemble_balanced(&hallu, &pool, ctx.global.seed)?;
    corpus::save(&out, &a.out)?;
    m.count("hallucinated", hallu.len() as u64).count("total", out.len() as u64);
    finish(&m, &a.out, &[&a.out], ctx.now)
}

fn mix(ctx: &Context, a: &MixArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("mix", a);
    let mut pools: BTreeMap<TypeId, Vec<HalluRecord>> = BTreeMap::new();
    for p in &a.inputs {
        add_input(&mut m, p)?;
        for r in corpus::load::<HalluRecord>(p)? {
            if let Some(t) = r.label.type_id() {
                pools.entry(t).or_default().push(r);
            }
        }
    }
    add_input(&mut m, &a.positives)?;
    let clean: Vec<SourceRecord> = corpus::load(&a.positives)?;
    let mut targets = corpus::default_mixture();
    let overrides: HashMap<TypeId, usize> = a.targets.iter().copied().collect();
    targets.extend(overrides);
    let out = corpus::ratio_sample(&pools, &targets, &clean, a.positive_fraction, ctx.global.seed)?;
    corpus::save(&out, &a.out)?;
    m.count("total", out.len() as u64);
    finish(&m, &a.out, &[&a.out], ctx.now)
}

async fn dispatch(cli: Cli) -> Result<(), CliError> {
    let ctx = Context::new(cli.global)?;
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a).await,
        Command::Filter(a) => filter(&ctx, a).await,
        Command::Annotate(AnnotateCommand::Serve(a)) => {
            let clock: Clock = match ctx.global.now {
                Some(t) => Arc::new(move || t),
                None => crate::annotation::system_clock(),
            };
            serve(&ctx, a, clock).await
        }
        Command::Annotate(AnnotateCommand::Sample(a)) => sample_cmd(&ctx, a),
        Command::Detect(a) => detect(&ctx, a).await,
        Command::Eval(a) => eval(&ctx, a),
        Command::Bench(a) => bench(&ctx, a).await,
        Command::Stats(a) => stats_cmd(a),
        Command::Balance(a) => balance(&ctx, a),
        Command::Mix(a) => mix(&ctx, a),
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("HADKIT_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.global.verbose);
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: failed to start runtime: {e}");
            return 1;
        }
    };
    match runtime.block_on(dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
