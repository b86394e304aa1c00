mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use shelfmatch_core::catalog::{load_manifest, CatalogManifest, CoarseClass};
use shelfmatch_core::embedding::{
    load_embedding_store, save_embedding_store, EmbeddingBackend, EmbeddingProvider, EmbeddingStore,
};
use shelfmatch_core::evaluation::{
    load_queries, mask_ratio_diagnostic, query_rows, MetricsReport, QueryRow, QuerySet, ReportFormat,
};
use shelfmatch_core::matching::{MatcherConfig, DEFAULT_RATIO};
use shelfmatch_core::pipeline::{
    build_pool, build_store, write_results_jsonl, CandidateStrategy, Engine, PipelineConfig, QueryImage,
    RetrievalResult,
};
use shelfmatch_core::raster::{load_mask, load_rgb};
use shelfmatch_core::remote::RemoteClient;
use shelfmatch_core::segmentation::SegmenterConfig;
use shelfmatch_core::synthesis::{generate_dataset, SynthSpec};
use shelfmatch_core::{Error, ErrorClass, Result};

use config::RunConfigFile;

const HISTOGRAM_BINS: usize = 10;
const DEFAULT_VARIANTS: &str = "full,no_stage1,no_segmentation,matcher=alt,exhaustive";

#[derive(Parser)]
#[command(name = "shelfmatch", version, about = "Staged product image retrieval")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Catalog manifest; overrides the config.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Stage-1 candidate count K.
    #[arg(long, global = true)]
    top: Option<usize>,
    /// Worker threads; 0 = all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// json or csv; defaults from the report extension.
    #[arg(long, global = true)]
    format: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Store,
    Hash,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a catalog and write the prepared-feature cache.
    Ingest {
        /// Cache path; defaults to the config's feature_cache.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Embed every gallery image and write the store.
    Embed {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one query and print the ranking.
    Query {
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Coarse class, for the class-filter strategy.
        #[arg(long)]
        class: Option<String>,
    },
    /// Evaluate a labelled query list.
    Eval {
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Also write per-query rankings as JSON lines.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Include timings in --results (makes the file run-dependent).
        #[arg(long)]
        with_timings: bool,
    },
    /// Generate a synthetic catalog and query set.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate named pipeline variants side by side.
    Ablate {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = DEFAULT_VARIANTS)]
        variants: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Provider => 3,
                ErrorClass::Data => 4,
            })
        }
    }
}

/// Config file plus command-line overrides, validated up front.
fn settings(cli: &Cli) -> Result<RunConfigFile> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(m) = &cli.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    if let Some(r) = &cli.report {
        cfg.paths.report = Some(r.clone());
    }
    let p = &mut cfg.pipeline;
    if let Some(b) = cli.backend {
        p.embedder = match b {
            Backend::Hash => EmbeddingBackend::default(),
            Backend::Store => EmbeddingBackend::Store {
                path: cfg.paths.store.clone(),
            },
            Backend::Remote => EmbeddingBackend::Remote,
        };
    }
    if let Some(k) = cli.top {
        p.k = k;
    }
    if let Some(w) = cli.workers {
        p.worker_count = w;
    }
    if let Some(s) = cli.seed {
        p.seed = s;
    }
    p.validate()?;
    report_format(cli, cfg.paths.report.as_deref())?;
    Ok(cfg)
}

fn report_format(cli: &Cli, report: Option<&Path>) -> Result<ReportFormat> {
    match &cli.format {
        Some(f) => ReportFormat::from_str(f),
        None if report.and_then(|r| r.extension()).is_some_and(|e| e == "csv") => Ok(ReportFormat::Csv),
        None => Ok(ReportFormat::Json),
    }
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config paths)")))
}

fn catalog(cfg: &RunConfigFile) -> Result<Arc<CatalogManifest>> {
    Ok(Arc::new(load_manifest(need(&cfg.paths.manifest, "manifest")?)?))
}

/// Gallery vectors: the configured store file, else the manifest's, else
/// none (the engine embeds the gallery itself).
fn gallery_store(cfg: &RunConfigFile, catalog: &CatalogManifest) -> Result<Option<Arc<EmbeddingStore>>> {
    let path = match &cfg.pipeline.embedder {
        // The store backend loads its own file.
        EmbeddingBackend::Store { path: Some(_) } => None,
        _ => cfg.paths.store.clone().or_else(|| catalog.embedding_store_ref.clone()),
    };
    path.map(|p| load_embedding_store(p).map(Arc::new)).transpose()
}

fn engine(cfg: &RunConfigFile, pipeline: PipelineConfig, catalog: Arc<CatalogManifest>) -> Result<Engine> {
    let store = gallery_store(cfg, &catalog)?;
    let engine = Engine::new(pipeline, catalog, store)?;
    if let Some(cache) = &cfg.paths.feature_cache {
        if cache.exists() {
            engine.load_cache(cache)?;
        }
    }
    Ok(engine)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = settings(&cli)?;
    match &cli.command {
        Command::Ingest { cache } => ingest(&cfg, cache.as_deref()),
        Command::Embed { out } => embed(&cfg, out),
        Command::Query { image, mask, class } => query(&cfg, image, mask.as_deref(), class.as_deref()),
        Command::Eval {
            queries,
            results,
            with_timings,
        } => {
            let queries = queries.clone().or(cfg.paths.queries.clone());
            eval(&cli, &cfg, need(&queries, "query list")?, results.as_deref(), *with_timings)
        }
        Command::Synth { spec, out } => synth(&cli, spec.as_deref(), out),
        Command::Ablate { queries, variants } => {
            let queries = queries.clone().or(cfg.paths.queries.clone());
            ablate(&cli, &cfg, need(&queries, "query list")?, variants)
        }
    }
}

fn ingest(cfg: &RunConfigFile, cache: Option<&Path>) -> Result<()> {
    let catalog = catalog(cfg)?;
    let cache = match cache.or(cfg.paths.feature_cache.as_deref()) {
        Some(c) => c.to_path_buf(),
        None => need(&cfg.paths.manifest, "manifest")?.with_extension("smfc"),
    };
    let engine = Engine::new(cfg.pipeline.clone(), catalog.clone(), gallery_store(cfg, &catalog)?)?;
    engine.prepare_all()?;
    engine.save_cache(&cache)?;
    let snapshot = engine.gallery_snapshot();
    let fallbacks = snapshot.iter().filter(|(_, e)| e.fallback).count();
    let keypoints: usize = snapshot.iter().map(|(_, e)| e.features.len()).sum();
    println!(
        "products {}  images {}  keypoints {}  segmentation fallbacks {}  cache {}",
        catalog.len(),
        catalog.image_count(),
        keypoints,
        fallbacks,
        cache.display()
    );
    Ok(())
}

fn embed(cfg: &RunConfigFile, out: &Path) -> Result<()> {
    let catalog = catalog(cfg)?;
    let p = &cfg.pipeline;
    if matches!(p.embedder, EmbeddingBackend::Store { .. }) {
        return Err(Error::Config("the store backend reads embeddings; pick hash or remote to compute them".into()));
    }
    let remote = match p.embedder {
        EmbeddingBackend::Remote => {
            let ep = p.endpoint.clone().unwrap_or_default().with_env_fallback();
            Some(Arc::new(RemoteClient::new(ep)?))
        }
        _ => None,
    };
    let embedder = EmbeddingProvider::from_config(&p.embedder, None, remote.as_ref())?;
    let store = build_pool(p.worker_count)?.install(|| build_store(&catalog, &embedder))?;
    save_embedding_store(&store, out)?;
    println!("embedded {} images (dim {}) -> {}", store.len(), store.dim(), out.display());
    Ok(())
}

fn parse_class(s: &str) -> Result<CoarseClass> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown coarse class {s:?}")))
}

fn query(cfg: &RunConfigFile, image: &Path, mask: Option<&Path>, class: Option<&str>) -> Result<()> {
    let class = class.map(parse_class).transpose()?;
    let catalog = catalog(cfg)?;
    let engine = engine(cfg, cfg.pipeline.clone(), catalog)?;
    let q = QueryImage {
        id: image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "query".into()),
        image: load_rgb(image)?,
        mask_ref: mask.map(Path::to_path_buf),
        class,
    };
    let r = engine.run_query(&q)?;
    println!("{:>4}  {:<16} {:>7} {:>8}  best_view", "rank", "product", "inliers", "stage1");
    for (i, e) in r.ranked.iter().enumerate() {
        println!(
            "{:>4}  {:<16} {:>7} {:>8.4}  {}",
            i + 1,
            e.product_id,
            e.inlier_score,
            e.stage1_score,
            e.best_view
        );
    }
    let t = r.timings;
    println!(
        "timings ms: stage1 {:.2}  stage2 {:.2}  stage3 {:.2}  total {:.2}  (gallery prep {:.2})",
        t.stage1, t.stage2, t.stage3, t.total, r.gallery_prep_ms
    );
    if !r.flags.is_empty() {
        println!("flags: {}", r.flags.iter().cloned().collect::<Vec<_>>().join(", "));
    }
    Ok(())
}

struct Evaluation {
    report: MetricsReport,
    rows: Vec<QueryRow>,
    results: Vec<RetrievalResult>,
}

/// Runs the batch, then the out-of-mask diagnostic on every query that
/// has a ground-truth mask.
fn evaluate(engine: &Engine, qs: &QuerySet, name: &str) -> Result<Evaluation> {
    let mut results = Vec::new();
    let mut labels = Vec::new();
    let mut first_error = None;
    let mut failed = 0;
    for ((id, r), label) in engine.run_batch(&qs.specs).into_iter().zip(&qs.labels) {
        match r {
            Ok(r) => {
                results.push(r);
                labels.push(label.clone());
            }
            Err(e) => {
                eprintln!("warning: query {id} failed: {e}");
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if results.is_empty() {
        return Err(first_error.unwrap_or(Error::Dataset("no queries".into())));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, spec) in qs.specs.iter().enumerate() {
        let (Some(mask_path), Some(label)) = (qs.mask_path(i), labels.iter().find(|l| l.query_id == spec.id)) else {
            continue;
        };
        let q = spec.load()?;
        match mask_ratio_diagnostic(engine, &q, &label.true_product_id, &load_mask(&mask_path)?) {
            Ok(rec) => records.push(rec),
            Err(Error::NoMatches | Error::MissingMask(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut report = MetricsReport::build(name, &results, &labels, &records, skipped, HISTOGRAM_BINS)?;
    report.failed_queries = failed;
    let rows = query_rows(&results, &labels, &records)?;
    Ok(Evaluation { report, rows, results })
}

fn eval(cli: &Cli, cfg: &RunConfigFile, queries: &Path, results: Option<&Path>, with_timings: bool) -> Result<()> {
    let format = report_format(cli, cfg.paths.report.as_deref())?;
    let catalog = catalog(cfg)?;
    let qs = load_queries(queries, &catalog)?;
    let engine = engine(cfg, cfg.pipeline.clone(), catalog)?;
    let name = format!("run@{}", cfg.pipeline.fingerprint());
    let ev = evaluate(&engine, &qs, &name)?;
    if let Some(path) = results {
        write_results_jsonl(&ev.results, path, with_timings)?;
    }
    if let Some(path) = &cfg.paths.report {
        shelfmatch_core::evaluation::emit_report(&ev.report, &ev.rows, path, format)?;
    }
    print_table(&[ev.report]);
    Ok(())
}

fn print_table(reports: &[MetricsReport]) {
    println!(
        "{:<20} {:>7} {:>7} {:>7} {:>7} {:>10} {:>10} {:>7}",
        "variant", "queries", "top1", "top5", "top35", "mean_ms", "p95_ms", "failed"
    );
    for r in reports {
        println!(
            "{:<20} {:>7} {:>7.4} {:>7.4} {:>7.4} {:>10.2} {:>10.2} {:>7}",
            r.config,
            r.n_queries,
            r.accuracy.top1,
            r.accuracy.top5,
            r.accuracy.top35,
            r.latency_ms.total.mean,
            r.latency_ms.total.p95,
            r.failed_queries
        );
    }
}

fn synth(cli: &Cli, spec: Option<&Path>, out: &Path) -> Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = generate_dataset(&spec, out)?;
    // A ready-to-use run configuration for the generated data.
    let run = RunConfigFile {
        pipeline: PipelineConfig {
            segmenter: SegmenterConfig::Threshold {
                plate: ds.plate_path.file_name().expect("plate file name").into(),
                threshold: 25,
                min_component: 100,
            },
            ..PipelineConfig::default()
        },
        paths: config::RunPaths {
            manifest: Some(ds.manifest_path.file_name().expect("manifest file name").into()),
            queries: Some(ds.queries_path.file_name().expect("queries file name").into()),
            ..Default::default()
        },
    };
    run.save(&out.join("run.json"))?;
    println!(
        "{} products, {} images, {} queries -> {}",
        ds.catalog.len(),
        ds.catalog.image_count(),
        ds.records.len(),
        out.display()
    );
    Ok(())
}

fn variant(base: &PipelineConfig, name: &str) -> Result<PipelineConfig> {
    let mut c = base.clone();
    let ratio = match &base.matcher {
        MatcherConfig::Reference { ratio } | MatcherConfig::RatioOnly { ratio } => *ratio,
        MatcherConfig::Remote => DEFAULT_RATIO,
    };
    match name {
        "full" => {}
        "no_stage1" => c.candidate_strategy = CandidateStrategy::ClassFilter,
        "no_segmentation" => c.segmentation_enabled = false,
        "exhaustive" => c.candidate_strategy = CandidateStrategy::None,
        "matcher=alt" | "matcher=ratio_only" => c.matcher = MatcherConfig::RatioOnly { ratio },
        "matcher=reference" => c.matcher = MatcherConfig::Reference { ratio },
        other => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
    }
    Ok(c)
}

fn ablate(cli: &Cli, cfg: &RunConfigFile, queries: &Path, names: &[String]) -> Result<()> {
    let format = report_format(cli, cfg.paths.report.as_deref())?;
    let configs = names
        .iter()
        .map(|n| variant(&cfg.pipeline, n))
        .collect::<Result<Vec<_>>>()?;
    let catalog = catalog(cfg)?;
    let qs = load_queries(queries, &catalog)?;
    let mut reports = Vec::new();
    for (name, pc) in names.iter().zip(configs) {
        let uses_cache = pc.gallery_fingerprint() == cfg.pipeline.gallery_fingerprint();
        let mut run_cfg = cfg.clone();
        if !uses_cache {
            run_cfg.paths.feature_cache = None;
        }
        let engine = engine(&run_cfg, pc, catalog.clone())?;
        reports.push(evaluate(&engine, &qs, name)?.report);
    }
    if let Some(path) = &cfg.paths.report {
        write_ablation(&reports, path, format)?;
    }
    print_table(&reports);
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationRow<'a> {
    variant: &'a str,
    n_queries: usize,
    top1: f64,
    top5: f64,
    top35: f64,
    mean_ms: f64,
    p50_ms: f64,
    p95_ms: f64,
    failed_queries: usize,
}

fn write_ablation(reports: &[MetricsReport], path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let json = serde_json::to_string_pretty(reports)?;
            std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in reports {
                w.serialize(AblationRow {
                    variant: &r.config,
                    n_queries: r.n_queries,
                    top1: r.accuracy.top1,
                    top5: r.accuracy.top5,
                    top35: r.accuracy.top35,
                    mean_ms: r.latency_ms.total.mean,
                    p50_ms: r.latency_ms.total.p50,
                    p95_ms: r.latency_ms.total.p95,
                    failed_queries: r.failed_queries,
                })?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}
