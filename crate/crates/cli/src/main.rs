use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use rscurate_core::caption::SelectMode;
use rscurate_core::config::PipelineConfig;
use rscurate_core::pipeline::{self, Layout, PipelineError, StageReport};
use rscurate_core::review::RatingSubmission;
use rscurate_core::store::BlobStore;

#[derive(Parser)]
#[command(name = "rscurate", version, about = "Curate remote-sensing image-text corpora")]
struct Cli {
    /// Pipeline config (TOML). Without it, defaults plus RSCURATE_* overrides apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Keyword prefilter over captions.
    Keywords {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// Keyword histogram CSV (keyword,count).
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Download images into a content-addressed store.
    Fetch {
        #[arg(long)]
        input: PathBuf,
        /// Blob store directory.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        concurrency: Option<usize>,
        #[arg(long)]
        per_host: Option<usize>,
        #[arg(long)]
        retries: Option<u32>,
        #[arg(long)]
        timeout_s: Option<f64>,
    },
    /// Image embeddings and detector probabilities for fetched records.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        blobs: Option<PathBuf>,
    },
    /// Near-duplicate removal.
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Joint CLIP-score and detector-probability filter.
    ScoreFilter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        scores_out: Option<PathBuf>,
        #[arg(long)]
        keep_s: Option<f64>,
        #[arg(long)]
        keep_c: Option<f64>,
        #[arg(long)]
        blobs: Option<PathBuf>,
    },
    /// Choose one caption per image from generated candidates.
    CaptionSelect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// rotation, rank1 or random
        #[arg(long)]
        mode: Option<SelectMode>,
        #[arg(long)]
        blobs: Option<PathBuf>,
    },
    /// Prepend metadata sentences to captions.
    MetaCaption {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
    },
    /// UTM zone histogram and caption place names.
    GeoReport {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
    },
    /// Write kept records as tar shards.
    Shard {
        #[arg(long)]
        input: PathBuf,
        /// Blob store with the images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shard_size: Option<usize>,
    },
    /// Retrieval and zero-shot metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the caption review API.
    ServeReview {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data: PathBuf,
        /// Static UI bundle; defaults to <data>/ui.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Every stage in order, as configured.
    RunAll,
    /// Talk to a running review service.
    #[command(subcommand)]
    Review(ReviewCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    Recall {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        /// CSV caption_id,image_id
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    Zsc {
        #[arg(long)]
        images: PathBuf,
        /// CSV image_id,class
        #[arg(long)]
        labels: PathBuf,
        /// TOML with classes and templates.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        blobs: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
}

#[derive(Subcommand)]
enum ReviewCommand {
    Next {
        #[command(flatten)]
        server: ServerArgs,
        #[arg(long)]
        annotator: String,
        #[arg(long)]
        subset: Option<String>,
    },
    Submit {
        #[command(flatten)]
        server: ServerArgs,
        #[arg(long)]
        annotator: String,
        #[arg(long)]
        record: String,
        #[arg(long)]
        relevance_detail: i64,
        #[arg(long)]
        hallucination: i64,
        #[arg(long)]
        fluency: i64,
    },
    Stats {
        #[command(flatten)]
        server: ServerArgs,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Service(#[from] rscurate_review_service::ServiceError),
    #[error(transparent)]
    Client(#[from] rscurate_client::ClientError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(e) => e.exit_code() as u8,
            CliError::Service(rscurate_review_service::ServiceError::Io { .. }) | CliError::Io(_) | CliError::Csv(_) => 2,
            CliError::Service(_) => 3,
            CliError::Client(rscurate_client::ClientError::Validation(_)) => 3,
            CliError::Client(_) => 4,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::from_env()?,
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

fn finish(config: &PipelineConfig) -> Result<(), PipelineError> {
    let problems = config.validate();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Validation(problems))
    }
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Io { path: path.into(), source: std::io::ErrorKind::NotFound.into() })
    }
}

fn print_report(report: &StageReport) {
    println!("{}", serde_json::to_string(report).expect("report serializes"));
}

fn store_for(config: &PipelineConfig, blobs: Option<&PathBuf>) -> BlobStore {
    match blobs {
        Some(b) => BlobStore::new(b),
        None => pipeline::blob_store(config, &Layout::new(config.paths.work_dir.clone().unwrap_or_else(|| "work".into()))),
    }
}

fn write_json(path: Option<&PathBuf>, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    match path {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Keywords { input, output, keywords, histogram } => {
            require(&input)?;
            let exempt = config.exempt();
            let r = pipeline::run_keywords(&pipeline::KeywordsArgs {
                input: &input,
                output: &output,
                keywords: keywords.as_deref().or(config.paths.keywords.as_deref()),
                histogram: histogram.as_deref(),
                exempt: &exempt,
            })?;
            print_report(&r);
        }
        Command::Fetch { input, out_dir, manifest, concurrency, per_host, retries, timeout_s } => {
            if let Some(n) = concurrency {
                config.fetch.global_concurrency = n;
            }
            if let Some(n) = per_host {
                config.fetch.per_host_concurrency = n;
            }
            if let Some(n) = retries {
                config.fetch.retries = n;
            }
            if let Some(t) = timeout_s {
                if !(t.is_finite() && t > 0.0) {
                    return Err(PipelineError::Validation(vec!["--timeout-s must be positive".into()]).into());
                }
                config.fetch.timeout = Duration::from_secs_f64(t);
            }
            finish(&config)?;
            require(&input)?;
            print_report(&pipeline::run_fetch_stage(&input, &manifest, &BlobStore::new(out_dir), &config)?);
        }
        Command::Embed { input, output, blobs } => {
            require(&input)?;
            let store = store_for(&config, blobs.as_ref());
            let provider = pipeline::make_provider(&config, &store)?;
            print_report(&pipeline::run_embed(&input, &output, provider.as_ref(), &config)?);
        }
        Command::Dedup { manifest, embeddings, output, k, threshold } => {
            if let Some(k) = k {
                config.dedup.k = k;
            }
            if let Some(t) = threshold {
                config.dedup.edge_threshold = t;
            }
            finish(&config)?;
            require(&manifest)?;
            print_report(&pipeline::run_dedup_stage(&manifest, &embeddings, &output, &config)?);
        }
        Command::ScoreFilter { input, embeddings, output, templates, scores_out, keep_s, keep_c, blobs } => {
            if let Some(v) = keep_s {
                config.filter.keep_fraction_s = v;
            }
            if let Some(v) = keep_c {
                config.filter.keep_fraction_c = v;
            }
            finish(&config)?;
            require(&input)?;
            let store = store_for(&config, blobs.as_ref());
            let provider = pipeline::make_provider(&config, &store)?;
            let templates = templates.or(config.paths.templates.clone());
            let r = pipeline::run_score_filter(
                &pipeline::ScoreArgs {
                    input: &input,
                    embeddings: &embeddings,
                    output: &output,
                    scores_csv: scores_out.as_deref(),
                    templates: templates.as_deref(),
                },
                provider.as_ref(),
                &config,
            )?;
            print_report(&r);
        }
        Command::CaptionSelect { input, candidates, output, mode, blobs } => {
            if let Some(m) = mode {
                config.caption.mode = m;
            }
            require(&input)?;
            require(&candidates)?;
            let store = store_for(&config, blobs.as_ref());
            let provider = pipeline::make_provider(&config, &store)?;
            print_report(&pipeline::run_caption_select(&input, &candidates, &output, provider.as_ref(), &config)?);
        }
        Command::MetaCaption { input, output, templates, gazetteer } => {
            require(&input)?;
            let templates = templates.or(config.paths.meta_templates.clone());
            let gazetteer = gazetteer.or(config.paths.gazetteer.clone());
            print_report(&pipeline::run_meta_caption(&input, &output, templates.as_deref(), gazetteer.as_deref())?);
        }
        Command::GeoReport { input, out, csv, gazetteer } => {
            require(&input)?;
            let gazetteer = gazetteer.or(config.paths.gazetteer.clone());
            print_report(&pipeline::run_geo_report(&input, &out, csv.as_deref(), gazetteer.as_deref())?);
        }
        Command::Shard { input, images, out, shard_size } => {
            if let Some(n) = shard_size {
                config.shard.max_samples_per_shard = n;
            }
            finish(&config)?;
            require(&input)?;
            let (r, warnings) = pipeline::run_shard(&input, &BlobStore::new(images), &out, &config)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            print_report(&r);
        }
        Command::Eval(EvalCommand::Recall { images, texts, truth, k, out, csv }) => {
            for p in [&images, &texts, &truth] {
                require(p)?;
            }
            let report = pipeline::eval_recall(&images, &texts, &truth, &k)?;
            if let Some(c) = &csv {
                let mut w = csv::Writer::from_path(c)?;
                w.write_record(["direction", "k", "recall"])?;
                for (dir, m) in [("i2t", &report.i2t), ("t2i", &report.t2i)] {
                    for (k, v) in m {
                        w.write_record([dir, &k.to_string(), &format!("{v}")])?;
                    }
                }
                w.write_record(["mean", "", &format!("{}", report.mean_recall)])?;
                w.flush()?;
            }
            write_json(out.as_ref(), &report)?;
        }
        Command::Eval(EvalCommand::Zsc { images, labels, prompts, out, blobs }) => {
            for p in [&images, &labels, &prompts] {
                require(p)?;
            }
            let store = store_for(&config, blobs.as_ref());
            let provider = pipeline::make_provider(&config, &store)?;
            let report = pipeline::eval_zsc(&images, &labels, &prompts, provider.as_ref())?;
            write_json(out.as_ref(), &report)?;
        }
        Command::ServeReview { port, data, static_dir, bind } => {
            let mut sc = rscurate_review_service::ServiceConfig::new(data, config.seed);
            sc.static_dir = static_dir;
            let state = std::sync::Arc::new(rscurate_review_service::AppState::open(&sc)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((bind.as_str(), port)).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                rscurate_review_service::serve(state, listener, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
        }
        Command::RunAll => {
            let summary = pipeline::run_all(&config)?;
            for r in &summary.reports {
                print_report(r);
            }
        }
        Command::Review(cmd) => review(cmd)?,
    }
    Ok(())
}

fn review(cmd: ReviewCommand) -> Result<(), CliError> {
    use rscurate_client::ReviewClient;
    match cmd {
        ReviewCommand::Next { server, annotator, subset } => {
            match ReviewClient::new(&server.url)?.next(&annotator, subset.as_deref())? {
                Some(s) => write_json(None, &s)?,
                None => eprintln!("nothing left to review"),
            }
        }
        ReviewCommand::Submit { server, annotator, record, relevance_detail, hallucination, fluency } => {
            let seq = ReviewClient::new(&server.url)?.submit(&RatingSubmission {
                annotator_id: Some(annotator),
                record_id: Some(record),
                relevance_detail: Some(relevance_detail),
                hallucination: Some(hallucination),
                fluency: Some(fluency),
                submitted_at: None,
            })?;
            println!("{{\"seq\":{seq}}}");
        }
        ReviewCommand::Stats { server } => write_json(None, &ReviewClient::new(&server.url)?.stats()?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RSCURATE_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
