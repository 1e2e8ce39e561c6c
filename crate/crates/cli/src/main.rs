mod config;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use codelkt::adaptation::{dapt, load_corpus, tapt};
use codelkt::data::{load_csedm_csv, load_jsonl, save_dataset, split_kfold, CsvMapping, DatasetFormat, InteractionLog};
use codelkt::dkt::DktModel;
use codelkt::encoder::{load_encoder_dir, save_encoder, TextEncoder, ToyConfig, ToyEncoder};
use codelkt::encoding::SpecialTokens;
use codelkt::enrich::{enrich_log, EnrichOptions, EnrichmentCache, EnrichmentTemplates};
use codelkt::evaluation::{render_csv, render_markdown, MetricReport};
use codelkt::feedback::{build_prompt, generate_feedback, parse_feedback, Comparison, FeedbackTemplates, LearnerContext, Mode};
use codelkt::harness::{run_dkt, run_lkt, RunSummary};
use codelkt::llm::{HttpLlmClient, LlmClient, LlmClientConfig, StubLlm};
use codelkt::model::{KtModel, Pooling};
use codelkt::service::{DktPredictor, LktPredictor, ProblemBank, Service, ServiceConfig};

use config::FileConfig;

/// Language-model knowledge tracing and feedback for programming exercises.
#[derive(Debug, Parser)]
#[command(name = "codelkt", version)]
struct Cli {
    /// Seed for every randomized step; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter, e.g. `info` or `codelkt=debug`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// TOML or JSON settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a raw export into canonical JSONL.
    Ingest(IngestArgs),
    /// Generate missing question texts and KC labels with an LLM.
    Enrich(EnrichArgs),
    /// Cross-validate the language-model tracer.
    Train(TrainArgs),
    /// Adapt an encoder by masked-token pretraining or source-task fine-tuning.
    Adapt(AdaptArgs),
    /// Cross-validate the recurrent baseline.
    BaselineDkt(DktArgs),
    /// Tabulate saved runs.
    Evaluate(EvaluateArgs),
    /// Build a feedback prompt and optionally send it.
    Feedback(FeedbackArgs),
    /// Run the tutoring HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    /// Column mapping for CSV input (.json or .yaml).
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnrichArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory with question.txt, question_reprompt.txt and kc.txt.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Generation cache directory; defaults to `<out>.cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// `http` or `stub:<fixture-dir>`.
    #[arg(long, default_value = "http")]
    llm: String,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Fraction of each fold's training students held out for early stopping.
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Dataset name used in reports; defaults to the data file stem.
    #[arg(long)]
    dataset_tag: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `toy` or a directory written by `adapt`.
    #[arg(long, default_value = "toy")]
    encoder: String,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    accumulation_steps: Option<usize>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    freeze_encoder: bool,
    /// Model name used in reports; defaults to `LKT (<encoder provenance>)`.
    #[arg(long)]
    model_tag: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mask,
    Cls,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AdaptMode {
    Dapt,
    Tapt,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long, value_enum)]
    mode: AdaptMode,
    /// `toy` or an encoder directory.
    #[arg(long, default_value = "toy")]
    base: String,
    /// JSONL of {text, source_tag} documents (dapt).
    #[arg(long, required_if_eq("mode", "dapt"))]
    corpus: Option<PathBuf>,
    /// Interaction log of the source task (tapt).
    #[arg(long, required_if_eq("mode", "tapt"))]
    source_data: Option<PathBuf>,
    /// Name recorded in the encoder provenance (tapt).
    #[arg(long)]
    source_name: Option<String>,
    /// Masked-token pretraining epochs (at most 3).
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DktArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long, default_value = "DKT")]
    model_tag: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run directories written by `train` or `baseline-dkt`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Markdown table destination.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print the reports as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct FeedbackArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long, default_value = "c1")]
    comparison: Comparison,
    /// JSON file holding a learner context.
    #[arg(long)]
    context: PathBuf,
    /// Template directory laid out as `{correctness,hint}/{c1,c2,c3}.txt`.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Print the prompt without calling the LLM.
    #[arg(long)]
    dry_run: bool,
    /// `http` or `stub:<fixture-dir>`.
    #[arg(long, default_value = "http")]
    llm: String,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    /// Problem bank JSON; overrides the config file.
    #[arg(long)]
    problems: Option<PathBuf>,
    /// Session store directory; overrides the config file.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// `http` or `stub:<fixture-dir>`.
    #[arg(long, default_value = "http")]
    llm: String,
}

fn make_llm(spec: &str, config: &LlmClientConfig) -> Result<Box<dyn LlmClient>> {
    if let Some(dir) = spec.strip_prefix("stub:") {
        return Ok(Box::new(StubLlm::from_dir(Path::new(dir))?));
    }
    if spec != "http" {
        bail!("--llm must be `http` or `stub:<dir>`, got `{spec}`");
    }
    Ok(Box::new(HttpLlmClient::new(config.clone())?))
}

fn load_log(path: &Path) -> Result<InteractionLog> {
    load_jsonl(path).with_context(|| format!("loading {}", path.display()))
}

fn dataset_tag(split: &SplitArgs, data: &Path) -> String {
    split
        .dataset_tag
        .clone()
        .unwrap_or_else(|| data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into()))
}

fn base_encoder(spec: &str, toy: &ToyConfig) -> Result<Box<dyn TextEncoder>> {
    let mut enc: Box<dyn TextEncoder> = if spec == ToyEncoder::KIND {
        Box::new(ToyEncoder::new(toy.clone())?)
    } else {
        load_encoder_dir(Path::new(spec))?
    };
    enc.add_special_tokens(&[SpecialTokens::CORRECT, SpecialTokens::INCORRECT]);
    Ok(enc)
}

struct Ctx {
    seed: Option<u64>,
    file: FileConfig,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.or(self.file.seed).unwrap_or(0)
    }

    fn toy(&self) -> ToyConfig {
        ToyConfig { seed: self.seed(), ..self.file.toy.clone() }
    }
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let log = match args.format {
        Format::Jsonl => codelkt::data::load_dataset(&args.input, DatasetFormat::CanonicalJsonl)?,
        Format::Csv => {
            let mapping = match &args.mapping {
                Some(p) => CsvMapping::from_file(p)?,
                None => CsvMapping::default(),
            };
            load_csedm_csv(&args.input, &mapping)?
        }
    };
    save_dataset(&log, &args.out)?;
    println!("{} interactions from {} students -> {}", log.num_interactions(), log.num_students(), args.out.display());
    Ok(())
}

fn enrich(ctx: &Ctx, args: &EnrichArgs) -> Result<()> {
    let log = load_log(&args.input)?;
    let templates = match &args.templates {
        Some(dir) => EnrichmentTemplates::from_dir(dir)?,
        None => EnrichmentTemplates::default(),
    };
    let config = ctx.file.enrich_llm()?;
    let client = make_llm(&args.llm, &config)?;
    let cache_dir = args.cache.clone().unwrap_or_else(|| args.out.with_extension("cache"));
    let cache = EnrichmentCache::open(cache_dir)?;
    let options = EnrichOptions {
        max_in_flight: args.max_in_flight,
        checkpoint: Some(args.out.with_extension("checkpoint.json")),
    };
    let enriched = enrich_log(&log, &templates, client.as_ref(), &config, &cache, &options)?;
    save_dataset(&enriched, &args.out)?;
    println!("enriched {} interactions -> {}", enriched.num_interactions(), args.out.display());
    Ok(())
}

fn train(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let log = load_log(&args.data)?;
    let mut config = ctx.file.train.clone();
    config.seed = ctx.seed();
    config.max_epochs = args.max_epochs.unwrap_or(config.max_epochs);
    config.early_stop_patience = args.patience.unwrap_or(config.early_stop_patience);
    config.learning_rate = args.learning_rate.unwrap_or(config.learning_rate);
    config.per_step_batch_size = args.batch_size.unwrap_or(config.per_step_batch_size);
    config.accumulation_steps = args.accumulation_steps.unwrap_or(config.accumulation_steps);
    config.token_budget = args.token_budget.unwrap_or(config.token_budget);
    config.freeze_encoder |= args.freeze_encoder;
    if let Some(p) = args.pooling {
        config.pooling = match p {
            PoolingArg::Mask => Pooling::Mask,
            PoolingArg::Cls => Pooling::Cls,
        };
    }
    let base = base_encoder(&args.encoder, &ctx.toy())?;
    let model_tag = args.model_tag.clone().unwrap_or_else(|| format!("LKT ({})", base.provenance()));
    let folds = split_kfold(&log, args.split.folds, ctx.seed(), args.split.validation_fraction)?;
    let factory = || base.clone_box();
    let (summary, trained) = run_lkt(&log, &folds, &factory, &config, &model_tag, &dataset_tag(&args.split, &args.data))?;
    for t in &trained {
        t.save(&args.out.join(format!("fold_{}", t.fold_index)), &config)?;
    }
    summary.save(&args.out)?;
    println!("{}", render_markdown(std::slice::from_ref(&summary.report)));
    Ok(())
}

fn adapt(ctx: &Ctx, args: &AdaptArgs) -> Result<()> {
    let base = base_encoder(&args.base, &ctx.toy())?;
    let report = match args.mode {
        AdaptMode::Dapt => {
            let corpus = load_corpus(args.corpus.as_deref().ok_or_else(|| anyhow!("--corpus is required"))?)?;
            let config = codelkt::adaptation::DaptConfig { seed: ctx.seed(), ..ctx.file.dapt.clone() };
            let (enc, report) = dapt(base.as_ref(), &corpus, args.epochs, &config)?;
            save_encoder(enc.as_ref(), &args.out)?;
            serde_json::to_value(report)?
        }
        AdaptMode::Tapt => {
            let path = args.source_data.as_deref().ok_or_else(|| anyhow!("--source-data is required"))?;
            let log = load_log(path)?;
            let name = args.source_name.clone().unwrap_or_else(|| {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "source".into())
            });
            let mut config = ctx.file.train.clone();
            config.seed = ctx.seed();
            config.max_epochs = args.max_epochs.unwrap_or(config.max_epochs);
            let (enc, history) = tapt(base.as_ref(), &log, &name, &config)?;
            save_encoder(enc.as_ref(), &args.out)?;
            serde_json::to_value(history)?
        }
    };
    fs::write(args.out.join("adapt_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("adapted encoder -> {}", args.out.display());
    Ok(())
}

fn baseline_dkt(ctx: &Ctx, args: &DktArgs) -> Result<()> {
    let log = load_log(&args.data)?;
    let mut config = ctx.file.dkt.clone();
    config.seed = ctx.seed();
    config.hidden_size = args.hidden_size.unwrap_or(config.hidden_size);
    config.max_epochs = args.max_epochs.unwrap_or(config.max_epochs);
    let folds = split_kfold(&log, args.split.folds, ctx.seed(), args.split.validation_fraction)?;
    let tag = dataset_tag(&args.split, &args.data);
    let (summary, models) = run_dkt(&log, &folds, &config, &args.model_tag, &tag)?;
    for (i, model) in models.iter().enumerate() {
        let dir = args.out.join(format!("fold_{i}"));
        fs::create_dir_all(&dir)?;
        model.save(&dir.join("dkt.json"))?;
    }
    summary.save(&args.out)?;
    println!("{}", render_markdown(std::slice::from_ref(&summary.report)));
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let reports: Vec<MetricReport> = args
        .runs
        .iter()
        .map(|dir| RunSummary::load(dir).map(|r| r.report).with_context(|| format!("loading run {}", dir.display())))
        .collect::<Result<_>>()?;
    let table = render_markdown(&reports);
    if let Some(out) = &args.out {
        fs::write(out, &table)?;
    }
    if let Some(csv) = &args.csv {
        fs::write(csv, render_csv(&reports))?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        print!("{table}");
    }
    Ok(())
}

fn feedback(ctx: &Ctx, args: &FeedbackArgs) -> Result<()> {
    let text = fs::read_to_string(&args.context).with_context(|| format!("reading {}", args.context.display()))?;
    let learner: LearnerContext = serde_json::from_str(&text).context("parsing learner context")?;
    let templates = match &args.templates {
        Some(dir) => FeedbackTemplates::from_dir(dir)?,
        None => FeedbackTemplates::default(),
    };
    let prompt = build_prompt(args.mode, &learner, args.comparison, &templates)?;
    if args.dry_run {
        print!("{prompt}");
        return Ok(());
    }
    let config = ctx.file.feedback_llm()?;
    let client = make_llm(&args.llm, &config)?;
    let exchange = generate_feedback(&prompt, client.as_ref(), &config)?;
    let mut bundle = parse_feedback(&exchange.response, args.mode, learner.correctness)?;
    bundle.comparison = Some(args.comparison);
    println!("{}", serde_json::to_string_pretty(&bundle)?);
    Ok(())
}

fn serve(ctx: &Ctx, args: &ServeArgs) -> Result<()> {
    let s = &ctx.file.serve;
    let bank_path = args
        .problems
        .clone()
        .or_else(|| s.problem_bank.clone())
        .ok_or_else(|| anyhow!("no problem bank: pass --problems or set serve.problem_bank"))?;
    let bank = ProblemBank::from_file(&bank_path)?;
    let llm_config = ctx.file.feedback_llm()?;
    let llm = make_llm(&args.llm, &llm_config)?;
    let mut builder = Service::builder(bank, llm).config(ServiceConfig {
        comparison: s.comparison,
        snapshot_every: s.snapshot_every,
        llm: llm_config,
    });
    if let Some(dir) = &s.templates {
        builder = builder.templates(FeedbackTemplates::from_dir(dir)?);
    }
    if let Some(dir) = &s.lkt_model {
        let model = KtModel::load(dir).with_context(|| format!("loading tracer {}", dir.display()))?;
        builder = builder.predictor(Box::new(LktPredictor(model)));
    }
    if let Some(path) = &s.dkt_model {
        let model = DktModel::load(path).with_context(|| format!("loading baseline {}", path.display()))?;
        builder = builder.baseline(Box::new(DktPredictor(model)));
    }
    let data_dir = args.data_dir.clone().unwrap_or_else(|| s.data_dir.clone());
    let service = Arc::new(builder.open(&data_dir)?);
    let addr: SocketAddr = format!("{}:{}", s.host, args.port.unwrap_or(s.port))
        .parse()
        .context("invalid serve.host")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(codelkt_server::serve(service, s.static_dir.clone(), addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx { seed: cli.seed, file };
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Enrich(a) => enrich(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Adapt(a) => adapt(&ctx, a),
        Command::BaselineDkt(a) => baseline_dkt(&ctx, a),
        Command::Evaluate(a) => evaluate(a),
        Command::Feedback(a) => feedback(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| "info".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
