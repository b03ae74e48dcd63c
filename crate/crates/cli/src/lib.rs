//! `vgsi` command line. Structured results go to stdout as JSON (or a text
//! table where noted), logs to stderr.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vgsi_core::aggregator::{AggregatingScorer, AggregationConfig, ReferenceIndex, AGG_TAG};
use vgsi_core::corpus::{load_corpus, split_by_goal, write_corpus, Corpus, DatasetSplit, PromptLevel, SplitPart};
use vgsi_core::embed_store::{read_embeddings, write_embeddings, EmbeddingMatrix};
use vgsi_core::evaluator::{build_retrieval_pool, evaluate_mc, evaluate_retrieval, Embeddings, EvalReport, RandomScorer};
use vgsi_core::keyframes::{assemble_sequences, convert_videos, read_video_records, ConversionMode, Metric};
use vgsi_core::models::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use vgsi_core::models::{MatchScorer, ModelKind, OptimizerKind};
use vgsi_core::sampler::{build_index, read_questions, write_questions, QuestionSampler, Strategy};
use vgsi_core::synth::{generate_synthetic, SynthSpec};
use vgsi_core::trainer::{fine_tune, train, TrainConfig, TrainOutcome};
use vgsi_core::transfer::{format_curve, prepare_transfer, run_learning_curve, TransferMode, TransferProtocol, DEFAULT_BUDGETS};

pub mod quiz;

#[derive(Parser, Debug)]
#[command(name = "vgsi", version, about = "Visual goal-step inference engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a corpus, print its statistics and optionally write a split.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus with planted structure.
    Synth(SynthArgs),
    /// Build the image nearest-neighbor index and optionally query it.
    Index(IndexArgs),
    /// Sample multiple-choice questions.
    Sample(SampleArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint.
    Finetune(FinetuneArgs),
    /// Multiple-choice accuracy.
    EvalMc(EvalMcArgs),
    /// Goal-to-image retrieval metrics.
    EvalRetrieval(EvalRetrievalArgs),
    /// Convert video frame features into a corpus.
    Keyframes(KeyframesArgs),
    /// Zero-shot and K-shot learning curve on a target corpus.
    Transfer(TransferArgs),
    /// Human multiple-choice quiz.
    Quiz(QuizArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Check that every image has an embedding.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the split.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub dim_image: usize,
    #[arg(long, default_value_t = 32)]
    pub dim_text: usize,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 1.0)]
    pub group_spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fresh noise around the same cluster centers.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long, default_value = "")]
    pub id_prefix: String,
    /// Output directory for corpus.jsonl, images.vgse and texts.vgse.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Image id to query with; its own article is excluded.
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct SplitSelection {
    /// Split file written by `ingest`; without it all articles are used.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    pub part: SplitPart,
}

impl SplitSelection {
    fn article_ids(&self, corpus: &Corpus) -> anyhow::Result<Vec<String>> {
        match &self.split {
            Some(path) => Ok(read_split(path)?.part(self.part)),
            None => Ok(corpus.articles().iter().map(|a| a.article_id.clone()).collect()),
        }
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[command(flatten)]
    pub selection: SplitSelection,
    #[arg(long, default_value = "random")]
    pub strategy: Strategy,
    #[arg(long, default_value = "goal")]
    pub prompt_level: PromptLevel,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Question sets drawn with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbeddingArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
}

impl EmbeddingArgs {
    fn load(&self) -> anyhow::Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        Ok((read_embeddings(&self.images)?, read_embeddings(&self.texts)?))
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainOptions {
    #[arg(long, default_value = "triplet")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 1024)]
    pub joint_dim: usize,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainOptions {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            margin: self.margin,
            joint_dim: self.joint_dim,
            optimizer: self.optimizer,
            learning_rate: self.lr,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[command(flatten)]
    pub options: TrainOptions,
    /// Checkpoint path; the run report goes next to it as `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct ScorerArgs {
    #[arg(long, required_unless_present = "random_baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Score with the uniform random baseline instead of a model.
    #[arg(long)]
    pub random_baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalMcArgs {
    #[arg(long)]
    pub questions: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Blend in the steps of the nearest reference article.
    #[arg(long, requires = "corpus")]
    pub aggregate: bool,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub neighbors: usize,
    /// Reference corpus for --aggregate.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub reference: SplitSelection,
    /// Print a table row instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[command(flatten)]
    pub selection: SplitSelection,
    #[arg(long, default_value_t = 100)]
    pub goals: usize,
    #[arg(long, default_value_t = 10)]
    pub per_goal: usize,
    /// Recall cut-offs; defaults depend on the pool size.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug)]
pub struct KeyframesArgs {
    /// Frame features with ids `videoid#frameindex`.
    #[arg(long)]
    pub frames: PathBuf,
    /// Video records, one JSON object per line.
    #[arg(long)]
    pub videos: PathBuf,
    /// `kmeans` or `segments`.
    #[arg(long, default_value = "kmeans")]
    pub mode: String,
    #[arg(long)]
    pub k: Option<usize>,
    /// Upper bound on keyframes per video.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long, default_value = "euclidean")]
    pub metric: Metric,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for corpus.jsonl and images.vgse.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Target corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub embeddings: EmbeddingArgs,
    /// Pretrained checkpoint; without it each budget trains from scratch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "seen")]
    pub mode: TransferMode,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS)]
    pub budgets: Vec<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    #[arg(long, default_value = "goal")]
    pub prompt_level: PromptLevel,
    #[command(flatten)]
    pub options: TrainOptions,
    /// Write the rows as JSON here; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuizArgs {
    #[arg(long, required_unless_present = "average")]
    pub questions: Option<PathBuf>,
    #[arg(long, default_value_t = quiz::DEFAULT_QUESTIONS)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scripted answers, one per line; stdin otherwise.
    #[arg(long)]
    pub answers: Option<PathBuf>,
    /// Prefix shown before image ids.
    #[arg(long)]
    pub image_root: Option<String>,
    /// Where to save the session.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Average the accuracies of saved sessions instead of quizzing.
    #[arg(long, num_args = 1.., conflicts_with = "questions")]
    pub average: Vec<PathBuf>,
}

fn read_split(path: &Path) -> anyhow::Result<DatasetSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| vgsi_core::Error::io(path, e))?;
    serde_json::from_str(&text).with_context(|| format!("parsing split {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| vgsi_core::Error::io(path, e))?;
    Ok(())
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| vgsi_core::Error::io(path, e))?;
    Ok(())
}

fn ingest(args: &IngestArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    if let Some(path) = &args.images {
        QuestionSampler::new(&corpus, &read_embeddings(path)?)?;
    }
    let [train, val, test] = args.ratios[..] else {
        bail!("--ratios takes three comma-separated fractions, got {}", args.ratios.len());
    };
    let ratios = [train, val, test];
    let split = split_by_goal(&corpus, ratios, args.seed)?;
    if let Some(path) = &args.out {
        write_json(&split, path)?;
    }
    print_json(
        out,
        &serde_json::json!({
            "stats": corpus.stats(),
            "split": { "train": split.train.len(), "val": split.val.len(), "test": split.test.len(), "seed": split.seed },
        }),
    )
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let spec = SynthSpec {
        clusters: args.clusters,
        dim_image: args.dim_image,
        dim_text: args.dim_text,
        noise_scale: args.noise,
        seed: args.seed,
        steps_per_article: args.steps,
        groups: args.groups,
        group_spread: args.group_spread,
        noise_seed: args.noise_seed,
        id_prefix: args.id_prefix.clone(),
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    write_corpus(&data.corpus, args.out.join("corpus.jsonl"))?;
    write_embeddings(&data.images, args.out.join("images.vgse"))?;
    write_embeddings(&data.texts, args.out.join("texts.vgse"))?;
    print_json(out, &serde_json::json!({ "spec": spec, "stats": data.corpus.stats().total }))
}

fn index(args: &IndexArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let images = read_embeddings(&args.images)?;
    let idx = build_index(&images, &corpus)?;
    let mut report = serde_json::json!({ "images": idx.len(), "dim": images.dim() });
    if let Some(q) = &args.query {
        let loc = corpus.locate_image(q).ok_or_else(|| vgsi_core::Error::UnknownId(q.clone()))?;
        let hits = idx.query(images.require(q)?, args.k, &[loc.article].into_iter().collect())?;
        report["neighbors"] = hits
            .iter()
            .map(|h| serde_json::json!({ "image_id": h.image_id, "article_id": corpus.articles()[h.article].article_id, "similarity": h.similarity }))
            .collect();
    }
    print_json(out, &report)
}

fn sample(args: &SampleArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let images = read_embeddings(&args.images)?;
    let ids = args.selection.article_ids(&corpus)?;
    let sampler = QuestionSampler::new(&corpus, &images)?;
    let mut questions = Vec::new();
    let mut skipped = Vec::new();
    for r in 0..args.repeats.max(1) {
        let set = sampler.make_question_set(&ids, args.strategy, args.prompt_level, args.seed + r)?;
        questions.extend(set.questions);
        skipped.extend(set.skipped);
    }
    write_questions(&questions, &args.out)?;
    print_json(
        out,
        &serde_json::json!({ "questions": questions.len(), "skipped": skipped, "articles": ids.len(), "strategy": args.strategy }),
    )
}

fn finish_training(outcome: &TrainOutcome, config: &TrainConfig, path: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    write_checkpoint(&outcome.checkpoint, path)?;
    let report = outcome.report(config);
    let mut report_path = path.as_os_str().to_owned();
    report_path.push(".report.json");
    write_json(&report, Path::new(&report_path))?;
    print_json(out, &report)
}

fn load_training(args: &TrainArgs) -> anyhow::Result<(Vec<vgsi_core::sampler::MCQuestion>, Vec<vgsi_core::sampler::MCQuestion>, EmbeddingMatrix, EmbeddingMatrix)> {
    let questions = read_questions(&args.questions)?;
    let val = match &args.val {
        Some(p) => read_questions(p)?,
        None => Vec::new(),
    };
    let (images, texts) = args.embeddings.load()?;
    Ok((questions, val, images, texts))
}

fn train_cmd(args: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (questions, val, images, texts) = load_training(args)?;
    let config = args.options.config();
    let outcome = train(&config, &questions, &val, Embeddings { images: &images, texts: &texts })?;
    finish_training(&outcome, &config, &args.out, out)
}

fn finetune_cmd(args: &FinetuneArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let (questions, val, images, texts) = load_training(&args.train)?;
    let mut config = args.train.options.config();
    config.joint_dim = checkpoint.params.dims().joint;
    let outcome = fine_tune(&checkpoint, &config, &questions, &val, Embeddings { images: &images, texts: &texts })?;
    finish_training(&outcome, &config, &args.train.out, out)
}

enum Scorer {
    Model(Checkpoint),
    Random(RandomScorer),
}

impl Scorer {
    fn load(args: &ScorerArgs) -> anyhow::Result<Self> {
        match (&args.checkpoint, args.random_baseline) {
            (_, true) => Ok(Scorer::Random(RandomScorer { seed: args.seed })),
            (Some(path), false) => Ok(Scorer::Model(read_checkpoint(path)?)),
            (None, false) => bail!("--checkpoint or --random-baseline is required"),
        }
    }

    fn as_dyn(&self) -> &dyn MatchScorer {
        match self {
            Scorer::Model(c) => &c.params,
            Scorer::Random(r) => r,
        }
    }

    fn label(&self) -> String {
        match self {
            Scorer::Model(c) => c.params.kind().to_string(),
            Scorer::Random(_) => "random".into(),
        }
    }
}

fn emit_report(report: &EvalReport, table: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    if table {
        let label = match (&report.model, &report.tag) {
            (Some(m), Some(t)) => format!("{m} ({t})"),
            (Some(m), None) => m.clone(),
            _ => "model".into(),
        };
        match report.task {
            vgsi_core::evaluator::TaskKind::Mc => write!(out, "{}", report.mc_table(&label))?,
            vgsi_core::evaluator::TaskKind::Retrieval => write!(out, "{}", report.retrieval_table(&label))?,
        }
        Ok(())
    } else {
        print_json(out, report)
    }
}

fn eval_mc(args: &EvalMcArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let questions = read_questions(&args.questions)?;
    let (images, texts) = args.embeddings.load()?;
    let emb = Embeddings { images: &images, texts: &texts };
    let scorer = Scorer::load(&args.scorer)?;
    let mut report = if args.aggregate {
        let corpus = load_corpus(args.corpus.as_ref().expect("clap enforces --corpus"))?;
        let ids = args.reference.article_ids(&corpus)?;
        let index = ReferenceIndex::build(&corpus, &ids, &texts)?;
        let config = AggregationConfig { lambda: args.lambda, neighbors: args.neighbors };
        let agg = AggregatingScorer::new(scorer.as_dyn(), index, config)?;
        let mut r = evaluate_mc(&agg, &questions, emb)?;
        r.tag = Some(AGG_TAG.into());
        r
    } else {
        evaluate_mc(scorer.as_dyn(), &questions, emb)?
    };
    report.model = Some(scorer.label());
    report.seed = Some(args.scorer.seed);
    emit_report(&report, args.table, out)
}

fn eval_retrieval(args: &EvalRetrievalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let (images, texts) = args.embeddings.load()?;
    let ids = args.selection.article_ids(&corpus)?;
    let pool = build_retrieval_pool(&corpus, &ids, args.goals, args.per_goal, args.scorer.seed)?;
    let ks = if args.ks.is_empty() { pool.default_ks() } else { args.ks.clone() };
    let scorer = Scorer::load(&args.scorer)?;
    let mut report = evaluate_retrieval(scorer.as_dyn(), &pool, Embeddings { images: &images, texts: &texts }, &ks)?;
    report.model = Some(scorer.label());
    report.seed = Some(args.scorer.seed);
    emit_report(&report, args.table, out)
}

fn keyframes(args: &KeyframesArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let frames = read_embeddings(&args.frames)?;
    let records = read_video_records(&args.videos)?;
    let videos = assemble_sequences(&records, &frames)?;
    let mode = match args.mode.as_str() {
        "kmeans" => ConversionMode::KMeans { k: args.k, cap: args.cap, metric: args.metric },
        "segments" => ConversionMode::Segments,
        other => bail!("unknown keyframe mode {other:?} (kmeans or segments)"),
    };
    let (corpus, images) = convert_videos(&videos, mode, args.seed)?;
    create_dir(&args.out)?;
    write_corpus(&corpus, args.out.join("corpus.jsonl"))?;
    write_embeddings(&images, args.out.join("images.vgse"))?;
    print_json(out, &serde_json::json!({ "videos": videos.len(), "stats": corpus.stats().total }))
}

fn transfer(args: &TransferArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let (images, texts) = args.embeddings.load()?;
    let checkpoint = args.checkpoint.as_ref().map(read_checkpoint).transpose()?;
    let protocol = TransferProtocol {
        mode: args.mode,
        budgets: args.budgets.clone(),
        train_ratio: args.ratio,
        seed: args.options.seed,
        level: args.prompt_level,
        ..TransferProtocol::new(args.mode, args.options.seed)
    };
    let mut config = args.options.config();
    if let Some(c) = &checkpoint {
        config.model = c.params.kind();
        config.joint_dim = c.params.dims().joint;
    }
    let data = prepare_transfer(&corpus, &images, &protocol)?;
    let rows = run_learning_curve(checkpoint.as_ref(), &protocol, &config, &data, Embeddings { images: &images, texts: &texts })?;
    if let Some(path) = &args.out {
        write_json(&rows, path)?;
    }
    write!(out, "{}", format_curve(&rows))?;
    Ok(())
}

fn quiz_cmd(args: &QuizArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    if !args.average.is_empty() {
        let sessions = args
            .average
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| vgsi_core::Error::io(p, e))?;
                Ok(serde_json::from_str::<quiz::QuizSession>(&text)?)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        return print_json(out, &serde_json::json!({ "sessions": sessions.len(), "accuracy": quiz::average_accuracy(&sessions) }));
    }
    let questions = read_questions(args.questions.as_ref().expect("clap enforces --questions"))?;
    let items = quiz::prepare(&questions, args.n, args.seed);
    let session = match &args.answers {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| vgsi_core::Error::io(path, e))?;
            quiz::run_session(items, args.seed, args.image_root.as_deref(), &mut std::io::BufReader::new(file), &mut std::io::sink())?
        }
        None => quiz::run_session(items, args.seed, args.image_root.as_deref(), input, &mut *out)?,
    };
    if let Some(path) = &args.out {
        write_json(&session, path)?;
    }
    print_json(
        out,
        &serde_json::json!({ "questions": session.items.len(), "answered": session.answers.len(), "accuracy": session.accuracy }),
    )
}

pub fn execute(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Index(a) => index(a, out),
        Command::Sample(a) => sample(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Finetune(a) => finetune_cmd(a, out),
        Command::EvalMc(a) => eval_mc(a, out),
        Command::EvalRetrieval(a) => eval_retrieval(a, out),
        Command::Keyframes(a) => keyframes(a, out),
        Command::Transfer(a) => transfer(a, out),
        Command::Quiz(a) => quiz_cmd(a, input, out),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Errors are reported on stderr.
pub fn run_with<I, T>(argv: I, input: &mut dyn BufRead, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, input, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut out = std::io::stdout().lock();
    run_with(argv, &mut input, &mut out)
}
