//! Command-line front-end. Every stage reads files and writes files, so a
//! whole experiment is a shell script of `kslt` invocations.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a data or validation
//! error. Diagnostics go to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kslt_core::formats;
use kslt_core::selection::attach_frequencies;
use kslt_core::{
    alpha_sweep, analyze_pair, count_frequencies, emit_mask, emit_prediction_log, evaluate,
    generate_task, get_embedding, import_csv_matrix, init_model, read_checkpoint, select_by_alpha,
    select_top_k, splice_partial_transfer, train, validate_pair, write_checkpoint, Method,
    ProbSource, SyntheticTask, ToyModel, TrainConfig, TrainMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "kslt",
    version,
    about = "Per-row KS diffing of embedding checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every row of a tensor between two checkpoints.
    Analyze(AnalyzeArgs),
    /// Pick winning tickets from a scores file.
    Select(SelectArgs),
    /// Write a per-row trainable mask from a ticket file.
    Mask(MaskArgs),
    /// Splice the ticket rows of the tuned tensor into the base checkpoint.
    Transfer(TransferArgs),
    /// Certified accuracy of a prediction log over one or more alphas.
    Certify(CertifyArgs),
    /// Token counts of a pre-tokenized corpus.
    Freq(FreqArgs),
    /// Convert a numeric CSV matrix into a single-tensor checkpoint.
    ImportCsv(ImportCsvArgs),
    /// Toy next-token model for end-to-end runs.
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    tuned: PathBuf,
    #[arg(long)]
    tensor: String,
    /// Counts file (`token_id,count`) to fill the frequency column.
    #[arg(long)]
    freq: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("rule").required(true).args(["alpha", "method"]))]
struct SelectArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Significance level in (0, 1]; 1 keeps every changed row.
    #[arg(long, requires = "dim", conflicts_with_all = ["method", "top_k"])]
    alpha: Option<f64>,
    /// Row width the scores were computed with.
    #[arg(long)]
    dim: Option<usize>,
    /// Ranking metric: ks, cos, abs, relative, ratio, kl or frequency.
    #[arg(long, requires = "top_k")]
    method: Option<Method>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    tickets: PathBuf,
    /// Mark every row except the tickets as trainable.
    #[arg(long)]
    complement: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    tuned: PathBuf,
    #[arg(long)]
    tensor: String,
    #[arg(long)]
    tickets: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    dim: usize,
    /// Comma-separated significance levels.
    #[arg(long, value_delimiter = ',', required = true)]
    alpha: Vec<f64>,
    #[arg(long, default_value = "tuned")]
    prob_source: ProbSource,
    /// Only keep the first K positions of every example.
    #[arg(long)]
    first_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FreqArgs {
    /// Whitespace-separated token ids.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: usize,
    /// Write only the K most frequent ids, most frequent first.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImportCsvArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    tensor: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum ToyCommand {
    /// Generate a Zipfian source/target task.
    Gen(ToyGenArgs),
    /// Write a seeded random model.
    Init(ToyInitArgs),
    /// Train a model on a task.
    Train(ToyTrainArgs),
    /// Accuracy of a model on a task.
    Eval(ToyEvalArgs),
    /// Per-pair prediction log for certification.
    PredictLog(ToyPredictLogArgs),
}

#[derive(Debug, Args)]
struct ToyGenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    vocab: usize,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the source tokens as a corpus for `freq`.
    #[arg(long)]
    corpus_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyInitArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    vocab: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ToyTrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    task: PathBuf,
    /// full, embed, partial or frozen_complement.
    #[arg(long)]
    mode: TrainMode,
    #[arg(long)]
    tickets: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    task: PathBuf,
    /// Write the accuracy here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyPredictLogArgs {
    #[arg(long)]
    tuned: PathBuf,
    #[arg(long)]
    partial: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Analyze(a) => analyze(a),
        Command::Select(a) => select(a),
        Command::Mask(a) => mask(a),
        Command::Transfer(a) => transfer(a),
        Command::Certify(a) => certify(a),
        Command::Freq(a) => freq(a),
        Command::ImportCsv(a) => {
            let ckpt = import_csv_matrix(&a.csv, &a.tensor)?;
            write_checkpoint(&ckpt, &a.out)?;
            Ok(())
        }
        Command::Toy(t) => match t {
            ToyCommand::Gen(a) => toy_gen(a),
            ToyCommand::Init(a) => toy_init(a),
            ToyCommand::Train(a) => toy_train(a),
            ToyCommand::Eval(a) => toy_eval(a),
            ToyCommand::PredictLog(a) => toy_predict_log(a),
        },
    }
}

fn source_name(path: &Path) -> String {
    path.display().to_string()
}

fn read_tickets(path: &Path) -> Result<kslt_core::WinningTicketSet> {
    let text = formats::read_text(path)?;
    Ok(formats::parse_tickets(&text, &source_name(path))?)
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let base = read_checkpoint(&a.base)?;
    let tuned = read_checkpoint(&a.tuned)?;
    let (vocab, _) = validate_pair(&base, &tuned, &a.tensor)?;
    let mut scores = analyze_pair(
        &get_embedding(&base, &a.tensor)?,
        &get_embedding(&tuned, &a.tensor)?,
    )?;
    if let Some(path) = &a.freq {
        let counts = formats::parse_counts(&formats::read_text(path)?, &source_name(path), vocab)?;
        attach_frequencies(&mut scores, &counts)?;
    }
    formats::write_text(&a.out, &formats::render_scores(&scores))?;
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let scores = formats::parse_scores(&formats::read_text(&a.scores)?, &source_name(&a.scores))?;
    let tickets = match (a.alpha, a.method, a.dim, a.top_k) {
        (Some(alpha), None, Some(dim), None) => select_by_alpha(&scores, alpha, dim)?,
        (None, Some(method), None, Some(k)) => select_top_k(&scores, method, k)?,
        // clap's groups make any other combination unreachable.
        _ => bail!("use either --alpha with --dim or --method with --top-k"),
    };
    formats::write_text(&a.out, &formats::render_tickets(&tickets)?)?;
    Ok(())
}

fn mask(a: MaskArgs) -> Result<()> {
    let tickets = read_tickets(&a.tickets)?;
    let mask = emit_mask(&tickets, a.complement)?;
    formats::write_text(&a.out, &formats::render_mask(&mask))?;
    Ok(())
}

fn transfer(a: TransferArgs) -> Result<()> {
    let base = read_checkpoint(&a.base)?;
    let tuned = read_checkpoint(&a.tuned)?;
    let tickets = read_tickets(&a.tickets)?;
    let spliced = splice_partial_transfer(&base, &tuned, &a.tensor, &tickets)?;
    write_checkpoint(&spliced, &a.out)?;
    Ok(())
}

fn certify(a: CertifyArgs) -> Result<()> {
    let records =
        formats::parse_prediction_log(&formats::read_text(&a.log)?, &source_name(&a.log))?;
    let reports = alpha_sweep(&records, &a.alpha, a.dim, a.prob_source, a.first_k)?;
    formats::write_text(&a.out, &formats::render_reports(&reports)?)?;
    Ok(())
}

fn freq(a: FreqArgs) -> Result<()> {
    let corpus = formats::parse_corpus(&formats::read_text(&a.corpus)?, &source_name(&a.corpus))?;
    let counts = count_frequencies(corpus, a.vocab)?;
    let text = match a.top_k {
        None => formats::render_counts(&counts, 0..a.vocab),
        Some(k) => {
            let mut ids: Vec<usize> = (0..a.vocab).collect();
            ids.sort_by(|&x, &y| counts[y].cmp(&counts[x]).then(x.cmp(&y)));
            ids.truncate(k);
            formats::render_counts(&counts, ids)
        }
    };
    formats::write_text(&a.out, &text)?;
    Ok(())
}

fn read_model(path: &Path) -> Result<ToyModel> {
    let ckpt = read_checkpoint(path)?;
    ToyModel::from_checkpoint(&ckpt)
        .with_context(|| format!("{} is not a toy model", path.display()))
}

fn read_task(path: &Path, vocab_size: usize) -> Result<SyntheticTask> {
    let pairs = formats::parse_task_pairs(&formats::read_text(path)?, &source_name(path))?;
    Ok(SyntheticTask::from_pairs(vocab_size, pairs)?)
}

fn toy_gen(a: ToyGenArgs) -> Result<()> {
    let task = generate_task(a.seed, a.vocab, a.pairs, a.zipf)?;
    formats::write_text(&a.out, &formats::render_task_pairs(&task.pairs))?;
    if let Some(path) = &a.corpus_out {
        formats::write_text(path, &formats::render_corpus(task.sources()))?;
    }
    Ok(())
}

fn toy_init(a: ToyInitArgs) -> Result<()> {
    let model = init_model(a.seed, a.vocab, a.dim)?;
    write_checkpoint(&model.to_checkpoint()?, &a.out)?;
    Ok(())
}

fn toy_train(a: ToyTrainArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let task = read_task(&a.task, model.vocab_size())?;
    let mut config = TrainConfig::new(a.mode, a.seed);
    config.learning_rate = a.lr;
    config.epochs = a.epochs;
    config.batch_size = a.batch_size;
    if let Some(path) = &a.tickets {
        config = config.with_tickets(read_tickets(path)?);
    }
    let (tuned, curve) = train(&model, &task, &config)?;
    write_checkpoint(&tuned.to_checkpoint()?, &a.out)?;
    if let Some(path) = &a.loss_out {
        formats::write_text(path, &formats::render_loss_curve(&curve))?;
    }
    Ok(())
}

fn toy_eval(a: ToyEvalArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let task = read_task(&a.task, model.vocab_size())?;
    let accuracy = evaluate(&model, &task)?;
    let text = format!("accuracy = {}\n", formats::fmt9(accuracy));
    match &a.out {
        Some(path) => formats::write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn toy_predict_log(a: ToyPredictLogArgs) -> Result<()> {
    let tuned = read_model(&a.tuned)?;
    let partial = read_model(&a.partial)?;
    let base = read_model(&a.base)?;
    let task = read_task(&a.task, tuned.vocab_size())?;
    let records = emit_prediction_log(&tuned, &partial, &base, &task)?;
    formats::write_text(&a.out, &formats::render_prediction_log(&records))?;
    Ok(())
}
