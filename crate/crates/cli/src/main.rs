use std::fs;
use std::io::{self, BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use colloquy::chat::{
    respond, run_repl, serve, ChatService, ChatSession, LoadedModel, SessionOptions,
};
use colloquy::checkpoint::Checkpoint;
use colloquy::data::cornell::{CONVERSATIONS_FILE, LINES_FILE};
use colloquy::data::{
    prepare_cornell, prepare_opensubtitles, synthetic, CornellCorpus, DataDir, DialogExample,
    PreprocessOptions,
};
use colloquy::decoding::{DecodeMode, DecodeSettings};
use colloquy::evaluation::evaluate;
use colloquy::training::{extend_vocabulary, RunOutput, TrainSettings, Trainer};
use colloquy::{Transformer, TransformerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "colloquy",
    version,
    about = "Train, evaluate and chat with Transformer dialog models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a raw corpus into token files, id shards and a vocabulary.
    Preprocess(PreprocessArgs),
    /// Write a synthetic corpus in the Cornell distribution format.
    Synth(SynthArgs),
    /// Train a model on a preprocessed data directory.
    Train(TrainArgs),
    /// Extend a trained model's vocabulary with name tokens and keep training.
    Finetune(FinetuneArgs),
    /// Answer each line of standard input.
    Decode(DecodeArgs),
    /// Perplexity, BLEU and WER on held-out pairs.
    Evaluate(EvaluateArgs),
    /// Interactive terminal chat.
    Chat(ChatArgs),
    /// HTTP chat service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Cornell,
    Opensubtitles,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long, value_enum)]
    corpus: CorpusKind,
    /// Cornell directory, or a subtitle file with one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Add speaker and addressee tokens to every source.
    #[arg(long)]
    speakers: bool,
    #[arg(long, default_value_t = 32765)]
    max_words: usize,
    /// Name tokens kept with `--speakers`.
    #[arg(long, default_value_t = 8000)]
    names: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    valid_fraction: Option<f64>,
    #[arg(long)]
    train_lines: Option<usize>,
    #[arg(long)]
    valid_lines: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    conversations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML with optional `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on swapped pairs, giving the backward model used for reranking.
    #[arg(long)]
    backward: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long = "from")]
    from: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// One token per line; blank lines are skipped.
    #[arg(long)]
    add_names: PathBuf,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training settings overriding those stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DecodeOpts {
    #[arg(long, value_enum, default_value = "greedy")]
    mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Backward-model weight for reranking beam candidates.
    #[arg(long)]
    mmi: Option<f64>,
    #[arg(long)]
    backward_ckpt: Option<PathBuf>,
    #[arg(long)]
    length_normalize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Sample,
    Beam,
}

impl DecodeOpts {
    fn settings(&self) -> DecodeSettings {
        DecodeSettings {
            mode: match self.mode {
                ModeArg::Greedy => DecodeMode::Greedy,
                ModeArg::Sample => DecodeMode::Sample,
                ModeArg::Beam => DecodeMode::Beam,
            },
            beam_width: self.beam,
            max_len: self.max_len,
            seed: self.seed,
            mmi_lambda: self.mmi,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    decode: DecodeOpts,
    #[arg(long)]
    speaker: Option<String>,
    #[arg(long)]
    addressee: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Evaluate only the first N validation pairs.
    #[arg(long)]
    limit: Option<usize>,
    /// Also write decoded samples as JSON lines.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    speaker: Option<String>,
    #[arg(long)]
    addressee: Option<String>,
    /// Earlier utterances prepended to each source.
    #[arg(long, default_value_t = 0)]
    history: usize,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct ServeArgs {
    /// Comma-separated checkpoints; each is served under its file stem.
    #[arg(long, value_delimiter = ',', required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: Option<TransformerConfig>,
    train: Option<TrainSettings>,
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn load_model(path: &Path, backward: Option<&Path>) -> Result<LoadedModel> {
    let m = LoadedModel::from_checkpoint(model_id(path), &load_ckpt(path)?)?;
    Ok(match backward {
        Some(b) => m.with_backward(load_ckpt(b)?.model()?)?,
        None => m,
    })
}

fn swap(examples: &[DialogExample]) -> Vec<DialogExample> {
    examples
        .iter()
        .map(|e| DialogExample {
            source: e.target.clone(),
            target: e.source.clone(),
            persona: false,
        })
        .collect()
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let defaults = PreprocessOptions::default();
    let options = PreprocessOptions {
        speakers: a.speakers,
        max_words: a.max_words,
        max_names: a.names,
        seed: a.seed,
        valid_fraction: a.valid_fraction.unwrap_or(defaults.valid_fraction),
        train_lines: a.train_lines,
        valid_lines: a.valid_lines,
    };
    let prepared = match a.corpus {
        CorpusKind::Cornell => prepare_cornell(&CornellCorpus::load(&a.input)?, &options)?,
        CorpusKind::Opensubtitles => {
            if a.speakers {
                bail!("subtitles carry no speaker labels");
            }
            let text = fs::read_to_string(&a.input)
                .with_context(|| format!("reading {}", a.input.display()))?;
            let lines: Vec<&str> = text.lines().collect();
            prepare_opensubtitles(&lines, &options)?
        }
    };
    prepared.write(&a.out)?;
    let r = &prepared.manifest.report;
    println!(
        "{} train / {} valid pairs, vocabulary {}",
        r.train_pairs, r.valid_pairs, r.vocab_size
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let corpus = synthetic::generate(a.conversations, a.seed);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(LINES_FILE), corpus.movie_lines)?;
    fs::write(a.out.join(CONVERSATIONS_FILE), corpus.movie_conversations)?;
    Ok(())
}

fn log_progress(rec: &colloquy::training::MetricsRecord) -> bool {
    tracing::info!(
        step = rec.step,
        train_loss = ?rec.train_loss,
        val_loss = ?rec.val_loss,
        perplexity = ?rec.perplexity,
        lr = rec.lr,
        "progress"
    );
    true
}

fn train(a: TrainArgs) -> Result<()> {
    let data = DataDir::load(&a.data)?;
    let (train, valid) = if a.backward {
        (swap(&data.train), swap(&data.valid))
    } else {
        (data.train, data.valid)
    };
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(load_ckpt(path)?)?,
        None => {
            let cfg = read_run_config(a.config.as_deref())?;
            let mut settings = cfg.train.unwrap_or_default();
            if let Some(seed) = a.seed {
                settings.seed = seed;
            }
            let config = TransformerConfig {
                vocab_size: data.vocab.len(),
                ..cfg.model.unwrap_or_default()
            };
            let model =
                Transformer::initialize(config, &mut ChaCha8Rng::seed_from_u64(settings.seed))?;
            Trainer::new(model, data.vocab, settings)?
        }
    };
    let records = trainer.run(
        &train,
        &valid,
        a.steps,
        Some(&RunOutput::new(&a.out)),
        log_progress,
    )?;
    if let Some(last) = records.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let base = load_ckpt(&a.from)?;
    let names_text = fs::read_to_string(&a.add_names)
        .with_context(|| format!("reading {}", a.add_names.display()))?;
    let names: Vec<&str> = names_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let mut settings = match read_run_config(a.config.as_deref())?.train {
        Some(s) => s,
        None => match &base.trainer {
            Some(state) => serde_json::from_str(&state.settings)?,
            None => TrainSettings::default(),
        },
    };
    if let Some(seed) = a.seed {
        settings.seed = seed;
    }
    let extended = extend_vocabulary(&base, &names, &mut ChaCha8Rng::seed_from_u64(settings.seed))?;
    let data = DataDir::reencode(&a.data, extended.vocab.clone())?;
    println!(
        "vocabulary {} -> {}",
        base.vocab.len(),
        extended.vocab.len()
    );
    let mut trainer = Trainer::new(extended.model()?, extended.vocab, settings)?;
    trainer.run(
        &data.train,
        &data.valid,
        a.steps,
        Some(&RunOutput::new(&a.out)),
        log_progress,
    )?;
    Ok(())
}

fn decode_lines(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.ckpt, a.decode.backward_ckpt.as_deref())?;
    let options = SessionOptions {
        speaker: a.speaker,
        addressee: a.addressee,
        settings: a.decode.settings(),
        history_window: 0,
    };
    let mut session = ChatSession::new("decode", &model, options)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in io::stdin().lock().lines() {
        let line = line?;
        session.history.clear();
        match respond(&model, &mut session, &line) {
            Ok(r) => writeln!(out, "{}", r.reply)?,
            Err(colloquy::Error::Input(_)) => writeln!(out)?,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let data = DataDir::load(&a.data)?;
    if data.vocab != ckpt.vocab {
        bail!(
            "{} was preprocessed with a different vocabulary",
            a.data.display()
        );
    }
    let model = ckpt.model()?;
    let valid = match a.limit {
        Some(n) => &data.valid[..n.min(data.valid.len())],
        None => &data.valid[..],
    };
    let valid = colloquy::training::fit_examples(valid, model.config().max_sequence_length);
    let (report, samples) = evaluate(&model, &ckpt.vocab, &valid, &a.decode.settings())?;
    fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(path) = &a.samples {
        let mut text = String::new();
        for s in &samples {
            text.push_str(&serde_json::to_string(s)?);
            text.push('\n');
        }
        fs::write(path, text)?;
    }
    let ppl = report
        .perplexity
        .map_or("inf".to_string(), |p| format!("{p:.2}"));
    println!(
        "perplexity {ppl}  BLEU {:.2}  WER {:.3}",
        report.bleu_percent, report.wer
    );
    Ok(())
}

fn chat(a: ChatArgs) -> Result<()> {
    let model = load_model(&a.ckpt, a.decode.backward_ckpt.as_deref())?;
    let options = SessionOptions {
        speaker: a.speaker,
        addressee: a.addressee,
        settings: a.decode.settings(),
        history_window: a.history,
    };
    let mut session = ChatSession::new("repl", &model, options)?;
    let interactive = io::stdin().is_terminal();
    if interactive {
        eprintln!("model {} ready; /quit exits", model.id);
    }
    run_repl(
        &model,
        &mut session,
        io::stdin().lock(),
        io::stdout().lock(),
        interactive,
    )?;
    Ok(())
}

#[tokio::main]
async fn serve_cmd(a: ServeArgs) -> Result<()> {
    let models = a
        .ckpt
        .iter()
        .map(|p| load_model(p, None))
        .collect::<Result<Vec<_>>>()?;
    let service = Arc::new(ChatService::new(models)?);
    let listener = tokio::net::TcpListener::bind(&a.addr)
        .await
        .with_context(|| format!("binding {}", a.addr))?;
    tracing::info!("listening on {}", listener.local_addr()?);
    serve(listener, service).await?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .init();
    match Cli::parse().command {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Decode(a) => decode_lines(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Chat(a) => chat(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
