//! `faithgen` command line: synth, train, generate, evaluate, match, inspect.
//!
//! Reports go to stdout as JSON, progress to stderr. Exit codes: 0 success,
//! 1 usage or configuration error, 2 bad data, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use faithgen::data::{build_vocab, encode_examples, load_jsonl, load_tables_jsonl, synth_generate, SynthConfig, Vocab};
use faithgen::fsutil::write_atomic;
use faithgen::losses::EmbeddingSource;
use faithgen::metrics::{bleu4, parent_instance, parent_t_instance, InstanceScore, MetricReport};
use faithgen::model::{inspect_checkpoint, load_checkpoint, ModelConfig};
use faithgen::ot::{match_report, Embeddings, IpotParams};
use faithgen::table::{tokenize, LexicalMode, NounLexicon, Table};
use faithgen::train::{generate, train, OtMode, TrainConfig, TrainOutput};
use faithgen::Error;

#[derive(Parser)]
#[command(name = "faithgen", version, about = "Faithful table-to-text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic person-biography corpus.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint, vocabulary and loss log.
    Train(Box<TrainArgs>),
    /// Generate one text per table.
    Generate(GenerateArgs),
    /// Score generated texts against tables and references.
    Evaluate(EvaluateArgs),
    /// Compare hard, Hungarian and OT matching of two keyword lists.
    Match(MatchArgs),
    /// Summarise a checkpoint header.
    Inspect(InspectArgs),
}

fn unit_rate(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("{r} is outside [0, 1]"))
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_rate)]
    hallucination: f64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_rate)]
    omission: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum OtModeArg {
    None,
    Whole,
    Nouns,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    EmbeddingLayer,
    TopLayer,
}

#[derive(Args)]
struct TrainArgs {
    /// Training examples, one JSON object per line.
    #[arg(long)]
    data: PathBuf,
    /// Noun lexicon, one word per line.
    #[arg(long)]
    nouns: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with optional `train` and `model` objects; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long, default_value_t = 50_000)]
    vocab_cap: usize,

    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    ot_start: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long, value_enum)]
    ot_mode: Option<OtModeArg>,
    #[arg(long)]
    no_latent: bool,
    #[arg(long, value_enum)]
    embedding_source: Option<SourceArg>,
    #[arg(long)]
    tau: Option<f64>,

    #[arg(long)]
    no_copy: bool,
    /// Use a full V x D embedding instead of E1 * E2.
    #[arg(long)]
    unfactorized: bool,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to vocab.txt next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Tables, one JSON object per line.
    #[arg(long)]
    tables: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    ParentT,
    Parent,
    Bleu,
}

#[derive(Clone, Copy, ValueEnum)]
enum LexicalArg {
    Values,
    ValuesAndTypes,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Examples with tables and reference texts.
    #[arg(long)]
    data: PathBuf,
    /// One generated text per line, in example order.
    #[arg(long)]
    generated: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::ParentT)]
    metric: Metric,
    #[arg(long, value_enum, default_value_t = LexicalArg::Values)]
    lexical_mode: LexicalArg,
    #[arg(long)]
    per_example: bool,
}

#[derive(Args)]
struct MatchArgs {
    /// Table keywords, whitespace separated.
    #[arg(long)]
    a: PathBuf,
    /// Text keywords, whitespace separated.
    #[arg(long)]
    b: PathBuf,
    /// Lines of `token v1 ... vD`.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = IpotParams::default().beta)]
    beta: f64,
    /// Outer proximal iterations.
    #[arg(long, default_value_t = IpotParams::default().outer)]
    iters: usize,
    #[arg(long, default_value_t = IpotParams::default().inner)]
    inner: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 1,
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = threads().and_then(|threads| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(*a),
        Command::Generate(a) => generate_cmd(a),
        Command::Evaluate(a) => evaluate(a, threads),
        Command::Match(a) => match_cmd(a),
        Command::Inspect(a) => inspect(a),
    });
    match result {
        Ok(v) => {
            // A closed pipe downstream is not our failure.
            let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&v).expect("report serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Worker cap from FAITHGEN_THREADS, else the machine's parallelism.
fn threads() -> Result<usize, Failure> {
    match std::env::var("FAITHGEN_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!("FAITHGEN_THREADS must be a positive integer, got {s:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig::new(a.n, a.seed).with_noise(a.hallucination, a.omission);
    let corpus = synth_generate(&cfg)?;
    let files = corpus.write(&a.out_dir)?;
    eprintln!(
        "synth: {} train, {} valid, {} test examples in {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        a.out_dir.display()
    );
    Ok(json!({
        "train": corpus.train.len(),
        "valid": corpus.valid.len(),
        "test": corpus.test.len(),
        "nouns": corpus.lexicon.len(),
        "files": [files.train, files.valid, files.test, files.nouns],
    }))
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    train: Option<TrainConfig>,
    model: Option<ModelOverrides>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelOverrides {
    embed_dim: Option<usize>,
    factor_dim: Option<usize>,
    ff_dim: Option<usize>,
    heads: Option<usize>,
    blocks: Option<usize>,
    max_len: Option<usize>,
    dropout: Option<f64>,
    label_smoothing: Option<f64>,
    copy_enabled: Option<bool>,
    factorized: Option<bool>,
}

impl ModelOverrides {
    fn apply(&self, m: &mut ModelConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { m.$f = v; })* };
        }
        set!(embed_dim, factor_dim, ff_dim, heads, blocks, max_len, dropout, label_smoothing, copy_enabled, factorized);
    }
}

fn read_config(path: &Path) -> Result<ConfigFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn resolve_configs(a: &TrainArgs, vocab_size: usize) -> Result<(TrainConfig, ModelConfig), Failure> {
    let (mut tc, mut mc) = match a.profile {
        Profile::Desk => (TrainConfig::desk(), ModelConfig::desk(vocab_size)),
        Profile::Paper => (TrainConfig::paper(), ModelConfig::paper(vocab_size)),
    };
    if let Some(path) = &a.config {
        let file = read_config(path)?;
        if let Some(t) = file.train {
            tc = t;
        }
        if let Some(m) = file.model {
            m.apply(&mut mc);
        }
    }
    macro_rules! flag {
        ($($arg:ident => $field:ident),*) => { $(if let Some(v) = a.$arg { tc.$field = v; })* };
    }
    flag!(lr => lr, beta1 => beta1, beta2 => beta2, steps => max_steps, ot_start => ot_start_step,
        lambda => lambda, gamma => gamma, seed => seed, checkpoint_every => checkpoint_every,
        token_budget => token_budget, warmup => warmup_steps, tau => tau);
    if a.clip_norm.is_some() {
        tc.clip_norm = a.clip_norm;
    }
    if let Some(m) = a.ot_mode {
        tc.ot_mode = match m {
            OtModeArg::None => OtMode::None,
            OtModeArg::Whole => OtMode::Whole,
            OtModeArg::Nouns => OtMode::Nouns,
        };
    }
    if a.no_latent {
        tc.latent = false;
    }
    if let Some(s) = a.embedding_source {
        tc.embedding_source = match s {
            SourceArg::EmbeddingLayer => EmbeddingSource::EmbeddingLayer,
            SourceArg::TopLayer => EmbeddingSource::TopLayer,
        };
    }
    // A shortened run keeps the OT phase inside it.
    if tc.ot_start_step > tc.max_steps && a.ot_start.is_none() {
        tc.ot_start_step = tc.max_steps;
    }
    if a.no_copy {
        mc.copy_enabled = false;
    }
    if a.unfactorized {
        mc.factorized = false;
    }
    if let Some(v) = a.dropout {
        mc.dropout = v;
    }
    if let Some(v) = a.label_smoothing {
        mc.label_smoothing = v;
    }
    if let Some(v) = a.max_len {
        mc.max_len = v;
    }
    mc.vocab_size = vocab_size;
    tc.validate()?;
    mc.validate()?;
    Ok((tc, mc))
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let examples = load_jsonl(&a.data)?;
    if examples.is_empty() {
        return Err(Failure::Core(Error::Invalid(format!("{} holds no examples", a.data.display()))));
    }
    let lexicon = match &a.nouns {
        Some(p) => NounLexicon::load(p)?,
        None => NounLexicon::default(),
    };
    let vocab = build_vocab(&examples, a.vocab_cap)?;
    let (tc, mc) = resolve_configs(&a, vocab.len())?;
    let encoded = encode_examples(&examples, &vocab, &lexicon)?;
    if let Some(i) = encoded
        .iter()
        .position(|e| e.source.len() > mc.max_len || e.target.len() + 1 > mc.max_len)
    {
        return Err(Failure::Core(Error::Data {
            path: a.data.clone(),
            line: i + 1,
            msg: format!("example is longer than max_len {}", mc.max_len),
        }));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Core(Error::Invalid(format!("{}: {e}", a.out_dir.display()))))?;
    let vocab_path = a.out_dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let resolved = json!({ "train": tc, "model": mc });
    write_atomic(
        &a.out_dir.join("config.json"),
        serde_json::to_string_pretty(&resolved).map_err(Error::from)?.as_bytes(),
    )?;
    eprintln!(
        "train: {} examples, vocab {}, {} steps (OT from step {})",
        encoded.len(),
        vocab.len(),
        tc.max_steps,
        tc.ot_start_step
    );
    let out = TrainOutput {
        dir: a.out_dir.clone(),
    };
    let started = std::time::Instant::now();
    let result = train(&tc, &mc, &encoded, &vocab, &lexicon, Some(&out))?;
    eprintln!("train: done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(json!({
        "steps": result.log.len(),
        "skipped_steps": result.skipped_steps,
        "final": result.log.last(),
        "param_count": result.params.param_count(),
        "checkpoint": out.checkpoint_path(),
        "log": out.log_path(),
        "vocab": vocab_path,
    }))
}

fn generate_cmd(a: GenerateArgs) -> CmdResult {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let vocab_path = a
        .vocab
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = Vocab::load(&vocab_path)?;
    let tables: Vec<Table> = load_tables_jsonl(&a.tables)?.into_iter().map(|(t, _)| t).collect();
    if a.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    eprintln!("generate: {} tables, beam {}", tables.len(), a.beam);
    let texts = generate(&checkpoint, &vocab, &tables, a.beam)?;
    let mut body = String::new();
    for t in &texts {
        body.push_str(t);
        body.push('\n');
    }
    write_atomic(&a.out, body.as_bytes())?;
    Ok(json!({ "count": texts.len(), "out": a.out }))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Core(Error::Invalid(format!("{}: {e}", path.display()))))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Scores instances on up to `threads` workers; results keep example order.
fn score_parallel<F>(n: usize, threads: usize, score: F) -> Vec<InstanceScore>
where
    F: Fn(usize) -> InstanceScore + Sync,
{
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = starts
            .iter()
            .map(|&lo| {
                let score = &score;
                s.spawn(move || (lo..(lo + chunk).min(n)).map(score).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    })
}

fn evaluate(a: EvaluateArgs, threads: usize) -> CmdResult {
    let examples = load_jsonl(&a.data)?;
    let generated = read_lines(&a.generated)?;
    if generated.len() != examples.len() {
        return Err(Failure::Core(Error::Invalid(format!(
            "{} has {} lines but {} has {} examples",
            a.generated.display(),
            generated.len(),
            a.data.display(),
            examples.len()
        ))));
    }
    let mode = match a.lexical_mode {
        LexicalArg::Values => LexicalMode::ValuesOnly,
        LexicalArg::ValuesAndTypes => LexicalMode::ValuesAndTypes,
    };
    let (name, report) = match a.metric {
        Metric::Bleu => {
            let cands: Vec<Vec<String>> = generated.iter().map(|g| tokenize(g)).collect();
            let refs: Vec<Vec<String>> = examples.iter().map(|e| tokenize(&e.text)).collect();
            let bleu = bleu4(&cands, &refs)?;
            return Ok(json!({ "metric": "bleu", "corpus": { "bleu": bleu, "count": cands.len() } }));
        }
        Metric::ParentT => (
            "parent-t",
            score_parallel(examples.len(), threads, |i| {
                parent_t_instance(&examples[i].table, &tokenize(&generated[i]), mode)
            }),
        ),
        Metric::Parent => (
            "parent",
            score_parallel(examples.len(), threads, |i| {
                parent_instance(&examples[i].table, &tokenize(&examples[i].text), &tokenize(&generated[i]), mode)
            }),
        ),
    };
    let report = MetricReport::from_instances(report);
    let mut out = json!({
        "metric": name,
        "lexical_mode": mode,
        "corpus": {
            "precision": report.precision,
            "recall": report.recall,
            "f": report.f,
            "count": report.count,
            "degenerate": report.degenerate,
        },
    });
    if a.per_example {
        out["per_example"] = serde_json::to_value(&report.instances).map_err(Error::from)?;
    }
    Ok(out)
}

fn read_tokens(path: &Path) -> Result<Vec<String>, Failure> {
    Ok(read_lines(path)?
        .iter()
        .flat_map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .collect())
}

fn match_cmd(a: MatchArgs) -> CmdResult {
    let params = IpotParams {
        beta: a.beta,
        outer: a.iters,
        inner: a.inner,
    };
    params.validate()?;
    let xa = read_tokens(&a.a)?;
    let xb = read_tokens(&a.b)?;
    let emb = Embeddings::load(&a.embeddings)?;
    let report = match_report(&xa, &xb, &emb, params)?;
    Ok(serde_json::to_value(report).map_err(Error::from)?)
}

fn inspect(a: InspectArgs) -> CmdResult {
    let h = inspect_checkpoint(&a.checkpoint)?;
    let c = &h.config;
    let embedding = h.embedding_param_count();
    let unfactorized = c.vocab_size * c.embed_dim;
    eprintln!(
        "{}: {} blocks, D={}, V={}, {} parameters ({} in the embedding)",
        a.checkpoint.display(),
        c.blocks,
        c.embed_dim,
        c.vocab_size,
        h.param_count(),
        embedding
    );
    Ok(json!({
        "format_version": h.format_version,
        "step": h.step,
        "vocab_hash": h.vocab_hash,
        "config": c,
        "tensors": h.manifest.len(),
        "param_count": h.param_count(),
        "embedding_param_count": embedding,
        "unfactorized_embedding_param_count": unfactorized,
        "embedding_savings": unfactorized as i64 - embedding as i64,
    }))
}
