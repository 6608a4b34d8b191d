//! `urtf` command-line front end.
//!
//! Machine-readable results go to stdout as JSON; progress and human
//! summaries go to stderr. Exit codes: 0 success, 1 failed check or
//! runtime error, 2 usage error.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use urtf::autodiff::check_primitives;
use urtf::metatrain::{
    evaluate_fast_adaptation, load_checkpoint, maml_checks, meta_pretrain, prepare_tasks, save_checkpoint,
    write_metrics_log, MetaConfig, MetaMode, ToyModel, Vocab,
};
use urtf::metrics::{Buckets, ScoreReport, ScoredInstance, TaskKind};
use urtf::pairing::{bench_pair, pair_corpus, PairingConfig};
use urtf::prompting::{build_ssi, NameOrder};
use urtf::sel::{linearize_sel, parse_sel, validate_record, Schema, SelRecord};
use urtf::synth::{gen_corpus, gen_distribution, read_corpus, read_tasks, write_corpus, DistConfig, Instance, PairedTask};

const SEED_ENV: &str = "URTF_SEED";

#[derive(Debug, Parser)]
#[command(name = "urtf", version, about = "Universal retrieval-then-extract toolkit")]
struct Cli {
    /// Seed for every random choice; the URTF_SEED variable overrides it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, lint or round-trip SEL strings.
    #[command(subcommand)]
    Sel(SelCommand),
    /// Structural schema prompts.
    #[command(subcommand)]
    Ssi(SsiCommand),
    /// Synthetic corpora.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Pair a corpus into support/query tasks.
    Pair(PairArgs),
    /// Timing benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Meta-pretraining and evaluation of the toy model.
    #[command(subcommand)]
    Meta(MetaCommand),
    /// Span-based micro-F1 of predictions against gold records.
    Score(ScoreArgs),
    /// Finite-difference checks of the differentiation engine.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
enum SelCommand {
    /// Print each parsed record as a JSON line.
    Parse(SelFile),
    /// Check names against the instance schema (or --spots/--assos).
    Lint(SelLintArgs),
    /// Check that linearizing each parsed record reproduces it.
    Roundtrip(SelFile),
}

#[derive(Debug, Args)]
struct SelFile {
    /// One SEL string per line, or a JSONL corpus.
    file: PathBuf,
}

#[derive(Debug, Args)]
struct SelLintArgs {
    #[command(flatten)]
    input: SelFile,
    #[arg(long, value_delimiter = ',')]
    spots: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    assos: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum SsiCommand {
    Build(SsiArgs),
}

#[derive(Debug, Args)]
struct SsiArgs {
    #[arg(long, value_delimiter = ',')]
    spots: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    assos: Vec<String>,
    /// Shuffle names with the global seed instead of sorting them.
    #[arg(long)]
    shuffle: bool,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    Gen(SynthArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Use the held-out class names.
    #[arg(long)]
    heldout: bool,
}

#[derive(Debug, Args)]
struct PairArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Classes above this size use greedy matching.
    #[arg(long, default_value_t = urtf::pairing::DEFAULT_EXACT_THRESHOLD)]
    exact_threshold: usize,
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Pairing pipeline against a simulated episodic sampler.
    Pair(BenchPairArgs),
}

#[derive(Debug, Args)]
struct BenchPairArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
}

#[derive(Debug, Subcommand)]
enum MetaCommand {
    Train(TrainArgs),
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<MetaMode>,
    /// Checkpoint path; the vocabulary is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Adaptation step size; defaults to the configured alpha.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    gold: PathBuf,
    /// JSONL objects with at least `id` and `sel`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_parser = parse_task_kind)]
    task: TaskKind,
    #[arg(long)]
    group_by_entities: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Tolerance of the closed-form quadratic check.
    #[arg(long, default_value_t = 1e-8)]
    closed_form_tolerance: f64,
}

fn parse_mode(s: &str) -> Result<MetaMode, String> {
    s.parse().map_err(|e: urtf::metatrain::MetaError| e.to_string())
}

fn parse_task_kind(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

/// Why a command did not succeed.
enum Failure {
    Usage(anyhow::Error),
    Check(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

struct RunContext {
    seed: u64,
    config: MetaConfig,
    seed_given: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn context(cli: &Cli) -> Result<RunContext, Failure> {
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    let mut config = MetaConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Usage)?;
        config.apply_kv(&text).map_err(|e| Failure::Usage(e.into()))?;
    }
    let explicit = env_seed.or(cli.seed);
    let seed = explicit.unwrap_or(config.seed);
    config.seed = seed;
    Ok(RunContext {
        seed,
        config,
        seed_given: explicit.is_some(),
    })
}

fn run(cli: Cli) -> CmdResult {
    let ctx = context(&cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    match cli.command {
        Command::Sel(cmd) => sel(cmd),
        Command::Ssi(SsiCommand::Build(args)) => ssi_build(&args, ctx.seed),
        Command::Synth(SynthCommand::Gen(args)) => synth_gen(&args, ctx.seed),
        Command::Pair(args) => pair(&args),
        Command::Bench(BenchCommand::Pair(args)) => bench(&args, ctx.seed),
        Command::Meta(MetaCommand::Train(args)) => meta_train(&args, &ctx),
        Command::Meta(MetaCommand::Eval(args)) => meta_eval(&args, &ctx),
        Command::Score(args) => score(&args),
        Command::Gradcheck(args) => gradcheck(&args, ctx.seed),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

/// SEL strings from a file: JSONL corpus lines yield their `sel` field
/// and schema, other non-blank lines are taken verbatim.
fn sel_lines(path: &Path) -> anyhow::Result<Vec<(usize, String, Option<Schema>)>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('{') {
            let inst: Instance =
                serde_json::from_str(trimmed).with_context(|| format!("line {}: not a corpus instance", i + 1))?;
            let schema = inst.schema();
            out.push((i + 1, inst.sel, Some(schema)));
        } else {
            out.push((i + 1, line, None));
        }
    }
    Ok(out)
}

fn sel(cmd: SelCommand) -> CmdResult {
    let (name, file) = match &cmd {
        SelCommand::Parse(f) => ("parse", &f.file),
        SelCommand::Lint(a) => ("lint", &a.input.file),
        SelCommand::Roundtrip(f) => ("roundtrip", &f.file),
    };
    let lines = sel_lines(file)?;
    let mut failures = 0;
    for (line_no, text, schema) in &lines {
        let record = match parse_sel(text) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("line {line_no}: {e}");
                failures += 1;
                continue;
            }
        };
        match &cmd {
            SelCommand::Parse(_) => {
                print_json(&json!({ "line": line_no, "record": record }));
            }
            SelCommand::Lint(args) => {
                let explicit = !args.spots.is_empty() || !args.assos.is_empty();
                let schema = if explicit {
                    Some(Schema::new(args.spots.iter().cloned(), args.assos.iter().cloned()))
                } else {
                    schema.clone()
                };
                let mut problems: Vec<String> = Vec::new();
                if let Err(e) = linearize_sel(&record) {
                    problems.push(e.to_string());
                }
                if let Some(schema) = schema {
                    problems.extend(validate_record(&record, &schema).iter().map(|v| v.to_string()));
                }
                for p in &problems {
                    eprintln!("line {line_no}: {p}");
                }
                failures += usize::from(!problems.is_empty());
            }
            SelCommand::Roundtrip(_) => {
                let ok = linearize_sel(&record)
                    .ok()
                    .and_then(|s| parse_sel(&s).ok())
                    .is_some_and(|again| again == record);
                if !ok {
                    eprintln!("line {line_no}: round trip changed the record");
                    failures += 1;
                }
            }
        }
    }
    let summary = json!({ "command": name, "records": lines.len(), "failures": failures });
    if !matches!(cmd, SelCommand::Parse(_)) {
        print_json(&summary);
    }
    eprintln!("{name}: {} records, {failures} failures", lines.len());
    if failures > 0 {
        return Err(Failure::Check(format!("{failures} of {} records failed", lines.len())));
    }
    Ok(())
}

fn ssi_build(args: &SsiArgs, seed: u64) -> CmdResult {
    let schema = Schema::new(args.spots.iter().cloned(), args.assos.iter().cloned());
    let order = if args.shuffle {
        NameOrder::Shuffled(seed)
    } else {
        NameOrder::Lexicographic
    };
    let ssi = build_ssi(&schema, order).map_err(|e| usage(e.to_string()))?;
    print_json(&json!({ "prompt": ssi.tokens.join(" "), "tokens": ssi.tokens }));
    Ok(())
}

/// Train and held-out corpora share the distribution seed, hence the
/// span vocabulary; only the class names differ.
fn synth_gen(args: &SynthArgs, seed: u64) -> CmdResult {
    let config = DistConfig {
        heldout: args.heldout,
        ..DistConfig::default()
    };
    let dist = gen_distribution(&config, seed).map_err(|e| Failure::Runtime(e.into()))?;
    let corpus = gen_corpus(&dist, args.n, seed.wrapping_add(u64::from(args.heldout) + 1));
    write_corpus(&corpus, &args.out).map_err(|e| Failure::Runtime(e.into()))?;
    print_json(&json!({ "instances": corpus.len(), "out": args.out, "heldout": args.heldout }));
    info!("wrote {} instances to {}", corpus.len(), args.out.display());
    Ok(())
}

fn pair(args: &PairArgs) -> CmdResult {
    let config = PairingConfig {
        exact_threshold: args.exact_threshold,
    };
    let report = pair_corpus(&args.input, &args.out, &config).map_err(|e| Failure::Runtime(e.into()))?;
    let value = serde_json::to_value(&report).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(path) = &args.report {
        fs::write(path, format!("{value}\n")).map_err(|e| Failure::Runtime(e.into()))?;
    }
    print_json(&value);
    Ok(())
}

fn bench(args: &BenchPairArgs, seed: u64) -> CmdResult {
    let dir = tempfile::tempdir().map_err(|e| Failure::Runtime(e.into()))?;
    let corpus_path = dir.path().join("corpus.jsonl");
    let dist = gen_distribution(&DistConfig::default(), seed).map_err(|e| Failure::Runtime(e.into()))?;
    write_corpus(&gen_corpus(&dist, args.n, seed.wrapping_add(1)), &corpus_path)
        .map_err(|e| Failure::Runtime(e.into()))?;
    let report =
        bench_pair(&corpus_path, &dir.path().join("tasks.jsonl"), seed).map_err(|e| Failure::Runtime(e.into()))?;
    eprintln!(
        "pairing: {} ms ({} passes), episodic: {} ms ({} seeks), ratio {:.3}",
        report.pairing.wall_time_ms, report.pairing.read_passes, report.episodic.wall_time_ms, report.episodic.seeks, report.ratio
    );
    print_json(&json!({
        "instances": args.n,
        "pairing_ms": report.pairing.wall_time_ms,
        "episodic_ms": report.episodic.wall_time_ms,
        "ratio": report.ratio,
        "pairing": report.pairing,
        "episodic": report.episodic,
    }));
    Ok(())
}

fn load_tasks(path: &Path) -> Result<Vec<PairedTask>, Failure> {
    read_tasks(path)
        .map_err(|e| Failure::Runtime(e.into()))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn vocab_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn meta_train(args: &TrainArgs, ctx: &RunContext) -> CmdResult {
    let mut cfg = ctx.config.clone();
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
    let tasks = load_tasks(&args.tasks)?;
    let vocab = Vocab::for_tasks(&tasks, cfg.reserved_tokens).map_err(|e| Failure::Runtime(e.into()))?;
    let init = ToyModel::new(vocab.len(), cfg.dim, cfg.init_scale, cfg.seed);
    info!(
        "training {} on {} tasks, vocabulary {}, {} parameters",
        cfg.mode,
        tasks.len(),
        vocab.len(),
        init.params.num_scalars()
    );
    let start = Instant::now();
    let (model, log) = meta_pretrain(&init, &tasks, &vocab, &cfg).map_err(|e| Failure::Runtime(e.into()))?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut s = args.out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let io = |e: urtf::metatrain::MetaError| Failure::Runtime(e.into());
    save_checkpoint(&args.out, &model.params).map_err(io)?;
    vocab.save(&vocab_path(&args.out)).map_err(io)?;
    write_metrics_log(&log_path, &log).map_err(io)?;
    let last = log.last().map(|l| l.losses);
    print_json(&json!({
        "mode": cfg.mode,
        "steps": log.len(),
        "seed": cfg.seed,
        "seed_from_flag": ctx.seed_given,
        "final_losses": last,
        "wall_time_ms": start.elapsed().as_millis() as u64,
        "checkpoint": args.out,
        "log": log_path,
    }));
    Ok(())
}

fn meta_eval(args: &EvalArgs, ctx: &RunContext) -> CmdResult {
    let alpha = args.alpha.unwrap_or(ctx.config.alpha);
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(usage("--alpha must be finite and non-negative"));
    }
    let io = |e: urtf::metatrain::MetaError| Failure::Runtime(e.into());
    let params = load_checkpoint(&args.ckpt).map_err(io)?;
    let model = ToyModel::from_params(params).map_err(io)?;
    let mut vocab = Vocab::load(&vocab_path(&args.ckpt)).map_err(io)?;
    if vocab.len() != model.vocab_size() {
        return Err(Failure::Runtime(anyhow!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let tasks = load_tasks(&args.tasks)?;
    let bound = vocab.assign_tasks(&tasks).map_err(io)?;
    info!("bound {bound} unseen tokens to reserved slots");
    let prepared = prepare_tasks(&tasks, &vocab, &ctx.config, ctx.seed).map_err(io)?;
    let curve = evaluate_fast_adaptation(&model.params, &prepared, args.steps, alpha).map_err(io)?;
    eprintln!("mean query loss by step: {:?}", curve.mean);
    print_json(&json!({
        "tasks": prepared.len(),
        "steps": args.steps,
        "alpha": alpha,
        "mean": curve.mean,
        "monotone": curve.monotone,
        "per_task": curve.per_task,
    }));
    Ok(())
}

#[derive(serde::Deserialize)]
struct Prediction {
    id: String,
    sel: String,
}

fn score(args: &ScoreArgs) -> CmdResult {
    let gold: Vec<Instance> = read_corpus(&args.gold)
        .map_err(|e| Failure::Runtime(e.into()))?
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Runtime(e.into()))?;
    let file = fs::File::open(&args.pred)
        .with_context(|| format!("opening {}", args.pred.display()))
        .map_err(Failure::Runtime)?;
    let mut preds = std::collections::HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Failure::Runtime(e.into()))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", args.pred.display(), i + 1))
            .map_err(Failure::Runtime)?;
        let record = parse_sel(&p.sel).unwrap_or_else(|e| {
            log::warn!("prediction {} does not parse ({e}); scoring it as empty", p.id);
            SelRecord::default()
        });
        preds.insert(p.id, record);
    }
    let empty = SelRecord::default();
    let records: Vec<(SelRecord, &SelRecord)> = gold
        .iter()
        .map(|g| {
            let record = g.record().map_err(|e| Failure::Runtime(anyhow!("gold {}: {e}", g.id)))?;
            Ok((record, preds.get(&g.id).unwrap_or(&empty)))
        })
        .collect::<Result<_, Failure>>()?;
    let dataset: Vec<ScoredInstance> = gold
        .iter()
        .zip(&records)
        .map(|(g, (gold, pred))| ScoredInstance {
            text: &g.text,
            gold,
            pred,
        })
        .collect();
    let buckets = Buckets::default();
    let report = ScoreReport::build(&dataset, args.task, args.group_by_entities.then_some(&buckets));
    println!("{}", report.to_json());
    eprintln!(
        "{}: precision = {:.4}, recall = {:.4}, f1 = {:.4}",
        args.task, report.overall.precision, report.overall.recall, report.overall.f1
    );
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, seed: u64) -> CmdResult {
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(usage("--eps must be positive"));
    }
    let mut checks = check_primitives(args.eps, seed).map_err(|e| Failure::Runtime(e.into()))?;
    let maml = maml_checks(args.eps, seed).map_err(|e| Failure::Runtime(e.into()))?;
    checks.extend(maml);
    let mut failed = Vec::new();
    let rows: Vec<serde_json::Value> = checks
        .iter()
        .map(|c| {
            let tol = if c.name.contains("closed_form") {
                args.closed_form_tolerance
            } else {
                args.tolerance
            };
            let pass = c.max_rel_error < tol;
            eprintln!("{:<28} {:.3e} {}", c.name, c.max_rel_error, if pass { "ok" } else { "FAIL" });
            if !pass {
                failed.push(c.name.clone());
            }
            json!({ "name": c.name, "max_rel_error": c.max_rel_error, "tolerance": tol, "pass": pass })
        })
        .collect();
    print_json(&json!({ "checks": rows, "failed": failed }));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("over tolerance: {}", failed.join(", "))))
    }
}
