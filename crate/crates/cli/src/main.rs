mod svg;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use seqdiff::checkpoint::Checkpoint;
use seqdiff::config::RunConfig;
use seqdiff::corpus::Tokenizer;
use seqdiff::eval::evaluate;
use seqdiff::inference::{translate, TraceRecord};
use seqdiff::parallel::Execution;
use seqdiff::schedule::schedule_csv;
use seqdiff::train::{model_from_checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "seqdiff", version, about = "Sequence-to-sequence text diffusion")]
struct Cli {
    /// Process items one at a time instead of using the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Generate one output line per input line.
    Generate(GenerateArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Export the noise schedule as CSV and SVG.
    PlotSchedule(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set max_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSONL log path; defaults to `train.jsonl` in the output directory.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop after this step, checkpointing there; `--resume` continues.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// One source per line; anything after a tab is ignored.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of MBR candidates.
    #[arg(long)]
    mbr: Option<usize>,
    #[arg(long)]
    p1: Option<f64>,
    #[arg(long)]
    p2: Option<f64>,
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// JSONL sidecar with every candidate and its risk.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// JSONL per-step decoded estimates of the selected candidates.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_tokenizer, default_value = "whitespace")]
    tokenizer: Tokenizer,
    /// Record this checkpoint's config digest in the report.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated positions; all positions by default.
    #[arg(long, value_delimiter = ',')]
    positions: Vec<usize>,
}

fn parse_tokenizer(s: &str) -> Result<Tokenizer, String> {
    match s {
        "whitespace" => Ok(Tokenizer::Whitespace),
        "character" => Ok(Tokenizer::Character),
        other => Err(format!("unknown tokenizer {other:?}")),
    }
}

#[derive(Serialize)]
struct CandidateLine<'a> {
    line: usize,
    index: usize,
    seed: u64,
    text: &'a str,
    risk: Option<f64>,
    selected: bool,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    line: usize,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| seqdiff::Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn train(args: TrainArgs, execution: Execution) -> Result<()> {
    let config = RunConfig::load(&args.config, &args.overrides)?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, config)?,
        None => Trainer::new(config)?,
    };
    trainer.execution = execution;
    let log_path = args
        .log
        .unwrap_or_else(|| RunConfig::resolve(&trainer.config.out_dir).join("train.jsonl"));
    let mut log = if args.resume.is_some() {
        BufWriter::new(File::options().create(true).append(true).open(&log_path).with_context(|| format!("opening {}", log_path.display()))?)
    } else {
        create(&log_path)?
    };
    log::info!(
        "training from step {} to {} on {} pairs",
        trainer.step,
        trainer.config.max_steps,
        trainer.corpus().len()
    );
    let result = trainer.run(&mut log, args.until);
    log.flush()?;
    result?;
    log::info!("wrote {}", trainer.checkpoint_path().display());
    Ok(())
}

fn generate(args: GenerateArgs, execution: Execution) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = model_from_checkpoint(&ckpt)?;
    let mut cfg = ckpt.config.sample_config();
    if let Some(n) = args.mbr {
        cfg.mbr_candidates = n;
    }
    if let Some(p) = args.p1 {
        cfg.prior_p1 = p;
    }
    if let Some(p) = args.p2 {
        cfg.prior_p2 = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.clamp |= args.clamp;
    cfg.trace = args.trace.is_some();
    cfg.validate()?;

    let sources: Vec<String> = read_lines(&args.input)?
        .into_iter()
        .map(|l| l.split('\t').next().unwrap_or_default().to_owned())
        .collect();
    let results = translate(&model, &ckpt.schedule, &ckpt.vocab, &sources, &cfg, ckpt.config.truncate, execution);

    let mut out = create(&args.out)?;
    let mut sidecar = args.candidates.as_deref().map(create).transpose()?;
    let mut trace = args.trace.as_deref().map(create).transpose()?;
    let mut failures = 0;
    for (line, result) in results.iter().enumerate() {
        match result {
            Ok(tr) => {
                writeln!(out, "{}", tr.best().text)?;
                if let Some(w) = sidecar.as_mut() {
                    for (index, c) in tr.candidates.iter().enumerate() {
                        serde_json::to_writer(&mut *w, &CandidateLine {
                            line: line + 1,
                            index,
                            seed: c.seed,
                            text: &c.text,
                            risk: c.risk,
                            selected: index == tr.selected,
                        })?;
                        w.write_all(b"\n")?;
                    }
                }
                if let Some(w) = trace.as_mut() {
                    for record in &tr.best().trace {
                        serde_json::to_writer(&mut *w, &TraceLine { line: line + 1, record })?;
                        w.write_all(b"\n")?;
                    }
                }
            }
            Err(e) => {
                failures += 1;
                log::error!("line {}: {e}", line + 1);
                writeln!(out)?;
            }
        }
    }
    out.flush()?;
    if let Some(mut w) = sidecar {
        w.flush()?;
    }
    if let Some(mut w) = trace {
        w.flush()?;
    }
    log::info!("generated {} lines, {failures} failed", results.len());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let hyps = read_lines(&args.hyp)?;
    let refs = read_lines(&args.reference)?;
    let mut report = evaluate(&hyps, &refs, args.tokenizer)?;
    if let Some(path) = &args.ckpt {
        report.config_digest = Some(Checkpoint::load(path)?.digest);
    }
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn plot_schedule(args: PlotArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let n = ckpt.schedule.positions();
    let positions: Vec<usize> = if args.positions.is_empty() {
        (0..n).collect()
    } else {
        args.positions.clone()
    };
    if let Some(&bad) = positions.iter().find(|&&i| i >= n) {
        bail!(seqdiff::Error::InvalidArgument(format!("position {bad} is out of range for {n} positions")));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let csv = schedule_csv(&ckpt.schedule, Some(&ckpt.ledger), &positions)?;
    fs::write(args.out.join("schedule.csv"), csv)?;
    fs::write(args.out.join("schedule.svg"), svg::schedule_chart(&ckpt.schedule, &positions))?;
    log::info!("wrote schedule.csv and schedule.svg to {}", args.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<seqdiff::Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let execution = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match cli.command {
        Command::Train(a) => train(a, execution),
        Command::Generate(a) => generate(a, execution),
        Command::Eval(a) => eval(a),
        Command::PlotSchedule(a) => plot_schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
