use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use memsizer::bench::{self, BenchConfig};
use memsizer::config::KeyValues;
use memsizer::model::{greedy_decode, AttentionKind, Model, ModelConfig, EOS};
use memsizer::train::{self, TaskKind, Task, TrainConfig, TrainOutputs};
use memsizer::{verify, Error};

/// Memory-attention transformer toolkit: training, benchmarks, checks.
#[derive(Parser)]
#[command(name = "memsizer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training log (CSV).
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
    },
    /// Generation throughput, decode-state bytes and multiply-add counts.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated architectures (memsizer, sa, elu).
        #[arg(long)]
        arch: Option<String>,
        /// Comma-separated, ascending sequence lengths.
        #[arg(long)]
        lengths: Option<String>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print slot-count and head-count sweeps.
        #[arg(long)]
        sweeps: bool,
    },
    /// Run the invariant suite; exit 1 if any property fails.
    Verify {
        #[arg(long)]
        quick: bool,
    },
    /// Greedy-decode every line of a token file with a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sequence per line, whitespace-separated token ids.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run_train(config: &Path, log: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let mut kv = KeyValues::read(config)?;
    let base = ModelConfig::new(AttentionKind::MemSizer, 16, 64, 2, 2);
    let model_cfg = base.take_from(&mut kv)?;
    let task = Task::new(TaskKind::Copy, model_cfg.vocab, 20).take_from(&mut kv)?;
    let train_cfg = TrainConfig::default().take_from(&mut kv)?;
    kv.finish()?;
    let mut model = Model::new(model_cfg)?;
    let outputs = TrainOutputs {
        checkpoint: Some(checkpoint.to_path_buf()),
    };
    let result = train::train(&mut model, &task, &train_cfg, &outputs);
    let log_rows = match result {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("last good parameters saved to {}", checkpoint.display());
            return Err(Failure::Runtime(e.to_string()));
        }
    };
    write_file(log, &log_rows.to_csv())?;
    if let Some(r) = log_rows.rows.last() {
        println!("step {} loss {:.4} {} {:.4}", r.step, r.loss, r.metric_name, r.metric_value);
    }
    println!("log: {}  checkpoint: {}", log.display(), checkpoint.display());
    Ok(())
}

fn run_bench(
    config: Option<&Path>,
    arch: Option<&str>,
    lengths: Option<&str>,
    set: &[String],
    out: Option<&Path>,
    sweeps: bool,
) -> Result<(), Failure> {
    let mut kv = match config {
        Some(p) => KeyValues::read(p)?,
        None => KeyValues::new(),
    };
    if let Some(a) = arch {
        kv.set("arch", a);
    }
    if let Some(l) = lengths {
        kv.set("lengths", l);
    }
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    let cfg = BenchConfig::default().take_from(&mut kv)?;
    kv.finish()?;
    let records = bench::measure_generation(&cfg)?;
    let csv = bench::to_csv(&records);
    match out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    eprint!("{}", bench::summary(&records));
    if sweeps {
        let len = cfg.lengths[0];
        for (k, r) in bench::k_sweep(&cfg, &[2, 4, 8, 16, 32], len)? {
            eprintln!("k={k:<3} attention muladds/token {}", r.muladds_per_token);
        }
        for (h, r) in bench::r_sweep(&cfg, &[1, 2, 4, 8], len)? {
            eprintln!(
                "r={h:<3} weights/token {} values/token {}",
                r.per_token(memsizer::counter::Category::AttentionWeights),
                r.per_token(memsizer::counter::Category::ValueRead)
            );
        }
    }
    Ok(())
}

fn run_verify(quick: bool) -> Result<(), Failure> {
    let results = verify::run(quick);
    for r in &results {
        println!("{r}");
    }
    let (_, failed) = verify::outcome(&results);
    if failed.is_empty() {
        Ok(())
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Err(Failure::Verification)
    }
}

fn parse_tokens(line: &str, vocab: usize) -> Result<Vec<usize>, Failure> {
    line.split_whitespace()
        .map(|t| {
            let v: usize = t.parse().map_err(|_| Failure::Usage(format!("bad token {t:?}")))?;
            if v >= vocab {
                return Err(Failure::Usage(format!("token {v} outside vocab {vocab}")));
            }
            Ok(v)
        })
        .collect()
}

fn run_decode(checkpoint: &Path, input: &Path, max_len: Option<usize>) -> Result<(), Failure> {
    let model = Model::load(checkpoint)?;
    let text = fs::read_to_string(input).map_err(|e| Failure::Runtime(format!("{}: {e}", input.display())))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let src = parse_tokens(line, model.cfg.vocab)?;
        let limit = max_len.unwrap_or(2 * src.len() + 2);
        let mut out = greedy_decode(&model, &src, limit, EOS)?;
        if out.last() == Some(&EOS) {
            out.pop();
        }
        let words: Vec<String> = out.iter().map(usize::to_string).collect();
        println!("{}", words.join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train { config, log, checkpoint } => run_train(config, log, checkpoint),
        Command::Bench {
            config,
            arch,
            lengths,
            set,
            out,
            sweeps,
        } => run_bench(config.as_deref(), arch.as_deref(), lengths.as_deref(), set, out.as_deref(), *sweeps),
        Command::Verify { quick } => run_verify(*quick),
        Command::Decode {
            checkpoint,
            input,
            max_len,
        } => run_decode(checkpoint, input, *max_len),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            eprintln!("run `memsizer --help` for usage");
            ExitCode::from(2)
        }
    }
}
