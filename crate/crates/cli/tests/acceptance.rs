//! End-to-end acceptance suite. Prints one `PASS`/`FAIL` line per criterion
//! and fails if any criterion fails. Lines go straight to the process stderr
//! so they show up without `--nocapture`.

use std::io::Write as _;
use std::process::Command;
use std::time::{Duration, Instant};

use memsizer::bench::{self, BenchConfig};
use memsizer::baseline::attention_param_count;
use memsizer::memsizer::{memsizer_param_count, MemSizerConfig};
use memsizer::model::{greedy_decode, AttentionKind, Model, ModelConfig, EOS, FIRST_TOKEN};
use memsizer::train::{self, TaskKind, Task, TrainConfig, TrainOutputs};
use memsizer::verify::{self, PropertyResult};

const PARALLEL_BUDGET: Duration = Duration::from_secs(60);
const MULTIHEAD_BUDGET: Duration = Duration::from_secs(30);
const GRADIENT_BUDGET: Duration = Duration::from_secs(300);
const INVARIANCE_BUDGET: Duration = Duration::from_secs(30);
const MEMORY_BUDGET: Duration = Duration::from_secs(30);
const COMPLEXITY_BUDGET: Duration = Duration::from_secs(120);
const THROUGHPUT_BUDGET: Duration = Duration::from_secs(600);
const LEARNING_BUDGET: Duration = Duration::from_secs(1800);

const MEMSIZER_THROUGHPUT_RATIO: f64 = 0.6;
const SA_THROUGHPUT_RATIO: f64 = 0.5;
const TARGET_ACCURACY: f64 = 0.99;
const STEP_BUDGET: usize = 5000;
const FROZEN_ACCURACY_GAP: f64 = 0.05;
const ROUND_TRIP_ACCURACY: f64 = 0.9;

const MEMSIZER_PARAMS_1024: usize = 1_607_744;
const SA_LAYER_PARAMS_1024: usize = 4_198_400;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, passed: bool, criterion: &str, detail: String) {
        let line = format!("{} {criterion}: {detail}", if passed { "PASS" } else { "FAIL" });
        let _ = writeln!(std::io::stderr().lock(), "{line}");
        self.lines.push((passed, line));
    }

    fn properties(&mut self, criterion: &str, results: &[PropertyResult], took: Duration, budget: Duration) {
        let ok = results.iter().all(|r| r.passed) && took <= budget;
        let detail: Vec<String> = results.iter().map(|r| r.to_string()).collect();
        self.record(ok, criterion, format!("[{}] in {:.1}s (budget {}s)", detail.join("; "), took.as_secs_f64(), budget.as_secs()));
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn copy_config(kind: AttentionKind, freeze_keys: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, 16, 64, 2, 2);
    cfg.block.k_cross = 8;
    cfg.block.k_causal = 4;
    cfg.block.freeze_keys = freeze_keys;
    cfg
}

fn copy_train_config(stop_early: bool) -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        beta1: 0.9,
        beta2: 0.98,
        label_smoothing: 0.1,
        batch: 64,
        steps: STEP_BUDGET,
        stop_at: stop_early.then_some(TARGET_ACCURACY),
        ..TrainConfig::default()
    }
}

struct Trained {
    model: Model,
    /// First evaluation step at or above the target accuracy.
    reached: Option<usize>,
    accuracy: f64,
    steps: usize,
    took: Duration,
}

/// Memsizer runs use the whole step budget; the baselines stop once they
/// reach the target.
fn train_copy(kind: AttentionKind, freeze_keys: bool) -> Result<Trained, String> {
    let task = Task::new(TaskKind::Copy, 16, 20);
    let mut model = Model::new(copy_config(kind, freeze_keys)).map_err(|e| e.to_string())?;
    let cfg = copy_train_config(kind != AttentionKind::MemSizer);
    let (log, took) = timed(|| train::train(&mut model, &task, &cfg, &TrainOutputs::default()));
    let log = log.map_err(|e| e.to_string())?;
    Ok(Trained {
        reached: log.rows.iter().find(|r| r.metric_value >= TARGET_ACCURACY).map(|r| r.step),
        accuracy: log.last_metric().unwrap_or(0.0),
        steps: log.rows.last().map_or(0, |r| r.step),
        model,
        took,
    })
}

fn throughput(report: &mut Report) {
    let cfg = BenchConfig::default();
    let (records, took) = timed(|| bench::measure_generation(&cfg));
    let records = match records {
        Ok(r) => r,
        Err(e) => return report.record(false, "7 throughput shape", format!("error: {e}")),
    };
    let tps = |kind: AttentionKind, len: usize| {
        records
            .iter()
            .find(|r| r.arch == kind && r.length == len)
            .map_or(0.0, |r| r.tokens_per_sec)
    };
    let ms = tps(AttentionKind::MemSizer, 1024) / tps(AttentionKind::MemSizer, 64);
    let sa = tps(AttentionKind::Sa, 1024) / tps(AttentionKind::Sa, 64);
    let ok = ms >= MEMSIZER_THROUGHPUT_RATIO && sa <= SA_THROUGHPUT_RATIO && took <= THROUGHPUT_BUDGET;
    report.record(
        ok,
        "7 throughput shape",
        format!(
            "memsizer 1024/64 = {ms:.3} (>= {MEMSIZER_THROUGHPUT_RATIO}), sa 1024/64 = {sa:.3} (<= {SA_THROUGHPUT_RATIO}) in {:.1}s",
            took.as_secs_f64()
        ),
    );
}

fn copy_sequences(count: usize, len: usize) -> Vec<Vec<usize>> {
    (0..count)
        .map(|i| (0..len).map(|j| FIRST_TOKEN + (i * 7 + j * j * 5 + j) % 13).collect())
        .collect()
}

/// Decodes held-out copy inputs through the `decode` command.
fn cli_round_trip(model: &Model) -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("copy.ckpt");
    model.save(&ckpt).map_err(|e| e.to_string())?;
    let inputs = copy_sequences(8, 20);
    let text: Vec<String> = inputs
        .iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
        .collect();
    let input = dir.path().join("input.txt");
    std::fs::write(&input, text.join("\n")).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_memsizer"))
        .arg("decode")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--input")
        .arg(&input)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("decode exited with {}", out.status));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let cli: Vec<&str> = stdout.lines().collect();
    let mut agree = cli.len() == inputs.len();
    let (mut matched, mut total) = (0usize, 0usize);
    for (i, s) in inputs.iter().enumerate() {
        let mut lib = greedy_decode(model, s, 2 * s.len() + 2, EOS).map_err(|e| e.to_string())?;
        if lib.last() == Some(&EOS) {
            lib.pop();
        }
        let words: Vec<String> = lib.iter().map(usize::to_string).collect();
        agree &= cli.get(i) == Some(&words.join(" ").as_str());
        matched += s.iter().zip(&lib).filter(|(a, b)| a == b).count();
        total += s.len().max(lib.len());
    }
    let acc = matched as f64 / total as f64;
    let detail = format!("cli matches library: {agree}; copied token accuracy {acc:.4} (>= {ROUND_TRIP_ACCURACY})");
    if agree && acc >= ROUND_TRIP_ACCURACY {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn learnability(report: &mut Report) {
    let mut memsizer_acc = None;
    let mut memsizer_model = None;
    let mut spent = Duration::ZERO;
    for kind in AttentionKind::ALL {
        let name = format!("8 learnability {kind}");
        match train_copy(kind, false) {
            Ok(t) => {
                spent += t.took;
                let ok = t.reached.is_some_and(|s| s <= STEP_BUDGET) && spent <= LEARNING_BUDGET;
                report.record(
                    ok,
                    &name,
                    format!(
                        "reached {TARGET_ACCURACY} at step {:?}; final accuracy {:.4} after {} steps; {:.0}s",
                        t.reached,
                        t.accuracy,
                        t.steps,
                        t.took.as_secs_f64()
                    ),
                );
                if kind == AttentionKind::MemSizer {
                    memsizer_acc = Some(t.accuracy);
                    memsizer_model = Some(t.model);
                }
            }
            Err(e) => report.record(false, &name, format!("error: {e}")),
        }
    }

    match &memsizer_model {
        Some(m) => match cli_round_trip(m) {
            Ok(d) => report.record(true, "8 copy round trip via decode", d),
            Err(e) => report.record(false, "8 copy round trip via decode", e),
        },
        None => report.record(false, "8 copy round trip via decode", "no trained model".into()),
    }

    let initial = match Model::new(copy_config(AttentionKind::MemSizer, true)) {
        Ok(m) => m,
        Err(e) => return report.record(false, "9 frozen keys", format!("error: {e}")),
    };
    match train_copy(AttentionKind::MemSizer, true) {
        Ok(t) => {
            let keys = initial.key_params();
            let constant = !keys.is_empty()
                && keys.iter().all(|&id| {
                    let (a, b) = (initial.store.get(id).data(), t.model.store.get(id).data());
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                });
            let gap = memsizer_acc.map_or(f64::INFINITY, |a| (a - t.accuracy).abs());
            report.record(
                constant && gap <= FROZEN_ACCURACY_GAP,
                "9 frozen keys",
                format!(
                    "{} key tensors bitwise constant: {constant}; accuracy {:.4}, gap {gap:.4} (<= {FROZEN_ACCURACY_GAP})",
                    keys.len(),
                    t.accuracy
                ),
            );
        }
        Err(e) => report.record(false, "9 frozen keys", format!("error: {e}")),
    }
}

fn parameters(report: &mut Report) {
    let ms = memsizer_param_count(&MemSizerConfig::new(16, 32, 1024));
    let sa = attention_param_count(1024);
    let build = |kind| {
        let mut c = ModelConfig::new(kind, 1000, 64, 4, 6);
        c.block.k_cross = 32;
        c.block.k_causal = 16;
        c
    };
    let (mc, sc) = (build(AttentionKind::MemSizer), build(AttentionKind::Sa));
    let predicted: usize = mc
        .attention_sites()
        .iter()
        .map(|(_, k)| attention_param_count(64) - memsizer_param_count(&MemSizerConfig::new(4, *k, 64)))
        .sum();
    let per_layer_enc = attention_param_count(64) - memsizer_param_count(&MemSizerConfig::new(4, 32, 64));
    let per_layer_dec = 2 * attention_param_count(64)
        - memsizer_param_count(&MemSizerConfig::new(4, 16, 64))
        - memsizer_param_count(&MemSizerConfig::new(4, 32, 64));
    let by_layer = 6 * per_layer_enc + 6 * per_layer_dec;
    let built = Model::new(mc.clone()).map(|m| m.param_count()).ok();
    let built_sa = Model::new(sc.clone()).map(|m| m.param_count()).ok();
    let (m_total, s_total) = (mc.param_count(), sc.param_count());
    let ok = ms == MEMSIZER_PARAMS_1024
        && sa == SA_LAYER_PARAMS_1024
        && m_total < s_total
        && s_total - m_total == predicted
        && predicted == by_layer
        && built == Some(m_total)
        && built_sa == Some(s_total);
    report.record(
        ok,
        "10 parameter accounting",
        format!("memsizer {ms}, sa layer {sa}, 6-layer models {m_total} vs {s_total} (difference {}, predicted {predicted})", s_total.saturating_sub(m_total)),
    );
}

fn cli_verify(report: &mut Report) {
    let out = Command::new(env!("CARGO_BIN_EXE_memsizer")).args(["verify", "--quick"]).output();
    let out = match out {
        Ok(o) => o,
        Err(e) => return report.record(false, "11 verify exit status", format!("error: {e}")),
    };
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    let expected = verify::run(true).len();
    let all_pass = lines.len() == expected && lines.iter().all(|l| l.starts_with("PASS "));
    let failing = [
        PropertyResult { name: "alpha_rows_sum_to_one", passed: true, measured: String::new() },
        PropertyResult { name: "sa_muladds_growth", passed: false, measured: String::new() },
    ];
    let (code, names) = verify::outcome(&failing);
    let ok = out.status.code() == Some(0) && all_pass && code == 1 && names == ["sa_muladds_growth"];
    report.record(
        ok,
        "11 verify exit status",
        format!(
            "exit {:?} with {}/{expected} PASS lines; injected failure gives exit {code} naming {names:?}",
            out.status.code(),
            lines.iter().filter(|l| l.starts_with("PASS ")).count()
        ),
    );
}

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };

    let (r, t) = timed(|| verify::parallel_recurrent(false));
    report.properties("1 parallel/recurrent equivalence", &[r], t, PARALLEL_BUDGET);
    let (r, t) = timed(|| verify::multihead_fast_path(false));
    report.properties("2 multi-head fast path", &[r], t, MULTIHEAD_BUDGET);
    let (r, t) = timed(verify::gradient_checks);
    report.properties("3 gradient correctness", &r, t, GRADIENT_BUDGET);
    let (r, t) = timed(|| verify::invariances(false));
    report.properties("4 invariance suite", &r, t, INVARIANCE_BUDGET);
    let (r, t) = timed(verify::constant_memory);
    report.properties("5 constant decode memory", &r, t, MEMORY_BUDGET);
    let (r, t) = timed(|| verify::complexity(false));
    report.properties("6 complexity counters", &r, t, COMPLEXITY_BUDGET);

    throughput(&mut report);
    learnability(&mut report);
    parameters(&mut report);
    cli_verify(&mut report);

    let failed: Vec<&String> = report.lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
