use std::process::{Command, Output};

fn memsizer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memsizer")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(memsizer(&[]).status.code(), Some(2));
    assert_eq!(memsizer(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(memsizer(&["bench", "--arch", "lstm"]).status.code(), Some(2));
    assert_eq!(memsizer(&["bench", "--lengths", "128,64"]).status.code(), Some(2));
    assert_eq!(memsizer(&["bench", "--set", "k_causal"]).status.code(), Some(2));
    assert_eq!(memsizer(&["bench", "--set", "nonsense=1"]).status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let out = memsizer(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = text(&out.stdout);
    for cmd in ["train", "bench", "verify", "decode"] {
        assert!(help.contains(cmd), "{help}");
    }
}

#[test]
fn bench_writes_one_row_per_arch_and_length() {
    let out = memsizer(&[
        "bench", "--arch", "memsizer,sa", "--lengths", "8,16", "--set", "d=16", "--set", "heads=2",
        "--set", "layers=1", "--set", "ffn_dim=16", "--set", "measured=3", "--set", "warmup=0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], memsizer::bench::CSV_HEADER);
    assert_eq!(lines.len(), 5);
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>(), [("memsizer", "8"), ("memsizer", "16"), ("sa", "8"), ("sa", "16")]);
    for r in &rows {
        assert_eq!(r.len(), 6);
        assert_eq!(r[3], r[4]);
        assert!(r[2].parse::<f64>().unwrap() > 0.0);
    }
    assert_eq!(rows[0][3], rows[1][3]);
    assert_eq!(rows[0][5], rows[1][5]);
    assert_ne!(rows[2][3], rows[3][3]);
}

#[test]
fn train_then_decode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("copy.cfg");
    std::fs::write(
        &cfg,
        "# tiny copy run\narch = memsizer\nvocab = 12\nd = 16\nheads = 2\nlayers = 1\nk_cross = 4\nk_causal = 2\n\
         task = copy\nlength = 4\nsteps = 4\nbatch = 4\neval_interval = 2\neval_batch = 4\n",
    )
    .unwrap();
    let log = dir.path().join("log.csv");
    let ckpt = dir.path().join("m.ckpt");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--log", log.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()];
    let out = memsizer(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,metric_name,metric_value");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,") && lines[1].contains(",token_accuracy,"));

    let input = dir.path().join("in.txt");
    std::fs::write(&input, "3 4 5 6\n7 8 9 10\n").unwrap();
    let out = memsizer(&["decode", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let decoded = text(&out.stdout);
    assert_eq!(decoded.lines().count(), 2);
    for line in decoded.lines() {
        assert!(line.split_whitespace().all(|t| t.parse::<usize>().unwrap() < 12));
    }

    std::fs::write(&input, "3 99\n").unwrap();
    let out = memsizer(&["decode", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_rejects_unknown_keys_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "arch = memsizer\nwarp_factor = 9\n").unwrap();
    let out = memsizer(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("warp_factor"));
    let missing = dir.path().join("none.ckpt");
    let out = memsizer(&["decode", "--checkpoint", missing.to_str().unwrap(), "--input", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
