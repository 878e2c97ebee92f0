use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn seqdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = seqdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    seqdiff(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a tiny config into `dir` with extra keys merged in.
fn config(dir: &Path, extra: Value) -> PathBuf {
    let mut base = serde_json::json!({
        "task": "copy",
        "synth_size": 40,
        "synth_symbols": 6,
        "synth_min_len": 2,
        "synth_max_len": 4,
        "max_source": 6,
        "max_target": 6,
        "embed_dim": 4,
        "hidden": 8,
        "heads": 2,
        "encoder_layers": 1,
        "decoder_layers": 1,
        "diffusion_steps": 20,
        "batch_size": 4,
        "max_steps": 12,
        "warmup_steps": 2,
        "learning_rate": 0.01,
        "schedule_update_every": 5,
        "schedule_stride": 2,
        "min_coverage": 0.0,
        "checkpoint_every": 4,
        "out_dir": dir.join("run"),
    });
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, base.to_string()).unwrap();
    path
}

fn events(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn trained(dir: &Path, extra: Value) -> PathBuf {
    let cfg = config(dir, extra);
    ok(&["train", "--config", s(&cfg)]);
    dir.join("run/checkpoint.bin")
}

#[test]
fn schedule_updates_happen_on_cadence() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), serde_json::json!({"max_steps": 250, "schedule_update_every": 100, "checkpoint_every": 1000}));
    ok(&["train", "--config", s(&cfg)]);
    let log = events(&dir.path().join("run/train.jsonl"));
    let updates: Vec<u64> = log
        .iter()
        .filter(|e| e["event"] == "schedule_update")
        .map(|e| e["step"].as_u64().unwrap())
        .collect();
    assert_eq!(updates, vec![100, 200]);
    let steps = log.iter().filter(|e| e["event"] == "step").count();
    assert_eq!(steps, 250);
    for key in ["total", "mse", "mu_t", "anchor", "rounding_nll", "lr"] {
        assert!(log[0][key].is_number(), "{key}");
    }
}

#[test]
fn overrides_apply_and_unknown_keys_fail() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), serde_json::json!({}));
    ok(&["train", "--config", s(&cfg), "--set", "max_steps=3"]);
    let log = events(&dir.path().join("run/train.jsonl"));
    assert_eq!(log.iter().filter(|e| e["event"] == "step").count(), 3);
    assert_eq!(code(&["train", "--config", s(&cfg), "--set", "max_stpes=3"]), 1);
}

#[test]
fn interrupted_training_resumes_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), serde_json::json!({}));
    let ckpt = dir.path().join("run/checkpoint.bin");
    let log = dir.path().join("run/train.jsonl");
    ok(&["train", "--config", s(&cfg)]);
    let whole = fs::read(&ckpt).unwrap();
    let whole_log = fs::read_to_string(&log).unwrap();
    fs::remove_dir_all(dir.path().join("run")).unwrap();

    ok(&["train", "--config", s(&cfg), "--until", "6"]);
    ok(&["train", "--config", s(&cfg), "--resume", s(&ckpt)]);
    assert_eq!(fs::read(&ckpt).unwrap(), whole);
    let step_lines = |t: &str| t.lines().filter(|l| l.contains("\"event\":\"step\"")).map(str::to_owned).collect::<Vec<_>>();
    assert_eq!(step_lines(&fs::read_to_string(&log).unwrap()), step_lines(&whole_log));

    let other = config(dir.path(), serde_json::json!({"seed": 5}));
    assert_eq!(code(&["train", "--config", s(&other), "--resume", s(&ckpt)]), 1);
}

#[test]
fn generation_is_deterministic_and_line_aligned() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), serde_json::json!({}));
    let input = dir.path().join("in.txt");
    fs::write(&input, "a b\nc d e\nb\n").unwrap();
    let out1 = dir.path().join("out1.txt");
    let out2 = dir.path().join("out2.txt");
    let single = dir.path().join("single.txt");
    let side = dir.path().join("cands.jsonl");
    ok(&["generate", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&out1), "--mbr", "3", "--candidates", s(&side)]);
    ok(&["generate", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&out2), "--mbr", "3", "--sequential"]);
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
    assert_eq!(fs::read_to_string(&out1).unwrap().lines().count(), 3);
    let cands = events(&side);
    assert_eq!(cands.len(), 9);
    for line in 1..=3u64 {
        assert_eq!(cands.iter().filter(|c| c["line"] == line && c["selected"] == true).count(), 1);
    }

    ok(&["generate", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&single), "--mbr", "1"]);
    let firsts: Vec<String> = cands
        .iter()
        .filter(|c| c["index"] == 0)
        .map(|c| c["text"].as_str().unwrap().to_owned())
        .collect();
    let single_lines: Vec<String> = fs::read_to_string(&single).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(single_lines, firsts);
}

#[test]
fn bad_input_lines_do_not_stop_generation() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), serde_json::json!({}));
    let input = dir.path().join("in.txt");
    fs::write(&input, "a b\na b c d e f g h i\nc\n").unwrap();
    let out = dir.path().join("out.txt");
    let trace = dir.path().join("trace.jsonl");
    ok(&["generate", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&out), "--trace", s(&trace)]);
    let lines: Vec<String> = fs::read_to_string(&out).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");
    let records = events(&trace);
    assert_eq!(records.len(), 40);
    assert_eq!(records[0]["t"], 20);
    assert!(records[0]["decoded_argmax_text"].is_string());
}

fn matches_shape(value: &Value, shape: &Value) -> bool {
    let (Value::Object(v), Value::Object(s)) = (value, shape) else {
        return false;
    };
    v.len() == s.len()
        && s.iter().all(|(key, kinds)| {
            let Some(field) = v.get(key) else { return false };
            kinds.as_str().unwrap().split('|').any(|kind| match kind {
                "number" => field.is_number(),
                "integer" => field.is_u64(),
                "string" => field.is_string(),
                "null" => field.is_null(),
                _ => false,
            })
        })
}

#[test]
fn eval_reports_match_the_published_shape() {
    let dir = TempDir::new().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let refs = dir.path().join("ref.txt");
    let shuffled = dir.path().join("shuffled.txt");
    fs::write(&hyp, "a b c d e\nf g h\ni j k l\n").unwrap();
    fs::write(&refs, "a b c d e\nf g h\ni j k l\n").unwrap();
    fs::write(&shuffled, "f g h\ni j k l\na b c d e\n").unwrap();
    let shape: Value =
        serde_json::from_str(&fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metric_report.shape.json")).unwrap())
            .unwrap();

    let same: Value = serde_json::from_slice(&ok(&["eval", "--hyp", s(&hyp), "--ref", s(&refs)]).stdout).unwrap();
    assert!(matches_shape(&same, &shape), "{same}");
    assert_eq!(same["bleu"], 1.0);
    assert_eq!(same["exact_match"], 1.0);

    let report = dir.path().join("report.json");
    ok(&["eval", "--hyp", s(&hyp), "--ref", s(&shuffled), "--out", s(&report)]);
    let worse: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(matches_shape(&worse, &shape));
    assert!(worse["exact_match"].as_f64().unwrap() < 1.0);

    fs::write(&shuffled, "f g h\n").unwrap();
    assert_eq!(code(&["eval", "--hyp", s(&hyp), "--ref", s(&shuffled)]), 2);
}

#[test]
fn eval_records_checkpoint_digest() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), serde_json::json!({"max_steps": 1}));
    let hyp = dir.path().join("hyp.txt");
    fs::write(&hyp, "a b\n").unwrap();
    let out: Value = serde_json::from_slice(&ok(&["eval", "--hyp", s(&hyp), "--ref", s(&hyp), "--ckpt", s(&ckpt)]).stdout).unwrap();
    assert_eq!(out["config_digest"].as_str().unwrap().len(), 64);
}

fn curves(csv: &str) -> Vec<Vec<f64>> {
    let mut by_pos: Vec<Vec<f64>> = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let i: usize = f[1].parse().unwrap();
        if by_pos.len() <= i {
            by_pos.resize(i + 1, Vec::new());
        }
        by_pos[i].push(f[2].parse().unwrap());
    }
    by_pos
}

#[test]
fn fresh_schedule_curves_coincide() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), serde_json::json!({"max_steps": 1, "adaptive_schedule": false}));
    let out = dir.path().join("plot");
    ok(&["plot-schedule", "--ckpt", s(&ckpt), "--out", s(&out), "--positions", "0,2,5"]);
    let csv = fs::read_to_string(out.join("schedule.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,i,alpha_bar,loss_mean");
    assert_eq!(csv.lines().count() - 1, 21 * 3);
    let c = curves(&csv);
    assert_eq!(c[0], c[2]);
    assert_eq!(c[0], c[5]);
    let svg = fs::read_to_string(out.join("schedule.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert!(svg.contains("diffusion step t") && svg.contains("alpha_bar"));
}

#[test]
fn trained_schedule_curves_diverge_by_position() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), serde_json::json!({"synth_min_len": 1, "max_steps": 40, "schedule_update_every": 20}));
    let out = dir.path().join("plot");
    ok(&["plot-schedule", "--ckpt", s(&ckpt), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("schedule.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 21 * 6);
    let c = curves(&csv);
    assert!(c.iter().any(|col| col != &c[0]));
    assert_eq!(code(&["plot-schedule", "--ckpt", s(&ckpt), "--out", s(&out), "--positions", "9"]), 1);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["generate", "--ckpt", "x"]), 1);
    assert_eq!(code(&["--help"]), 0);

    let missing = config(dir.path(), serde_json::json!({"task": null, "train_path": dir.path().join("nope.tsv")}));
    assert_eq!(code(&["train", "--config", s(&missing)]), 2);
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["plot-schedule", "--ckpt", s(&junk), "--out", s(dir.path())]), 2);

    let cfg = config(dir.path(), serde_json::json!({"learning_rate": 1e30, "warmup_steps": 0, "checkpoint_every": 1}));
    assert_eq!(code(&["train", "--config", s(&cfg)]), 3);
    let kept = dir.path().join("run/checkpoint.bin");
    assert!(kept.exists(), "last good checkpoint retained");
    let ckpt_ok = seqdiff(&["plot-schedule", "--ckpt", s(&kept), "--out", s(&dir.path().join("p"))]);
    assert!(ckpt_ok.status.success());
}

#[test]
fn tsv_corpora_train_end_to_end() {
    let dir = TempDir::new().unwrap();
    let tsv = dir.path().join("train.tsv");
    fs::write(&tsv, "the cat\tle chat\nthe dog\tle chien\na cat\tun chat\n").unwrap();
    let ckpt = trained(dir.path(), serde_json::json!({"task": null, "train_path": tsv, "dev_path": tsv, "max_steps": 4, "checkpoint_every": 2}));
    assert!(ckpt.exists());
    assert!(dir.path().join("run/best.bin").exists());
    let log = events(&dir.path().join("run/train.jsonl"));
    assert_eq!(log.iter().filter(|e| e["event"] == "dev_eval").count(), 2);
}
