use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn nalab(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nalab"));
    cmd.current_dir(dir).args(args).env("NALAB_LOG", "warn").env_remove("NALAB_SEED");
    if let Some(s) = env_seed {
        cmd.env("NALAB_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn tiny_config(steps: u64) -> Value {
    json!({
        "data": {"task": "reversal", "vocab_size": 10, "min_len": 2, "max_len": 5,
                 "num_train": 200, "num_val": 40, "seed": 3},
        "model": {"d_model": 16, "num_layers": 1, "num_heads": 2, "d_ff": 32, "max_seq_len": 16},
        "train": {"max_steps": steps, "eval_every": 5, "log_every": 5, "batch_size": 8,
                  "lr": 0.001, "seed": 5, "record_time": false, "bleu_examples": 40},
        "projection": "standard"
    })
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_two_files_and_sidecar_and_reruns_identically() {
    let t = TempDir::new().unwrap();
    let args = [
        "gen-data", "--task", "reversal", "--vocab", "20", "--min-len", "4", "--max-len", "12", "--train", "20000",
        "--val", "1000", "--seed", "7", "--out", "d",
    ];
    ok(&nalab(t.path(), &args, None));
    let first = dir_bytes(&t.path().join("d"));
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["dataset.json", "train.tsv", "val.tsv"]);
    let side = read_json(&t.path().join("d/dataset.json"));
    assert_eq!(side["spec"]["seed"], 7);
    assert_eq!(side["spec"]["vocab_size"], 20);
    assert_eq!(side["num_train"], 20000);
    assert_eq!(side["num_val"], 1000);
    let train = fs::read_to_string(t.path().join("d/train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 20000);
    ok(&nalab(t.path(), &args, None));
    assert_eq!(dir_bytes(&t.path().join("d")), first);
}

#[test]
fn gen_data_rejects_val_beyond_sequence_space() {
    let t = TempDir::new().unwrap();
    let out = nalab(
        t.path(),
        &["gen-data", "--vocab", "7", "--min-len", "1", "--max-len", "2", "--train", "1", "--val", "100", "--out", "d"],
        None,
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation"));
}

#[test]
fn gen_data_seed_precedence() {
    let t = TempDir::new().unwrap();
    let base = ["gen-data", "--vocab", "8", "--min-len", "2", "--max-len", "4", "--train", "20", "--val", "5"];
    let seed_of = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out]);
        ok(&nalab(t.path(), &args, env));
        read_json(&t.path().join(out).join("dataset.json"))["spec"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None, "a"), 42);
    assert_eq!(seed_of(&[], Some("9"), "b"), 9);
    assert_eq!(seed_of(&["--seed", "7"], Some("9"), "c"), 7);
}

#[test]
fn char_mlm_dataset_round_trips_through_train() {
    let t = TempDir::new().unwrap();
    ok(&nalab(t.path(), &["gen-data", "--task", "char-mlm", "--out", "m"], None));
    let side = read_json(&t.path().join("m/dataset.json"));
    let train = fs::read_to_string(t.path().join("m/train.txt")).unwrap();
    assert_eq!(side["num_train"].as_u64().unwrap() as usize, train.chars().count());
    let cfg = json!({
        "data": {"task": "char-mlm", "dir": "m"},
        "model": {"d_model": 16, "num_layers": 1, "num_heads": 2, "d_ff": 32, "max_seq_len": 64},
        "train": {"max_steps": 0, "record_time": false}
    });
    let p = write_json(t.path(), "mlm.json", &cfg);
    ok(&nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "r"], None));
    let csv = fs::read_to_string(t.path().join("r/metrics.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[6], "", "no BLEU for the masked-LM task");
    let ppl: f64 = row[5].parse().unwrap();
    let v = side["vocab"].as_array().unwrap().len() as f64;
    assert!((ppl - v).abs() < 0.1 * v, "untrained ppl {ppl} vs vocab {v}");
}

#[test]
fn zero_step_run_emits_header_and_step_zero_row() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(0));
    ok(&nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "r"], None));
    let csv = fs::read_to_string(t.path().join("r/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "step,seconds,train_loss,eval_loss,eval_accuracy,perplexity,bleu");
    assert!(lines[1].starts_with("0,,,"), "{}", lines[1]);
    for f in ["resolved_config.json", "report.json", "best", "final"] {
        assert!(t.path().join("r").join(f).exists(), "{f}");
    }
}

#[test]
fn projection_flag_beats_config_file() {
    let t = TempDir::new().unwrap();
    let mut cfg = tiny_config(0);
    cfg["projection"] = json!("dlp");
    let p = write_json(t.path(), "c.json", &cfg);
    let out = nalab(
        t.path(),
        &["train", "--config", p.to_str().unwrap(), "--projection", "neural", "--output-dir", "r"],
        None,
    );
    ok(&out);
    let echoed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let resolved = read_json(&t.path().join("r/resolved_config.json"));
    assert_eq!(echoed, resolved);
    assert_eq!(resolved["projection"]["q"], "standard");
    assert_eq!(resolved["projection"]["k"], "neural");
    assert_eq!(resolved["projection"]["v"], "neural");

    ok(&nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "s"], None));
    assert_eq!(read_json(&t.path().join("s/resolved_config.json"))["projection"]["k"], "dlp");
}

#[test]
fn seed_precedence_for_train() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(0));
    let p = p.to_str().unwrap();
    let seeds = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut args = vec!["train", "--config", p, "--output-dir", out];
        args.extend_from_slice(extra);
        ok(&nalab(t.path(), &args, env));
        let r = read_json(&t.path().join(out).join("resolved_config.json"));
        (r["data"]["seed"].as_u64().unwrap(), r["train"]["seed"].as_u64().unwrap())
    };
    assert_eq!(seeds(&[], None, "a"), (3, 5));
    assert_eq!(seeds(&[], Some("11"), "b"), (11, 11));
    assert_eq!(seeds(&["--seed", "13"], Some("11"), "c"), (13, 13));
}

#[test]
fn config_errors_exit_2() {
    let t = TempDir::new().unwrap();
    let mut unknown = tiny_config(0);
    unknown["model"]["d_modle"] = json!(16);
    let mut top = tiny_config(0);
    top["extra"] = json!(true);
    let mut arch = tiny_config(0);
    arch["model"]["architecture"] = json!("encoder");
    let mut heads = tiny_config(0);
    heads["model"]["num_heads"] = json!(3);
    for (i, cfg) in [unknown, top, arch, heads].iter().enumerate() {
        let p = write_json(t.path(), &format!("c{i}.json"), cfg);
        let out = nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "r"], None);
        assert_eq!(code(&out), 2, "case {i}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = nalab(t.path(), &["train", "--config", "missing.json"], None);
    assert_eq!(code(&out), 2);
    let out = nalab(t.path(), &["train", "--config", "c0.json"], Some("abc"));
    assert_eq!(code(&out), 2);
}

#[test]
fn nan_abort_exits_1_and_keeps_best_checkpoint() {
    let t = TempDir::new().unwrap();
    let mut cfg = tiny_config(30);
    cfg["train"]["lr"] = json!(1e300);
    cfg["train"]["grad_clip"] = json!(1e300);
    let p = write_json(t.path(), "c.json", &cfg);
    let out = nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "r"], None);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(t.path().join("r/best/manifest.json").exists());
}

#[test]
fn echoed_config_reproduces_the_run_byte_for_byte() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(20));
    let out = nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "a"], None);
    ok(&out);
    fs::write(t.path().join("echo.json"), &out.stdout).unwrap();
    ok(&nalab(t.path(), &["train", "--config", "echo.json", "--output-dir", "b"], None));
    for f in ["metrics.csv", "report.json"] {
        assert_eq!(fs::read(t.path().join("a").join(f)).unwrap(), fs::read(t.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(dir_bytes(&t.path().join("a/final")), dir_bytes(&t.path().join("b/final")));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(20));
    let p = p.to_str().unwrap();
    ok(&nalab(t.path(), &["train", "--config", p, "--output-dir", "full"], None));
    ok(&nalab(t.path(), &["train", "--config", p, "--output-dir", "part", "--max-steps", "10"], None));
    ok(&nalab(
        t.path(),
        &["train", "--config", p, "--output-dir", "part", "--max-steps", "20", "--resume", "part/final"],
        None,
    ));
    assert_eq!(
        fs::read(t.path().join("full/metrics.csv")).unwrap(),
        fs::read(t.path().join("part/metrics.csv")).unwrap()
    );
    assert_eq!(dir_bytes(&t.path().join("full/final")), dir_bytes(&t.path().join("part/final")));
}

#[test]
fn resume_from_incompatible_checkpoint_exits_3() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(0));
    ok(&nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "a"], None));
    let mut wide = tiny_config(5);
    wide["model"]["d_ff"] = json!(48);
    let q = write_json(t.path(), "w.json", &wide);
    let out = nalab(t.path(), &["train", "--config", q.to_str().unwrap(), "--output-dir", "b", "--resume", "a/final"], None);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_is_deterministic_and_fresh_model_scores_near_zero() {
    let t = TempDir::new().unwrap();
    ok(&nalab(
        t.path(),
        &["gen-data", "--vocab", "20", "--min-len", "4", "--max-len", "12", "--train", "100", "--val", "200", "--out", "d"],
        None,
    ));
    let cfg = json!({"data": {"dir": "d"}, "train": {"max_steps": 0, "record_time": false}});
    let p = write_json(t.path(), "c.json", &cfg);
    ok(&nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "r"], None));
    let first = nalab(t.path(), &["eval", "--checkpoint", "r/final", "--output", "e1.json"], None);
    ok(&first);
    let second = nalab(t.path(), &["eval", "--checkpoint", "r/final", "--data-dir", "d", "--output", "e2.json"], None);
    ok(&second);
    assert_eq!(first.stdout, second.stdout);
    let a = fs::read(t.path().join("e1.json")).unwrap();
    assert_eq!(a, fs::read(t.path().join("e2.json")).unwrap());
    assert_eq!(a, first.stdout);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["examples"], 200);
    assert!(report["bleu"]["bleu"].as_f64().unwrap() < 5.0, "{report}");
    assert_eq!(report["bleu"]["precisions"].as_array().unwrap().len(), 4);
    for key in ["mean_nll", "perplexity", "positions", "accuracy"] {
        assert!(report["perplexity"].get(key).is_some(), "{key}");
    }
}

#[test]
fn eval_on_mismatched_data_exits_3() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(0));
    ok(&nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "r"], None));
    ok(&nalab(t.path(), &["gen-data", "--vocab", "20", "--train", "10", "--val", "10", "--out", "d"], None));
    let out = nalab(t.path(), &["eval", "--checkpoint", "r/final", "--data-dir", "d", "--output", "e.json"], None);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let out = nalab(t.path(), &["eval", "--checkpoint", "nowhere", "--data-dir", "d", "--output", "e.json"], None);
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_covers_every_kind_and_block() {
    let t = TempDir::new().unwrap();
    let out = nalab(t.path(), &["gradcheck"], None);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    for kind in ["standard", "dlp", "neural"] {
        for block in ["attention", "model"] {
            assert!(
                table.lines().any(|l| l.starts_with(kind) && l.split_whitespace().nth(1) == Some(block)),
                "{kind}/{block}"
            );
        }
    }
    assert!(!table.contains("FAIL"));
}

#[test]
fn gradcheck_detects_corrupted_backward_rules() {
    let t = TempDir::new().unwrap();
    for fault in ["relu", "layer-norm", "attention"] {
        let out = nalab(t.path(), &["gradcheck", "--inject-fault", fault], None);
        assert_eq!(code(&out), 1, "{fault}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("worst offenders"), "{fault}: {err}");
    }
}

fn role_delta(d: usize, e: usize) -> usize {
    let h = d * e;
    // d→h linear, LayerNorm over h, h→d linear, minus the d→d linear it replaces.
    (d * h + h) + 2 * h + (h * d + d) - (d * d + d)
}

#[test]
fn compare_emits_three_rows_differing_only_in_projection() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(10));
    let out = nalab(t.path(), &["compare", "--config", p.to_str().unwrap(), "--output-dir", "cmp"], None);
    ok(&out);
    let mut rdr = csv::Reader::from_path(t.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["variant", "bleu", "perplexity", "accuracy", "params", "steps_to_99acc"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["standard", "dlp", "neural"]);
    let params: Vec<usize> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    // Three attention blocks (encoder self, decoder self, cross), keys and values replaced.
    let delta = 3 * 2 * role_delta(16, 2);
    assert_eq!(params[1] - params[0], delta);
    assert_eq!(params[2], params[1]);
    for r in &rows {
        let bleu: f64 = r[1].parse().unwrap();
        assert!((0.0..=100.0).contains(&bleu));
    }

    let mut stripped = Vec::new();
    for (name, n) in names.iter().zip(&params) {
        let dir = t.path().join("cmp").join(name);
        assert!(dir.join("metrics.csv").exists());
        let report = read_json(&dir.join("report.json"));
        assert_eq!(report["params"].as_u64().unwrap() as usize, *n);
        let mut cfg = read_json(&dir.join("resolved_config.json"));
        let m = cfg.as_object_mut().unwrap();
        assert_eq!(m.remove("output_dir").unwrap(), json!(Path::new("cmp").join(name)));
        let proj = m.remove("projection").unwrap();
        assert_eq!(proj["k"], *name);
        assert_eq!(proj["q"], "standard");
        stripped.push(cfg);
    }
    assert_eq!(stripped[0], stripped[1]);
    assert_eq!(stripped[0], stripped[2]);

    let report = read_json(&t.path().join("cmp/compare_report.json"));
    assert_eq!(report["ordering"]["hypothesis"], "neural >= dlp ~= standard");
    assert!(report["ordering"]["note"].is_string());
    let mut entries: Vec<String> = fs::read_dir(t.path().join("cmp"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, ["compare.csv", "compare_report.json", "dlp", "neural", "standard"]);
}

#[test]
fn compare_marks_a_failed_variant_and_finishes_the_rest() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(2));
    fs::create_dir_all(t.path().join("cmp")).unwrap();
    fs::write(t.path().join("cmp/dlp"), "in the way").unwrap();
    let out = nalab(t.path(), &["compare", "--config", p.to_str().unwrap(), "--output-dir", "cmp"], None);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dlp"));
    let csv = fs::read_to_string(t.path().join("cmp/compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("dlp,,,,"), "{}", lines[2]);
    assert!(t.path().join("cmp/neural/report.json").exists());
    let report = read_json(&t.path().join("cmp/compare_report.json"));
    assert!(report["variants"][1]["error"].is_string());
    assert!(report["ordering"]["holds"].is_null());
}

#[test]
fn train_writes_only_inside_its_output_directory() {
    let t = TempDir::new().unwrap();
    let p = write_json(t.path(), "c.json", &tiny_config(5));
    ok(&nalab(t.path(), &["train", "--config", p.to_str().unwrap(), "--output-dir", "r"], None));
    let mut entries: Vec<String> = fs::read_dir(t.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, ["c.json", "r"]);
}
