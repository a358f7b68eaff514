use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn attnlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn tiny(name: &str, variant: Value, steps: usize) -> Value {
    json!({
        "name": name,
        "model": {
            "d_model": 16, "heads": 2, "d_k": 8, "d_v": 8, "n_layers": 1,
            "variant": variant,
            "positions": { "kind": "agf", "agf_alpha": 1.0, "pcm_v": true },
            "causal": true, "d_ff": 32, "vocab": 8
        },
        "train": { "steps": steps, "batch": 4, "seed": 5, "eval_every": 5 },
        "task": { "kind": "copy", "vocab": 8, "content_len": 3, "seed": 2, "n_train": 64, "n_valid": 16 }
    })
}

fn write_config(dir: &Path, file: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(file);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn csv_total_bytes(csv: &str) -> usize {
    let total = csv.lines().find(|l| l.contains(",total,")).unwrap();
    total.split(',').nth(3).unwrap().parse().unwrap()
}

#[test]
fn cache_report_worked_numbers() {
    let qkv = attnlab(&[
        "cache-report",
        "--variant",
        "qkv",
        "--d-model",
        "1024",
        "--heads",
        "16",
        "--format",
        "csv",
    ]);
    assert!(qkv.status.success());
    assert_eq!(csv_total_bytes(&stdout(&qkv)), 4096);

    let mla = attnlab(&[
        "cache-report",
        "--variant",
        "mla",
        "--d-latent",
        "128",
        "--d-model",
        "1024",
        "--heads",
        "16",
        "--precision-bytes",
        "2",
        "--format",
        "csv",
    ]);
    assert!(mla.status.success(), "{}", stderr(&mla));
    assert_eq!(csv_total_bytes(&stdout(&mla)), 256);

    let table = attnlab(&["cache-report", "--variant", "gqa", "--groups", "2"]);
    assert!(stdout(&table).contains("bytes/token/layer"));
}

#[test]
fn cache_report_rejects_bad_input() {
    let unknown = attnlab(&["cache-report", "--variant", "qqq"]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = attnlab(&["cache-report", "--variant", "gqa"]);
    assert_eq!(missing.status.code(), Some(2));
    let uneven = attnlab(&["cache-report", "--variant", "gqa", "--groups", "3"]);
    assert_eq!(uneven.status.code(), Some(2));
    assert!(stderr(&uneven).contains("divide"), "{}", stderr(&uneven));
}

#[test]
fn gradcheck_matrix_and_fault() {
    let all = attnlab(&["gradcheck", "--all-variants"]);
    assert!(all.status.success(), "{}", stdout(&all));
    let out = stdout(&all);
    assert!(out.starts_with("# seed=0"));
    assert_eq!(out.lines().filter(|l| l.ends_with("pass")).count(), 30);

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("g", json!({"kind": "qv"}), 1));
    let faulty = attnlab(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--inject-fault",
    ]);
    assert_eq!(faulty.status.code(), Some(1));
    let ok = attnlab(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(ok.status.success());
}

#[test]
fn train_writes_reproducible_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &tiny("t", json!({"kind": "qv_ka", "d_ctx": 4}), 10),
    );
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = attnlab(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.csv", "summary.json", "weights.json", "config.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("# seed=5 run=t"));
    assert_eq!(
        lines.next(),
        Some("step,train_loss,valid_loss,valid_acc,mean_attn_entropy")
    );
    assert_eq!(lines.count(), 3); // steps 0, 5, 10

    let e1 = attnlab(&["entropy", "--run", a.to_str().unwrap()]);
    let e2 = attnlab(&["entropy", "--run", b.to_str().unwrap()]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert_eq!(e1.stdout, e2.stdout);
    // inputs are 2 * content_len = 6 tokens long
    let bound = 6f64.ln();
    for line in stdout(&e1).lines().skip(2) {
        let h: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=bound).contains(&h));
    }
}

#[test]
fn zero_steps_is_one_chance_level_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("z", json!({"kind": "qkv"}), 0));
    let out = dir.path().join("run");
    let o = attnlab(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(2).collect();
    assert_eq!(rows.len(), 1);
    let fields: Vec<f64> = rows[0].split(',').map(|f| f.parse().unwrap()).collect();
    // initial loss near ln(vocab), accuracy near 1/vocab
    assert!((fields[2] - 8f64.ln()).abs() < 0.1 * 8f64.ln());
    assert!(fields[3] < 0.4);
}

#[test]
fn divergence_exits_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("d", json!({"kind": "qkv"}), 50);
    cfg["train"]["lr"] = json!(1e300);
    let cfg = write_config(dir.path(), "c.json", &cfg);
    let o = attnlab(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("u", json!({"kind": "qkv"}), 1);
    cfg["model"]["dmodel"] = json!(3);
    let bad = write_config(dir.path(), "bad.json", &cfg);
    let o = attnlab(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let missing = attnlab(&[
        "entropy",
        "--run",
        dir.path().join("nope").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn compare_tables_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.json", &tiny("qv", json!({"kind": "qv"}), 5));
    let b = write_config(
        dir.path(),
        "b.json",
        &tiny("qkv", json!({"kind": "qkv"}), 5),
    );
    let out = dir.path().join("cmp");
    let o = attnlab(&[
        "compare",
        "--configs",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("QV ") && lines[2].starts_with("QKV "));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().nth(1), Some("mode,crafts,final_valid_acc"));
    assert!(out.join("qv/metrics.csv").exists());
    assert!(fs::read_to_string(out.join("diffusion.csv"))
        .unwrap()
        .contains("qkv,l0h1,"));

    let dup = attnlab(&[
        "compare",
        "--configs",
        a.to_str().unwrap(),
        a.to_str().unwrap(),
    ]);
    assert_eq!(dup.status.code(), Some(2));
}
