use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_dressing");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("DRESSING_REWRITE_URL")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_MODEL: &str = r#"{"image_size": 32, "codec_patch": 2, "d_model": 8, "heads": 2, "groups": 2, "d_text": 8, "time_dim": 8}"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn base_config(dir: &Path, steps: u64) -> PathBuf {
    let body = format!(
        r#"{{"stage": "base", "steps": {steps}, "batch_size": 2, "lora_rank": 2, "lr": 0.001,
            "dataset_size": 8, "seed": 3, "log_every": 2, "model": {TINY_MODEL}}}"#
    );
    write_config(dir, "base.json", &body)
}

fn train_base(dir: &Path) -> PathBuf {
    let cfg = base_config(dir, 2);
    let out = dir.join("base_run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("checkpoint.dfck")
}

fn losses(run_dir: &Path) -> Vec<(u64, f64)> {
    fs::read_to_string(run_dir.join("losses.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            (v["step"].as_u64().unwrap(), v["loss"].as_f64().unwrap())
        })
        .collect()
}

fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "help text for {name} changed; rerun with UPDATE_GOLDEN=1 if intended");
}

#[test]
fn help_output_is_stable() {
    let top = run(&["--help"]);
    assert_eq!(code(&top), 0);
    golden("help.txt", &stdout(&top));
    for sub in ["gen-data", "train", "sample", "eval", "inspect-params"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        golden(&format!("help_{sub}.txt"), &stdout(&o));
    }
}

#[test]
fn sample_help_shows_sampling_defaults() {
    let text = stdout(&run(&["sample", "--help"]));
    assert!(text.contains("[default: 50]"), "{text}");
    assert!(text.contains("[default: 7.5]"), "{text}");
}

#[test]
fn gen_data_is_deterministic_and_validates_first() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen-data", "--n", "6", "--seed", "9", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "index.json"));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }

    let bad = dir.path().join("bad");
    let o = run(&["gen-data", "--n", "0", "--out", p(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(!bad.exists());
    let o = run(&["gen-data", "--n", "3", "--free-patch-fraction", "1.5", "--out", p(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(!bad.exists());
    let o = run(&["gen-data", "--out", p(&bad)]);
    assert_eq!(code(&o), 2, "missing required flag is a usage error");
}

#[test]
fn inspect_params_reports_the_additive_budget() {
    let o = run(&["inspect-params", "--mode", "full"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("lora ") && l.contains('+')).expect("sum line");
    let nums: Vec<u64> = line
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(nums.len(), 3, "{line}");
    assert_eq!(nums[0] + nums[1], nums[2]);

    let json = |mode: &str| -> Value {
        let o = run(&["inspect-params", "--mode", mode, "--json"]);
        assert_eq!(code(&o), 0);
        serde_json::from_str(&stdout(&o)).unwrap()
    };
    let full = json("full")["trainable"].as_u64().unwrap();
    let lora = json("only-lora")["trainable"].as_u64().unwrap();
    let adapter = json("only-adapter")["trainable"].as_u64().unwrap();
    let ft = json("finetuning")["trainable"].as_u64().unwrap();
    assert_eq!(full, nums[2]);
    assert_eq!(lora + adapter, full);
    assert!(ft > full && full > lora && lora > adapter);
}

#[test]
fn config_errors_name_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"stage": "base", "learning_rate": 0.1}"#);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert!(!out.exists());

    let cfg = write_config(dir.path(), "dressing.json", r#"{"stage": "dressing"}"#);
    let o = run(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2, "dressing stage without a base checkpoint");
    let o = run(&["train", "--config", p(&dir.path().join("nope.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_artifacts_and_resume_reproduces_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config(dir.path(), 6);
    let full = dir.path().join("full");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&full)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.dfck", "config.json", "losses.jsonl", "log.jsonl"] {
        assert!(full.join(f).is_file(), "{f}");
    }
    let trace = losses(&full);
    assert_eq!(trace.len(), 6);

    let first = dir.path().join("first");
    let o = run(&["train", "--config", p(&cfg), "--steps", "3", "--out", p(&first)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let second = dir.path().join("second");
    let ck = first.join("checkpoint.dfck");
    let o = run(&["train", "--config", p(&cfg), "--resume", p(&ck), "--out", p(&second)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stitched: Vec<_> = losses(&first).into_iter().chain(losses(&second)).collect();
    assert_eq!(stitched, trace);
    assert_eq!(
        fs::read(second.join("checkpoint.dfck")).unwrap(),
        fs::read(full.join("checkpoint.dfck")).unwrap()
    );

    let o = run(&["train", "--config", p(&cfg), "--resume", p(&dir.path().join("missing.dfck")), "--out", p(&second)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sample_is_deterministic_and_checks_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_base(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["gen-data", "--n", "2", "--seed", "4", "--out", p(&data)])), 0);
    let index: Value = serde_json::from_str(&fs::read_to_string(data.join("index.json")).unwrap()).unwrap();
    let reference = data.join(index[0]["ref_path"].as_str().unwrap());

    let sample = |name: &str, seed: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let o = run(&[
            "sample", "--checkpoint", p(&ck), "--ref", p(&reference), "--seed", seed, "--steps", "4", "--out", p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("prompt: a person wearing"), "{}", stdout(&o));
        fs::read(out).unwrap()
    };
    let a = sample("a.ppm", "5");
    assert_eq!(a, sample("b.ppm", "5"));
    assert!(a.starts_with(b"P6\n32 32\n255\n"));

    let out = dir.path().join("x.ppm");
    let o = run(&["sample", "--checkpoint", p(&ck), "--ref", p(&reference), "--enrich", "external", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "external enrichment without an endpoint");
    assert!(stderr(&o).contains("DRESSING_REWRITE_URL"));
    let o = run(&["sample", "--checkpoint", p(&dir.path().join("none.dfck")), "--ref", p(&reference), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["sample", "--checkpoint", p(&ck), "--ref", p(&dir.path().join("none.ppm")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["sample", "--checkpoint", p(&ck), "--ref", p(&reference), "--steps", "0", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let junk = dir.path().join("junk.dfck");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(&["sample", "--checkpoint", p(&junk), "--ref", p(&reference), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("at byte"), "{}", stderr(&o));
}

#[test]
fn eval_writes_reports_and_gates_on_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_base(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["gen-data", "--n", "2", "--seed", "8", "--out", p(&data)])), 0);
    let eval = |name: &str, extra: &[&str]| -> (Output, PathBuf) {
        let out = dir.path().join(name);
        let mut args = vec!["eval", "--checkpoint", p(&ck), "--data", p(&data), "--steps", "3", "--out", p(&out)];
        if !extra.contains(&"--seeds") {
            args.extend_from_slice(&["--seeds", "2"]);
        }
        args.extend_from_slice(extra);
        let o = run(&args);
        (o, out)
    };
    let (o, out) = eval("r1", &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2 * 2 * 2);
    assert!(report["meta"].is_object() && report["aggregates"].is_object());
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("texture gap"));

    let (o2, out2) = eval("r2", &[]);
    assert_eq!(code(&o2), 0);
    assert_eq!(fs::read(out.join("report.json")).unwrap(), fs::read(out2.join("report.json")).unwrap());

    let (o, _) = eval("r3", &["--min-texture-gap", "2.0"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let (o, _) = eval("r4", &["--min-texture-gap=-2.0"]);
    assert_eq!(code(&o), 0);
    let (o, out) = eval("r5", &["--seeds", "0"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}
