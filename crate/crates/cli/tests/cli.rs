use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/stub_okvqa.toml")
}

fn vqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqa"))
        .args(args)
        .env_remove("VQA_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn run_writes_report_and_records() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fixture_config();
    let o = vqa(&["run", "-c", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["results.csv", "results.json", "records.jsonl"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.path().join("records.jsonl")).unwrap().lines().count(), 3);

    let rescored = tempfile::tempdir().unwrap();
    let records = out.path().join("records.jsonl");
    let o = vqa(&[
        "score-only",
        "-c",
        cfg.to_str().unwrap(),
        "--records",
        records.to_str().unwrap(),
        "--out",
        rescored.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let a = fs::read_to_string(out.path().join("results.csv")).unwrap();
    let b = fs::read_to_string(rescored.path().join("results.csv")).unwrap();
    let acc = |s: &str| s.lines().nth(1).unwrap().split(',').nth(5).unwrap().to_string();
    assert_eq!(acc(&a), acc(&b));
}

#[test]
fn ablate_and_sweep() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fixture_config();
    let o = vqa(&["ablate", "-c", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(out.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let o = vqa(&[
        "sweep",
        "-c",
        cfg.to_str().unwrap(),
        "--param",
        "num-captions",
        "--values",
        "5,10,20,30",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let series = fs::read_to_string(out.path().join("sweep_num_captions.csv")).unwrap();
    assert_eq!(series.lines().count(), 5);
}

#[test]
fn inspect_dumps_stages() {
    let cfg = fixture_config();
    let o = vqa(&["inspect", "10020", "-c", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let s = String::from_utf8_lossy(&o.stdout);
    for section in ["[captions]", "[summary]", "[qa pairs]", "[prompt]", "[answer]"] {
        assert!(s.contains(section), "missing {section}:\n{s}");
    }
    assert_eq!(vqa(&["inspect", "nope", "-c", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let cfg = fixture_config();
    let c = cfg.to_str().unwrap();
    assert_eq!(vqa(&["run", "-c", c, "--rerank-keep", "0"]).status.code(), Some(2));
    assert_eq!(vqa(&["run", "-c", c, "--captioner", "nonsense"]).status.code(), Some(2));
    let bad = tempfile::tempdir().unwrap();
    let questions = bad.path().join("q.json");
    fs::write(&questions, "{\"questions\": [{\"question_id\": 1}]}").unwrap();
    let o = vqa(&["run", "-c", c, "--questions", questions.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    let o = vqa(&["run", "-c", c, "--strict", "--captioner", "exec:exit 1", "--out", bad.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
}
