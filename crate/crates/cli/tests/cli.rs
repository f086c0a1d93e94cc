use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::CommandFactory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use cot4det_cli::Cli;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn fixture(name: &str) -> String {
    format!("{FIXTURES}/{name}")
}

fn run(args: &[&str]) -> i32 {
    cot4det_cli::run(std::iter::once("cot4det").chain(args.iter().copied()))
}

fn binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cot4det"))
        .args(args)
        .env_remove("COT4DET_ENDPOINT")
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Random COCO document: `images` 640x480 images, each with 1..=4 objects
/// drawn from `categories` classes.
fn synthetic_coco(images: usize, categories: usize, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anns = Vec::new();
    for img in 1..=images {
        for _ in 0..rng.gen_range(1..=4) {
            let w = rng.gen_range(10.0..150.0_f64).round();
            let h = rng.gen_range(10.0..150.0_f64).round();
            let x = rng.gen_range(0.0..(640.0 - w)).round();
            let y = rng.gen_range(0.0..(480.0 - h)).round();
            anns.push(json!({
                "id": anns.len() + 1,
                "image_id": img,
                "category_id": rng.gen_range(1..=categories),
                "bbox": [x, y, w, h],
            }));
        }
    }
    json!({
        "images": (1..=images).map(|i| json!({"id": i, "file_name": format!("{i}.jpg"), "width": 640, "height": 480})).collect::<Vec<_>>(),
        "annotations": anns,
        "categories": (1..=categories).map(|i| json!({"id": i, "name": format!("thing {i}")})).collect::<Vec<_>>(),
    })
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string(v).unwrap()).unwrap();
    path
}

#[test]
fn help_documents_every_flag() {
    let mut cmd = Cli::command();
    cmd.build();
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .filter(|n| n != "help")
        .collect();
    assert_eq!(names, ["convert", "mix", "prompts", "eval", "simulate", "report"]);
    for sub in cmd.get_subcommands_mut() {
        let longs: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long()).map(str::to_string).collect();
        let help = sub.render_long_help().to_string();
        for l in longs {
            assert!(help.contains(&format!("--{l}")), "{}: --{l} missing from help", sub.get_name());
        }
    }
}

#[test]
fn convert_counts_images_with_categories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.jsonl");
    assert_eq!(run(&["convert", "--coco", &fixture("convert.json"), "--out", &p(&out)]), 0);
    let recs = lines(&out);
    // the empty fourth image still gets one sampled negative
    assert_eq!(recs.len(), 4);
    assert!(recs.iter().all(|r| r["granularity"] == "word" && r["source"] == "convert"));
    let empty = recs.iter().find(|r| r["image_id"] == 4).unwrap();
    assert_eq!(empty["categories"].as_array().unwrap().len(), 1);
    assert!(empty["answer"].as_str().unwrap().ends_with("Grounding Boxes:\n[]"));

    assert_eq!(run(&["convert", "--coco", &fixture("convert.json"), "--neg-ratio", "0", "--out", &p(&out)]), 0);
    let recs = lines(&out);
    assert_eq!(recs.len(), 3);
    for r in &recs {
        let prompt = r["prompt"].as_str().unwrap();
        assert!(prompt.starts_with("<image>\n Locate every "));
    }
}

#[test]
fn convert_refexp_filters_granularity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rec.jsonl");
    let input = fixture("refexp.jsonl");
    assert_eq!(run(&["convert", "--refexp", &input, "--granularity", "phrase", "--out", &p(&out)]), 0);
    let recs = lines(&out);
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r["granularity"] == "phrase"));
    assert_eq!(run(&["convert", "--refexp", &input, "--out", &p(&out)]), 0);
    assert_eq!(lines(&out).len(), 4);
    let sentence = &lines(&out)[3];
    // commas inside an expression would split the prompt list
    assert!(!sentence["prompt"].as_str().unwrap().contains("sofa,"));
    assert_eq!(run(&["convert", "--refexp", &input, "--granularity", "word", "--out", &p(&out)]), 2);
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let out = binary(&["prompts", "--coco", "/nonexistent/ann.json", "--out", "/tmp/x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/ann.json"));
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(binary(&["eval", "--mock"]).status.code(), Some(2));
    assert_eq!(binary(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn weights_off_one_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_json(dir.path(), "w.json", &json!({"a": 0.5, "b": 0.4}));
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "{\"x\":1}\n").unwrap();
    let args = [
        "mix".to_string(),
        "--weights".into(),
        p(&w),
        "--corpus".into(),
        format!("a={}", p(&corpus)),
        "--corpus".into(),
        format!("b={}", p(&corpus)),
        "--total".into(),
        "10".into(),
        "--out".into(),
        p(&dir.path().join("m.jsonl")),
    ];
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = binary(&argv);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights sum to 0.9"));

    let mut normalized = argv.clone();
    normalized.push("--normalize");
    assert_eq!(run(&normalized), 0);
    let drawn = lines(&dir.path().join("m.jsonl"));
    assert_eq!(drawn.len(), 10);
    assert!(drawn.iter().all(|d| d["record"] == json!({"x": 1})));
}

#[test]
fn reference_preset_needs_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, "{}\n").unwrap();
    let tags = cot4det_cli::load_weights("reference").unwrap();
    assert_eq!(tags.len(), 13);
    let mut args = vec!["mix".to_string(), "--weights".into(), "reference".into(), "--total".into(), "5".into()];
    for t in &tags {
        args.push("--corpus".into());
        args.push(format!("{}={}", t.tag, p(&corpus)));
    }
    args.push("--out".into());
    args.push(p(&dir.path().join("m.jsonl")));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(run(&argv), 2);
    let mut normalized = argv.clone();
    normalized.push("--normalize");
    assert_eq!(run(&normalized), 0);
}

#[test]
fn perfect_predictions_score_100() {
    let dir = tempfile::tempdir().unwrap();
    let ann = fixture("stub3/annotations.json");
    let prompts = dir.path().join("prompts.jsonl");
    assert_eq!(run(&["prompts", "--coco", &ann, "--setting", "gt", "--out", &p(&prompts)]), 0);
    // feed the reference answers back as predictions
    let preds = dir.path().join("preds.jsonl");
    let body: String = lines(&prompts)
        .iter()
        .map(|r| json!({"image_id": r["image_id"], "response": r["answer"]}).to_string() + "\n")
        .collect();
    fs::write(&preds, body).unwrap();
    let out = dir.path().join("run");
    assert_eq!(
        run(&["eval", "--coco", &ann, "--setting", "gt", "--predictions", &p(&preds), "--out", &p(&out)]),
        0
    );
    let table = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(table.contains("100.0  100.0  100.0"), "{table}");
}

#[test]
fn stored_answers_match_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let answers: Value = serde_json::from_str(&fs::read_to_string(fixture("stub3/answers.json")).unwrap()).unwrap();
    let preds = dir.path().join("preds.jsonl");
    let body: String = (1..=3)
        .map(|i| json!({"image_id": i, "response": answers[format!("img{i}.jpg")]}).to_string() + "\n")
        .collect();
    fs::write(&preds, body).unwrap();
    let out = dir.path().join("run");
    let ann = fixture("stub3/annotations.json");
    let args = ["eval", "--coco", &ann, "--setting", "gt", "--policy", "lenient", "--predictions", &p(&preds), "--out", &p(&out)];
    assert_eq!(run(&args), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["true_positives"], 4);
    assert_eq!(report["false_positives"], 1);
    assert_eq!(report["false_negatives"], 1);
    assert!((report["map"].as_f64().unwrap() - 84.0 / 101.0).abs() < 1e-12);
}

#[test]
fn full_setting_logs_vocabulary_length() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_json(dir.path(), "coco80.json", &synthetic_coco(6, 80, 1));
    let out = binary(&["eval", "--coco", &p(&ann), "--mock", "--setting", "full", "--out", &p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("prompt category list length 80 for every image"), "{stderr}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("full"), "{stdout}");
}

#[test]
fn abort_past_half_exits_1_with_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let answers: Value = serde_json::from_str(&fs::read_to_string(fixture("stub3/answers.json")).unwrap()).unwrap();
    let preds = dir.path().join("preds.jsonl");
    fs::write(&preds, json!({"image_id": 1, "response": answers["img1.jpg"]}).to_string() + "\n").unwrap();
    let out = dir.path().join("run");
    let ann = fixture("stub3/annotations.json");
    let status = binary(&["eval", "--coco", &ann, "--setting", "gt", "--predictions", &p(&preds), "--out", &p(&out)]);
    assert_eq!(status.status.code(), Some(1));
    assert!(out.join("report.json").exists());
    assert_eq!(fs::read_to_string(out.join("failures.jsonl")).unwrap().lines().count(), 2);
}

fn simulate_rows(dir: &Path, ann: &Path, extra: &[&str]) -> Vec<Value> {
    let out = dir.join("sim");
    let mut args = vec!["simulate", "--coco"];
    let ann = p(ann);
    let out_s = p(&out);
    args.push(&ann);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", &out_s]);
    assert_eq!(run(&args), 0);
    serde_json::from_str::<Value>(&fs::read_to_string(out.join("simulate.json")).unwrap())
        .unwrap()
        .as_array()
        .unwrap()
        .clone()
}

#[test]
fn simulate_without_faults_is_perfect_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_json(dir.path(), "c.json", &synthetic_coco(20, 8, 2));
    let rows = simulate_rows(dir.path(), &ann, &[]);
    assert_eq!(rows.len(), 4);
    let table = fs::read_to_string(dir.path().join("sim/simulate.txt")).unwrap();
    let body: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(body.len(), 4);
    for line in body {
        let cells: Vec<&str> = line.split_whitespace().skip(2).collect();
        assert_eq!(cells, ["100.0"; 4], "{line}");
    }
}

#[test]
fn repair_removes_hallucinations() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_json(dir.path(), "c.json", &synthetic_coco(5, 10, 3));
    let rows = simulate_rows(dir.path(), &ann, &["--hallucination-rate", "0.5", "--seed", "4"]);
    let get = |cot: bool, policy: &str| {
        rows.iter()
            .find(|r| r["cot"] == cot && r["policy"] == policy)
            .map(|r| r["report"]["precision"].as_f64().unwrap())
            .unwrap()
    };
    assert!(get(true, "repair") > get(true, "lenient"));
    assert_eq!(get(true, "repair"), 1.0);
}

#[test]
fn report_merges_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ann = fixture("stub3/annotations.json");
    let mut paths = Vec::new();
    for policy in ["lenient", "repair"] {
        let out = dir.path().join(policy);
        let args = ["eval", "--coco", &ann, "--mock", "--dup-rate", "1", "--policy", policy, "--out", &p(&out)];
        assert_eq!(run(&args), 0);
        paths.push(p(&out.join("report.json")));
    }
    let table = dir.path().join("table.txt");
    assert_eq!(run(&["report", &paths[0], &paths[1], "--out", &p(&table)]), 0);
    let text = fs::read_to_string(table).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("full") && rows[1].contains("lenient"));
    assert!(rows[2].contains("repair") && rows[2].contains("100.0  100.0  100.0"));
}

#[test]
fn referring_expressions_are_scored() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rec");
    assert_eq!(run(&["eval", "--refexp", &fixture("refexp.jsonl"), "--mock", "--out", &p(&out)]), 0);
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("Acc@0.5"), "{text}");
    let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, ["rec", "repair", "4", "100.0"], "{text}");
}
