use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const FAMILY_ORDER: [&str; 8] = ["BO", "MF", "CS_MF", "CSR_PC", "CSR_CF", "CSR_HY", "MLP", "LSTM"];

fn gradecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradecast"))
        .args(args)
        .output()
        .expect("spawn gradecast")
}

fn ok(args: &[&str]) -> Vec<u8> {
    let out = gradecast(args);
    assert!(out.status.success(), "gradecast {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// A bench-small dataset with every family trained on the bench grid.
struct Fixture {
    data: PathBuf,
    models: PathBuf,
    results: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = scratch("fixture");
        let f = Fixture {
            data: root.join("data"),
            models: root.join("models"),
            results: root.join("results"),
        };
        ok(&["synth", "--spec", "bench-small", "--out", &path(&f.data)]);
        ok(&["train", "--data", &path(&f.data), "--models", &path(&f.models), "--grid", "bench"]);
        ok(&[
            "evaluate",
            "--data",
            &path(&f.data),
            "--models",
            &path(&f.models),
            "--out",
            &path(&f.results),
        ]);
        ok(&[
            "calibrate",
            "--data",
            &path(&f.data),
            "--models",
            &path(&f.models),
            "--out",
            &path(&f.results),
        ]);
        f
    })
}

fn first_student(data: &Path) -> String {
    let grades = fs::read_to_string(data.join("grades.csv")).unwrap();
    grades.lines().nth(1).unwrap().split(',').next().unwrap().to_string()
}

fn assert_exit(out: &Output, code: i32, class: &str) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    if !class.is_empty() {
        assert_eq!(stderr.lines().count(), 1, "one-line diagnostic expected: {stderr}");
        assert!(stderr.starts_with(&format!("error[{class}]")), "stderr: {stderr}");
    }
}

#[test]
fn help_exits_zero() {
    let out = gradecast(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("calibrate"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(gradecast(&[]).status.code(), Some(2));
    assert_eq!(gradecast(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gradecast(&["calibrate", "--family", "GBM"]).status.code(), Some(2));
    assert_exit(&gradecast(&["evaluate", "--term", "soon"]), 2, "UsageError");
    assert_exit(
        &gradecast(&["synth", "--spec", "huge", "--out", &path(&scratch("bad-spec"))]),
        2,
        "InvalidSpec",
    );
}

#[test]
fn config_file_is_validated() {
    let dir = scratch("config");
    let cfg = dir.join("run.json");
    fs::write(&cfg, r#"{"seed": 3, "colour": "blue"}"#).unwrap();
    assert_exit(
        &gradecast(&["--config", &path(&cfg), "synth", "--out", &path(&dir.join("data"))]),
        2,
        "UsageError",
    );
}

#[test]
fn config_file_supplies_paths_and_seed() {
    let f = fixture();
    let dir = scratch("config-ok");
    let cfg = dir.join("run.json");
    let body = serde_json::json!({"seed": 7, "data": f.data, "models": f.models, "out": dir.join("out")});
    fs::write(&cfg, body.to_string()).unwrap();
    let stdout = ok(&["--config", &path(&cfg), "explain", "--course", "C401"]);
    let v: Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(v["provenance"]["seed"], 7);
    assert_eq!(v["target"], "C401");
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = scratch("missing");
    let out = gradecast(&[
        "train",
        "--data",
        &path(&dir.join("nothing")),
        "--models",
        &path(&dir.join("models")),
    ]);
    assert_exit(&out, 3, "IoError");
}

#[test]
fn malformed_grades_are_a_data_error() {
    let dir = scratch("malformed");
    fs::write(dir.join("grades.csv"), "student_id,course_id,term,grade\ns1,C1,0,Q\n").unwrap();
    fs::write(dir.join("catalog.json"), r#"[{"target_course": "C2", "priors": ["C1"]}]"#).unwrap();
    let out = gradecast(&["train", "--data", &path(&dir), "--models", &path(&dir.join("models"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn insufficient_history_is_a_training_error() {
    let dir = scratch("thin");
    let mut csv = String::from("student_id,course_id,term,grade\n");
    for s in 0..5 {
        csv.push_str(&format!("s{s},C1,0,3\ns{s},C2,1,3.33\n"));
    }
    fs::write(dir.join("grades.csv"), csv).unwrap();
    fs::write(dir.join("catalog.json"), r#"[{"target_course": "C2", "priors": ["C1"]}]"#).unwrap();
    let out = gradecast(&["train", "--data", &path(&dir), "--models", &path(&dir.join("models"))]);
    assert_exit(&out, 4, "InsufficientHistory");
}

#[test]
fn unknown_course_is_a_data_error() {
    let f = fixture();
    let student = first_student(&f.data);
    let out = gradecast(&[
        "predict",
        "--data",
        &path(&f.data),
        "--models",
        &path(&f.models),
        "--student",
        &student,
        "--course",
        "C999",
    ]);
    assert_exit(&out, 3, "UnknownCourse");
}

/// Rows of the first table in `evaluate.txt`: (family, MAE).
fn pooled_rows(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .skip_while(|l| !l.starts_with("model"))
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            (cols[0].to_string(), cols[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn evaluate_table_lists_families_in_order() {
    let f = fixture();
    let text = fs::read_to_string(f.results.join("evaluate.txt")).unwrap();
    assert!(text.starts_with("# gradecast 0.1.0 evaluate seed=42"));
    let rows = pooled_rows(&text);
    let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, FAMILY_ORDER);
    let mae = |name: &str| rows.iter().find(|(n, _)| n == name).unwrap().1;
    assert!(mae("MLP") <= mae("CSR_PC"), "{text}");
    assert!(mae("LSTM") <= mae("CSR_PC"), "{text}");
}

#[test]
fn evaluate_json_records_provenance() {
    let f = fixture();
    let v: Value = serde_json::from_slice(&fs::read(f.results.join("evaluate.json")).unwrap()).unwrap();
    assert_eq!(v["provenance"]["seed"], 42);
    assert_eq!(v["provenance"]["command"], "evaluate");
}

#[test]
fn calibrate_writes_csv_with_headers() {
    let f = fixture();
    for (file, header) in [
        ("calibration.csv", "level,empirical"),
        ("error_at_k.csv", "k,error"),
        ("risk.csv", "cut,fnr,fpr,coverage"),
    ] {
        let text = fs::read_to_string(f.results.join(file)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# gradecast 0.1.0 calibrate seed=42"), "{file}");
        assert_eq!(lines.next().unwrap(), header, "{file}");
        assert!(lines.count() >= 10, "{file}");
    }
    let calibration = fs::read_to_string(f.results.join("calibration.csv")).unwrap();
    assert_eq!(calibration.lines().count(), 2 + 19);
}

#[test]
fn explain_student_returns_at_most_five_sorted_entries() {
    let f = fixture();
    let student = first_student(&f.data);
    let out = ok(&[
        "explain",
        "--data",
        &path(&f.data),
        "--models",
        &path(&f.models),
        "--student",
        &student,
        "--course",
        "C401",
        "--top",
        "5",
    ]);
    let v: Value = serde_json::from_slice(&out).unwrap();
    let entries = v["entries"].as_array().unwrap();
    assert!(!entries.is_empty() && entries.len() <= 5);
    let influences: Vec<f64> = entries.iter().map(|e| e["influence"].as_f64().unwrap()).collect();
    assert!(influences.windows(2).all(|w| w[0] >= w[1]), "{influences:?}");
}

#[test]
fn explain_collective_ranks_priors() {
    let f = fixture();
    let out = ok(&[
        "explain",
        "--data",
        &path(&f.data),
        "--models",
        &path(&f.models),
        "--course",
        "C402",
        "--top",
        "3",
    ]);
    let v: Value = serde_json::from_slice(&out).unwrap();
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    let influences: Vec<f64> = entries.iter().map(|e| e["influence"].as_f64().unwrap()).collect();
    assert!(influences.windows(2).all(|w| w[0] >= w[1]));
    assert!(entries.iter().all(|e| e["n_students"].as_u64().unwrap() > 0));
}

#[test]
fn predict_reports_interval_around_mean() {
    let f = fixture();
    let student = first_student(&f.data);
    let out = ok(&[
        "predict",
        "--data",
        &path(&f.data),
        "--models",
        &path(&f.models),
        "--student",
        &student,
        "--course",
        "C401",
        "--level",
        "0.9",
    ]);
    let v: Value = serde_json::from_slice(&out).unwrap();
    let mean = v["mean"].as_f64().unwrap();
    assert!(v["interval"]["lower"].as_f64().unwrap() < mean && mean < v["interval"]["upper"].as_f64().unwrap());
    assert_eq!(v["interval"]["level"], 0.9);
    assert_eq!(v["at_risk"], mean < 2.0);
}

#[test]
fn commands_are_idempotent() {
    let f = fixture();
    let dir = scratch("idempotent");
    let again = dir.join("results");
    ok(&[
        "evaluate",
        "--data",
        &path(&f.data),
        "--models",
        &path(&f.models),
        "--out",
        &path(&again),
    ]);
    ok(&[
        "calibrate",
        "--data",
        &path(&f.data),
        "--models",
        &path(&f.models),
        "--out",
        &path(&again),
    ]);
    for file in [
        "evaluate.txt",
        "evaluate.json",
        "calibration.csv",
        "error_at_k.csv",
        "risk.csv",
        "calibrate.json",
    ] {
        assert_eq!(
            fs::read(f.results.join(file)).unwrap(),
            fs::read(again.join(file)).unwrap(),
            "{file}"
        );
    }
    let student = first_student(&f.data);
    let args = [
        "predict",
        "--data",
        &path(&f.data),
        "--models",
        &path(&f.models),
        "--student",
        &student,
        "--course",
        "C403",
    ];
    assert_eq!(ok(&args), ok(&args));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = scratch("synth");
    ok(&["--seed", "5", "synth", "--out", &path(&dir.join("a"))]);
    ok(&["--seed", "5", "synth", "--out", &path(&dir.join("b"))]);
    ok(&["--seed", "6", "synth", "--out", &path(&dir.join("c"))]);
    let read = |d: &str| fs::read(dir.join(d).join("grades.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
