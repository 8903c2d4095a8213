use std::path::Path;
use std::process::{Command, Output};

fn gplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gplab"))
        .args(args)
        .env_remove("GPLAB_SEED")
        .output()
        .expect("spawn gplab")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn run_row(extra: &[&str]) -> Vec<String> {
    let mut args = vec!["run", "--epochs", "2", "--model-size", "8"];
    args.extend_from_slice(extra);
    let stdout = ok(&gplab(&args));
    let mut lines = stdout.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "schema_version");
    lines.next().unwrap().split(',').map(String::from).collect()
}

const ELIGIBLE: usize = 17;
const TOTAL: usize = 16;

#[test]
fn make_dataset_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let stdout = ok(&gplab(&[
            "make-dataset", "--kind", "ba", "--n", "2048", "--seed", "1", "--out", out.to_str().unwrap(),
        ]));
        assert!(stdout.contains("2048 vertices, 4092 edges"), "{stdout}");
    }
    for name in ["graph.meta", "graph.edges", "graph.labels"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let edges = std::fs::read_to_string(a.join("graph.edges")).unwrap();
    assert_eq!(edges.lines().count(), 4092);
}

#[test]
fn malformed_edge_line_names_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    std::fs::write(src.join("graph.meta"), "n=4\ndirected=false\n").unwrap();
    std::fs::write(src.join("graph.edges"), "0\t1\n1\t2\n2\tx\n").unwrap();
    let out = gplab(&[
        "make-dataset", "--kind", "load", "--from", src.to_str().unwrap(),
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("graph.edges:3"), "{err}");
}

#[test]
fn run_is_deterministic() {
    let a = run_row(&["--task", "classify", "--level", "O0", "--n", "256", "--seed", "0"]);
    let b = run_row(&["--task", "classify", "--level", "O0", "--n", "256", "--seed", "0"]);
    let strip = |mut r: Vec<String>| {
        r.remove(15);
        r
    };
    assert_eq!(strip(a), strip(b));
}

#[test]
fn seed_env_fallback() {
    let out = Command::new(env!("CARGO_BIN_EXE_gplab"))
        .args(["run", "--epochs", "1", "--n", "64", "--model-size", "8"])
        .env("GPLAB_SEED", "7")
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert_eq!(stdout.lines().nth(1).unwrap().split(',').nth(7), Some("7"));
}

#[test]
fn padding_controls_eligibility() {
    let unpadded = run_row(&["--level", "O1", "--no-padding", "--n", "2052"]);
    assert_eq!(unpadded[ELIGIBLE], "0");
    assert_ne!(unpadded[TOTAL], "0");
    let padded = run_row(&["--level", "O1", "--padding", "--n", "2052"]);
    assert_eq!(padded[3], "2052");
    assert_ne!(padded[ELIGIBLE], "0");
}

#[test]
fn link_run_reports_auc() {
    let row = run_row(&["--task", "link", "--level", "O2", "--n", "128"]);
    assert_eq!(row[1], "link");
    assert!(row[10].is_empty());
    for col in [11, 12, 13] {
        let v: f64 = row[col].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

fn count_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn sweep_resumes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let args = [
        "sweep", "--task", "classify", "--level", "O0,O1", "--n", "64", "--model-size", "8",
        "--seed", "0,1", "--identity", "--epochs", "2", "--out", csv.to_str().unwrap(),
    ];
    let first = ok(&gplab(&args));
    assert!(first.contains("4 rows written, 0 resumed"), "{first}");
    assert_eq!(count_rows(&csv), 4);
    let second = ok(&gplab(&args));
    assert!(second.contains("0 rows written, 4 resumed"), "{second}");
    assert_eq!(count_rows(&csv), 4);

    let out = dir.path().join("report");
    let listed = ok(&gplab(&["report", csv.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(listed.lines().count(), 6);
    let deltas = std::fs::read_to_string(out.join("delta_table.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 2);
}

#[test]
fn rejects_unknown_level() {
    let out = gplab(&["run", "--level", "O7"]);
    assert!(!out.status.success());
}
