use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn knockoffs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knockoffs"))
        .args(args)
        .current_dir(repo_root())
        .output()
        .expect("binary runs")
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_level_reports_json_error() {
    let out = knockoffs(&["simulate", "--q", "1.5", "--replications", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("1.5"));
}

#[test]
fn simulate_then_summarize_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = knockoffs(&[
        "simulate",
        "--source",
        "s2",
        "--n",
        "80",
        "--p",
        "12",
        "--m",
        "4",
        "--rho",
        "3",
        "--generators",
        "second_order,fixed_x",
        "--filters",
        "knockoff,knockoff_plus",
        "--replications",
        "3",
        "--seed",
        "5",
        "--output",
        path(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("12 records"));
    for f in ["config.toml", "config.sha256", "records.csv", "summary.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let again = dir.path().join("again");
    let out = knockoffs(&["summarize", path(&run.join("records.csv")), "--out", path(&again)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(run.join("summary.csv")).unwrap(),
        std::fs::read(again.join("summary.csv")).unwrap()
    );

    // The saved config reruns to the same records.
    let rerun = dir.path().join("rerun");
    let out = knockoffs(&[
        "simulate",
        "--config",
        path(&run.join("config.toml")),
        "--output",
        path(&rerun),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(run.join("records.csv")).unwrap(),
        std::fs::read(rerun.join("records.csv")).unwrap()
    );
}

#[test]
fn hiv_import_writes_per_drug_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = knockoffs(&["hiv", "import", "--dir", "data/hiv-sample", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("patients 240 mutations 27"), "{text}");
    assert!(text.contains("APV: n 224 p 27 dropped nonpositive 2"), "{text}");
    let y = std::fs::read_to_string(dir.path().join("ATV_y.csv")).unwrap();
    assert_eq!(y.lines().next(), Some("patient,y"));
    assert_eq!(y.lines().count(), 1 + 91);
}

#[test]
fn knockoffs_then_filter_on_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let (n, p) = (150, 8);
    let mut design = (1..=p).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    let mut response = String::from("y\n");
    design.push('\n');
    for i in 0..n {
        let row: Vec<f64> = (0..p)
            .map(|j| (((i * p + j) as f64 * 12.9898).sin() * 43758.5453).fract())
            .collect();
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(design, "{}", line.join(",")).unwrap();
        writeln!(response, "{}", 4.0 * row[0] - 4.0 * row[1] + 0.1 * row[7]).unwrap();
    }
    let x = dir.path().join("x.csv");
    let y = dir.path().join("y.csv");
    std::fs::write(&x, design).unwrap();
    std::fs::write(&y, response).unwrap();

    let xk = dir.path().join("xk.csv");
    let diag = dir.path().join("diag.csv");
    let out = knockoffs(&[
        "knockoffs",
        path(&x),
        "--generator",
        "second_order",
        "--seed",
        "3",
        "--out",
        path(&xk),
        "--diagnostics",
        path(&diag),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("max gaps"));
    assert!(diag.exists());

    let sel = dir.path().join("sel.csv");
    let out = knockoffs(&[
        "filter",
        "--design",
        path(&x),
        "--knockoffs",
        path(&xk),
        "--response",
        path(&y),
        "--q",
        "0.5",
        "--mode",
        "knockoff",
        "--out",
        path(&sel),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("x1 x2"), "{}", stdout(&out));
    assert_eq!(std::fs::read_to_string(&sel).unwrap().lines().count(), 1 + p);
}

#[test]
fn unknown_drug_is_a_json_error() {
    let out = knockoffs(&["hiv", "run", "--drugs", "XYZ", "--replications", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().last().unwrap().contains("XYZ"), "{stderr}");
}
