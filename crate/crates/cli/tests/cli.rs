use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subrq"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(file: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(file).arg("--out").arg(out).args(extra).output().unwrap()
}

/// The report with the run-dependent `generated` block cut off.
fn stable_part(dir: &Path) -> String {
    let s = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let cut = s.find("\"generated\"").expect("generated block");
    s[..cut].to_string()
}

fn without_generated(dir: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("generated");
    v
}

/// Structural equality with a tolerance on numbers.
fn close(a: &Value, b: &Value, path: &str) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() <= 1e-9 + 1e-6 * x.abs().max(y.abs()) {
                Ok(())
            } else {
                Err(format!("{path}: {x} vs {y}"))
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            x.iter().zip(y).enumerate().try_for_each(|(i, (p, q))| close(p, q, &format!("{path}[{i}]")))
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x.iter().try_for_each(|(k, p)| {
            let q = y.get(k).ok_or(format!("{path}.{k} missing"))?;
            close(p, q, &format!("{path}.{k}"))
        }),
        _ if a == b => Ok(()),
        _ => Err(format!("{path}: {a} vs {b}")),
    }
}

fn golden(name: &str) {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&scenario(&format!("{name}.scn")), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let got = without_generated(dir.path());
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    close(&got, &want, "report").unwrap();
}

#[test]
fn heisenberg_scenario_matches_golden_report() {
    golden("heisenberg");
}

#[test]
fn martinet_scenario_matches_golden_report() {
    golden("martinet");
    let dir = tempfile::tempdir().unwrap();
    run(&scenario("martinet.scn"), dir.path(), &[]);
    let r = without_generated(dir.path());
    assert_eq!(r["tasks"][0]["result"]["verdict"], "singular_curve");
    assert_eq!(r["schema"], "subrq-report/1");
    for f in ["report.txt", "covector-0.csv", "lift-2.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn identical_runs_give_byte_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let file = scenario("heisenberg.scn");
    assert!(run(&file, a.path(), &["--threads", "1"]).status.success());
    assert!(run(&file, b.path(), &["--threads", "3"]).status.success());
    assert_eq!(stable_part(a.path()), stable_part(b.path()));
    for f in ["orbit-2.csv", "normal-form-3.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

fn write_scenario(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("s.scn");
    std::fs::write(&p, body).unwrap();
    p
}

const HEADER: &str = r#"
name = "t"
[chart]
dim = 3
[frame]
fields = [["1", "0", "-q2/2"], ["0", "1", "q1/2"]]
eta = ["q2/2", "-q1/2", "1"]
[hamiltonian]
metric = [["1", "0"], ["0", "1"]]
energy = 0.5
"#;

#[test]
fn malformed_file_exits_2_without_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cases = [
        ("name = ", "expected"),
        (&format!("{HEADER}[[task]]\nkind = \"flow\"\nx0 = [0.0, 0.0, 0.0]\nt = 1.0\n") as &str, "task[0].x0"),
        (&format!("{HEADER}[[task]]\nkind = \"flow\"\nx0 = \"zero\"\nt = 1.0\n"), "task[0].x0"),
        (&format!("{HEADER}[[task]]\nkind = \"teleport\"\n"), "task[0].kind"),
        (&format!("{HEADER}[[task]]\nkind = \"regularity\"\nq0 = [0.0, 0.0, 0.0]\ncontrol = [1.0, 0.0]\nt = 1.0\nspeed = 2\n"), "speed"),
        (&HEADER.replace("\"q1/2\"]]", "\"q1/\"]]"), "frame.fields[1][2]"),
        (&HEADER.replace("\"q1/2\"]]", "\"q7\"]]"), "frame.fields[1][2]"),
    ];
    for (body, needle) in cases {
        let p = write_scenario(dir.path(), body);
        let out = run(&p, &out_dir, &[]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "{body}\n{err}");
        assert!(err.contains(needle), "{needle} not in: {err}");
        assert!(!out_dir.join("report.json").exists() && !out_dir.join("report.txt").exists());
    }
}

#[test]
fn failed_expectation_exits_1_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{}[[task]]\nkind = \"regularity\"\nq0 = [0.0, 0.0, 0.0]\ncontrol = [1.0, 0.0]\nt = 1.0\n[task.expect]\nverdict = \"singular_curve\"\n",
        HEADER
    );
    let p = write_scenario(dir.path(), &body);
    let out = run(&p, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let r = without_generated(dir.path());
    assert_eq!(r["pass"], false);
    assert_eq!(r["tasks"][0]["observed"], "regular_everywhere");
}

#[test]
fn runtime_errors_are_reported_not_panicked() {
    let dir = tempfile::tempdir().unwrap();
    // resting start point: the orbit cannot be straightened
    let body = format!("{HEADER}[[task]]\nkind = \"normal-form\"\nx0 = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]\nt = 1.0\ndelta = 0.5\n");
    let p = write_scenario(dir.path(), &body);
    let out = run(&p, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let r = without_generated(dir.path());
    assert!(r["tasks"][0]["error"].is_string());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

fn scan(args: &[&str]) -> Output {
    bin().arg("scan").args(args).output().unwrap()
}

#[test]
fn scan_is_reproducible() {
    let a = scan(&["--dim", "2", "--samples", "20", "--seed", "1"]);
    let b = scan(&["--dim", "2", "--samples", "20", "--seed", "1", "--threads", "2"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["samples"], 20);
}

#[test]
fn scan_without_samples_gives_empty_stats() {
    let out = scan(&["--dim", "3", "--samples", "0", "--seed", "4"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"], 0);
    assert_eq!(v["passes"], 0);
    assert_eq!(v["sigma_min_quantiles"], Value::Array(vec![]));
    assert_eq!(v["witnesses"], Value::Array(vec![]));
}

#[test]
fn scan_rejects_dimension_one() {
    assert_eq!(scan(&["--dim", "1", "--samples", "5"]).status.code(), Some(2));
}

#[test]
fn formula_verify_prints_a_passing_table() {
    let out = bin().args(["formula-verify", "--dim", "3"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS") && !text.contains("FAIL"), "{text}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}
