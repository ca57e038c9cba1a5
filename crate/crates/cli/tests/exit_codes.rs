//! Exit codes and output-directory handling of the `kolmo` binary.

use std::path::Path;
use std::process::Command;

const LANGEVIN: &str = r#"{"N": 2, "d": 1, "B": [0, 0, 1, 0], "T_bar": 1, "mu": 2, "alpha": 1,
    "coefficients": {"a2": [["1.5"]]}}"#;

fn run(dir: &Path, model: &str, args: &[&str]) -> (i32, String) {
    let path = dir.join("model.json");
    std::fs::write(&path, model).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kolmo"))
        .args(&args[..1])
        .arg("--model")
        .arg(&path)
        .args(&args[1..])
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn successful_analysis_writes_the_structure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (code, err) = run(
        dir.path(),
        LANGEVIN,
        &["analyze", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(out.join("structure.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["Q"], 4);
    assert_eq!(json["dims"], serde_json::json!([1, 1]));
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let unknown = LANGEVIN.replace("1.5", "1 + sinh(x1)");
    let not_canonical = LANGEVIN.replace("[0, 0, 1, 0]", "[0, 1, 0, 0]");
    for model in ["{", unknown.as_str(), not_canonical.as_str()] {
        let (code, err) = run(dir.path(), model, &["analyze", "--out", out]);
        assert_eq!(code, 1, "{model}: {err}");
        assert!(err.starts_with("error:"), "{err}");
    }
    let (code, _) = run(
        dir.path(),
        LANGEVIN,
        &["analyze", "--out", out, "--threads", "0"],
    );
    assert_eq!(code, 1);
}

#[test]
fn non_empty_output_directory_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let out = out.to_str().unwrap();
    let (code, err) = run(dir.path(), LANGEVIN, &["analyze", "--out", out]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("--force"), "{err}");
    let (code, err) = run(dir.path(), LANGEVIN, &["analyze", "--out", out, "--force"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out/keep.txt")).unwrap(),
        "x"
    );
}

#[test]
fn numerical_failures_exit_with_two() {
    // 2 C λ_max((μ+ε) C(T)) exceeds 1 for C = 10 on the unit horizon.
    let dir = tempfile::tempdir().unwrap();
    let model = LANGEVIN.replace(r#""alpha": 1,"#, r#""alpha": 1, "growth_C": 10,"#);
    let out = dir.path().join("out");
    let args = [
        "solve-cauchy",
        "--out",
        out.to_str().unwrap(),
        "--grid",
        "0,0,0",
        "--terminal",
        "1",
    ];
    let (code, err) = run(dir.path(), &model, &args);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn failed_verification_exits_with_three_and_keeps_the_report() {
    // Without a zeroth-order term the mass is 1, not e^{0.5}.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let args = [
        "verify",
        "--out",
        out.to_str().unwrap(),
        "--checks",
        "mass",
        "--abar",
        "0.5",
    ];
    let (code, err) = run(dir.path(), LANGEVIN, &args);
    assert_eq!(code, 3, "{err}");
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["check_name"], "mass");
    assert_eq!(reports[0]["status"], "fail");

    let out = dir.path().join("out_ok");
    let args = [
        "verify",
        "--out",
        out.to_str().unwrap(),
        "--checks",
        "mass",
        "--abar",
        "0",
    ];
    let (code, err) = run(dir.path(), LANGEVIN, &args);
    assert_eq!(code, 0, "{err}");
}
