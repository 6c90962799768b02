use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmfbsde"))
}

const SYNTHETIC: &str = r#"
scenario = "synthetic-bsde"

[params]
horizon = 1.0
steps = 16
delay = 0.25
kappa = 0.5
terminal = { level = 1.0, slope = 0.5 }

[params.solver]
paths = 2000
seed = 3
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn read_tables(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn run_writes_tables_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let out = tmp.path().join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenario"], "synthetic-bsde");
    assert_eq!(report["seed"], 3);
    assert_eq!(report["passed"], true);
    assert_eq!(report["config_sha256"].as_str().unwrap().len(), 64);
    let names: Vec<_> = read_tables(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["solution.csv", "summary.csv"]);
}

#[test]
fn identical_configs_give_identical_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    for dir in ["a", "b"] {
        let status = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(dir))
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let a = read_tables(&tmp.path().join("a"));
    assert!(!a.is_empty());
    assert_eq!(a, read_tables(&tmp.path().join("b")));
}

#[test]
fn seed_override_changes_results_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SYNTHETIC);
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let status = bin()
            .args(["run", "--seed", seed, "--paths", "500", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        (report["config_sha256"].clone(), read_tables(&out))
    };
    let (h1, t1) = run("5", "x");
    let (h2, t2) = run("6", "y");
    assert_ne!(h1, h2);
    assert_ne!(t1, t2);
}

#[test]
fn failed_check_exits_with_two() {
    // Monte Carlo first-order identities cannot meet a 1e-9 tolerance.
    let text = r#"
scenario = "recursive-utility"

[params]
horizon = 1.0
steps = 8
delay = 0.25
x0 = 1.0
sigma = 0.2

[params.solver]
paths = 300
seed = 1

[checks]
foc = 1e-9
comparisons = 0
sufficiency_samples = 4
"#;
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", text);
    let output = bin()
        .args(["verify", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("FAIL consumption first-order condition")
    );
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let typo = write_config(tmp.path(), "typo.toml", &SYNTHETIC.replace("kappa", "kapa"));
    let output = bin().args(["run", "--config"]).arg(&typo).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("kapa"));

    let unknown = write_config(
        tmp.path(),
        "u.toml",
        &SYNTHETIC.replace("synthetic-bsde", "nope"),
    );
    let output = bin()
        .args(["verify", "--config"])
        .arg(&unknown)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));

    let misaligned = write_config(
        tmp.path(),
        "m.toml",
        &SYNTHETIC.replace("delay = 0.25", "delay = 0.3"),
    );
    let output = bin()
        .args(["verify", "--config"])
        .arg(&misaligned)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("not a multiple"));
}

#[test]
fn list_shows_five_scenarios() {
    let output = bin().args(["list", "--json"]).output().unwrap();
    assert!(output.status.success());
    let list: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let names: Vec<_> = list
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "synthetic-bsde",
            "predictive-toy",
            "insider",
            "recursive-utility",
            "oracle-mini"
        ]
    );

    let output = bin().args(["list", "insider"]).output().unwrap();
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("{log, crra}"));
    assert!(text.contains("scenario = \"insider\""));

    let output = bin().args(["list", "missing"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown scenario"));
}

#[test]
fn listed_default_config_runs() {
    let output = bin().args(["list", "predictive-toy"]).output().unwrap();
    let text = String::from_utf8_lossy(&output.stdout);
    let config = text.split("default config:\n").nth(1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "d.toml", config);
    let output = bin()
        .args(["verify", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
}
