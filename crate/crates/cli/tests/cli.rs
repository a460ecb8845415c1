use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const POPULATION: &str = r#"
[constants]
alpha = 2.0
beta = 0.0
rounds = 10
local_steps = 5
q_floor = 0.01

[[client]]
d = 100.0
G = 2.0
c = 1.0
v = 0.5
q_max = 1.0

[[client]]
d = 300.0
G = 1.0
c = 3.0
v = 0.0
q_max = 1.0
"#;

fn fedprice(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedprice"));
    cmd.args(args).env("RUST_LOG", "warn");
    for var in ["FEDPRICE_CONFIG", "FEDPRICE_OUT", "FEDPRICE_SEED", "FEDPRICE_SCHEME", "FEDPRICE_BUDGET", "FEDPRICE_REPEATS", "FEDPRICE_PRESET"] {
        cmd.env_remove(var);
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn spend_of(manifest: &Path) -> (f64, f64) {
    let text = std::fs::read_to_string(manifest).unwrap();
    let field = |name: &str| -> f64 {
        let at = text.find(&format!("\"{name}\": ")).unwrap() + name.len() + 4;
        text[at..].split([',', '\n']).next().unwrap().trim().parse().unwrap()
    };
    (field("spend"), field("budget"))
}

#[test]
fn solve_writes_a_budget_tight_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("population.toml");
    std::fs::write(&pop, POPULATION).unwrap();
    let out_dir = dir.path().join("out");
    for scheme in ["optimal", "uniform", "weighted"] {
        let out = fedprice(
            &["solve", "--population", pop.to_str().unwrap(), "--scheme", scheme, "--budget", "1.5", "--out", out_dir.to_str().unwrap()],
            &[],
        );
        ok(&out);
        let (spend, budget) = spend_of(&out_dir.join(format!("manifest-{scheme}.json")));
        assert_eq!(budget, 1.5);
        assert!((spend - 1.5).abs() <= 1e-6, "{scheme}: spend {spend}");
    }
}

#[test]
fn environment_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("population.toml");
    std::fs::write(&pop, POPULATION).unwrap();
    let out = fedprice(
        &["solve", "--population", pop.to_str().unwrap()],
        &[("FEDPRICE_BUDGET", "0.75"), ("FEDPRICE_SCHEME", "uniform"), ("FEDPRICE_OUT", dir.path().to_str().unwrap())],
    );
    ok(&out);
    let (spend, budget) = spend_of(&dir.path().join("manifest-uniform.json"));
    assert_eq!(budget, 0.75);
    assert!((spend - 0.75).abs() <= 1e-6);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = fedprice(&["solve", "--population", dir.path().join("nope.toml").to_str().unwrap()], &[]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));

    let pop = dir.path().join("population.toml");
    std::fs::write(&pop, POPULATION).unwrap();
    let scheme = fedprice(&["solve", "--population", pop.to_str().unwrap(), "--scheme", "cheapest"], &[]);
    assert!(!scheme.status.success());

    let infeasible = fedprice(&["solve", "--population", pop.to_str().unwrap(), "--budget", "-100", "--out", dir.path().to_str().unwrap()], &[]);
    assert!(!infeasible.status.success());

    let preset = fedprice(&["gen-data", "--preset", "setup9"], &[]);
    assert!(!preset.status.success());
}

#[test]
fn staged_pipeline_matches_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&fedprice(&["gen-data", "--out", out, "--repeats", "2"], &[]));
    let dataset = dir.path().join("dataset.feds");
    assert!(dataset.exists());
    ok(&fedprice(&["calibrate", "--dataset", dataset.to_str().unwrap(), "--out", out, "--repeats", "2"], &[]));
    let pop = dir.path().join("population.toml");
    for scheme in ["optimal", "uniform", "weighted"] {
        ok(&fedprice(&["solve", "--population", pop.to_str().unwrap(), "--scheme", scheme, "--out", out], &[]));
        let manifest = dir.path().join(format!("manifest-{scheme}.json"));
        ok(&fedprice(
            &[
                "train",
                "--dataset",
                dataset.to_str().unwrap(),
                "--population",
                pop.to_str().unwrap(),
                "--manifest",
                manifest.to_str().unwrap(),
                "--out",
                out,
                "--repeats",
                "2",
            ],
            &[],
        ));
    }
    let metrics = std::fs::read_dir(dir.path().join("metrics")).unwrap().count();
    assert_eq!(metrics, 6);
    let first = fedprice(&["report", "--run", out], &[]);
    ok(&first);
    let summary = std::fs::read(dir.path().join("summary.json")).unwrap();
    let second = fedprice(&["report", "--out", out], &[]);
    ok(&second);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(summary, std::fs::read(dir.path().join("summary.json")).unwrap());
    assert!(String::from_utf8_lossy(&first.stdout).contains("| optimal |"));
}

#[test]
fn experiment_with_three_repeats_emits_nine_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(&fedprice(&["experiment", "--repeats", "3", "--out", dir.path().to_str().unwrap()], &[]));
    assert!(start.elapsed() < Duration::from_secs(600));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("metrics"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    assert_eq!(names[0], "optimal-seed0.csv");
    for f in ["config.toml", "dataset.feds", "population.toml", "calibration.json", "summary.json", "summary.md"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}
