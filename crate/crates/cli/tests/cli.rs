use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn layergrad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layergrad"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
[data]
n_per_class = 40

[stream]
tasks = 2

[train]
hidden = [16]

[run]
variants = ["single"]
seeds = [7]
out_dir = "out"
"#;

#[test]
fn minimal_run_writes_square_matrix() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let o = layergrad(&["run", "--config", "exp.toml"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let run = dir.path().join("out/single/seed-7");
    let csv = fs::read_to_string(run.join("accuracy.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert_eq!(lines[0], "step,1,2");
    assert!(lines[1].ends_with(','), "future task is blank: {csv}");
    assert_eq!(lines[2].split(',').count(), 3);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    for key in ["acc", "bwt", "timing", "variant", "seed"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert!(summary["timing"]["solver_mean_us"].is_number());
    let log = fs::read_to_string(run.join("run.log.jsonl")).unwrap();
    assert!(log
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    assert!(run.join("manifest.json").exists());
    assert!(dir.path().join("out/results.csv").exists());
}

#[test]
fn unknown_variant_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let o = layergrad(
        &[
            "run",
            "--config",
            "exp.toml",
            r#"run.variants=["single","nonsense"]"#,
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run.variants[1]"), "{}", stderr(&o));

    let o = layergrad(&["run", "train.lr=-1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"));

    let o = layergrad(&["run", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_csv_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = layergrad(
        &["run", "data.source=csv", "data.path=nowhere.csv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let variants = r#"run.variants=["single","agem","ours+lgu","ours-pca:1"]"#;
    for out in ["a", "b"] {
        let o = layergrad(
            &[
                "run",
                "--config",
                "exp.toml",
                "--out",
                out,
                variants,
                "stream.tasks=3",
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for slug in ["single", "agem", "ours_lgu", "ours-pca-1"] {
        for file in ["accuracy.csv", "run.log.jsonl"] {
            let a = fs::read(dir.path().join("a").join(slug).join("seed-7").join(file)).unwrap();
            let b = fs::read(dir.path().join("b").join(slug).join("seed-7").join(file)).unwrap();
            assert_eq!(a, b, "{slug}/{file} differs");
        }
    }
}

#[test]
fn manifest_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let o = layergrad(
        &[
            "run",
            "--config",
            "exp.toml",
            r#"run.variants=["agem", "f"]"#,
            "run.seeds=[1,2]",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = dir.path().join("out/ours_lgu/seed-2/manifest.json");
    let o = layergrad(
        &[
            "run",
            "--replay",
            manifest.to_str().unwrap(),
            "--out",
            "replayed",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(
        !dir.path().join("replayed/agem").exists(),
        "replay is one run"
    );
    let a = fs::read(dir.path().join("out/ours_lgu/seed-2/accuracy.csv")).unwrap();
    let b = fs::read(dir.path().join("replayed/ours_lgu/seed-2/accuracy.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn verify_passes_and_catches_the_mutant() {
    let dir = tempfile::tempdir().unwrap();
    let o = layergrad(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let passes = stdout(&o).lines().filter(|l| l.starts_with("PASS")).count();
    assert!(passes >= 4, "{}", stdout(&o));

    let o = layergrad(
        &["verify", "--mutant", "sign-flip", "--failures", "fail"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL solver-vs-oracle"));
    let saved = fs::read_to_string(dir.path().join("fail/solver-vs-oracle.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&saved).unwrap();
    assert!(v["g"].is_array() && v["old_grads"].is_array());
}

#[test]
fn sweep_k_clamps_and_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let o = layergrad(
        &[
            "sweep-k",
            "--config",
            "exp.toml",
            "--k",
            "1,50",
            "stream.tasks=4",
            r#"run.variants=["e:1"]"#,
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/sweep_k.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k_requested,k,acc,bwt");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1,"));
    assert!(lines[2].starts_with("50,2,"), "{csv}");
    let log = fs::read_to_string(dir.path().join("out/sweep_k.log")).unwrap();
    assert!(log.contains("clamped to 2"));

    let o = layergrad(&["sweep-k", "--config", "exp.toml", "--k", "2"], dir.path());
    assert_eq!(o.status.code(), Some(2), "plain single is not sweepable");
}

#[test]
fn report_rerenders_stored_matrices() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    let o = layergrad(
        &[
            "run",
            "--config",
            "exp.toml",
            r#"run.variants=["single","agem"]"#,
            "run.seeds=[1,2]",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let o = layergrad(&["report", "out"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5, "{report}");

    let results = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    for line in results.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let prefix = format!("{},{},{},{},", fields[0], fields[1], fields[2], fields[3]);
        assert!(
            report.lines().any(|l| l.starts_with(&prefix)),
            "{prefix} missing from report"
        );
    }

    let o = layergrad(&["report", "does-not-exist"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}
