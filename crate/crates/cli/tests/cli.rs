use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn smoke() -> PathBuf {
    scenarios().join("case6_smoke.toml")
}

/// The clean six-machine scenario with two clusters, written into `dir`.
fn clean_with_clusters(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(scenarios().join("case6_clean.toml")).unwrap();
    let model = scenarios().join("models/case6.toml");
    let text = text.replace("models/case6.toml", s(&model)) + "\n[clustering]\nk = 2\nseed = 0\n";
    let path = dir.join("clean.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn gridgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.csv")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn bench_run_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = gridgp(&["bench", "run", s(&smoke()), "--out", s(dir.path()), "--seed", "3"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("case6_smoke:"));
    }
    let (fa, fb) = (contents(a.path()), contents(b.path()));
    assert!(fa.iter().any(|(n, _)| n == "predictions_l1_masked.csv"));
    assert!(fa.iter().any(|(n, _)| n == "scores.toml"));
    assert_eq!(fa, fb);
    assert!(a.path().join("timing.csv").exists());

    let c = tempfile::tempdir().unwrap();
    let out = gridgp(&["bench", "run", s(&smoke()), "--out", s(c.path()), "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pa = std::fs::read(a.path().join("predictions_l2.csv")).unwrap();
    let pc = std::fs::read(c.path().join("predictions_l2.csv")).unwrap();
    assert_ne!(pa, pc);
}

#[test]
fn stage_commands_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = clean_with_clusters(dir.path());
    let dir = dir.path().join("work");
    for stage in ["simulate", "corrupt", "learn", "identify", "infer", "cluster"] {
        let out = gridgp(&[stage, "--config", s(&scenario), "--out", s(&dir)]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for file in [
        "speeds.csv",
        "observed.csv",
        "truth.toml",
        "learned_l1.toml",
        "learned_l2.toml",
        "weights.toml",
        "learned_masked.toml",
        "predictions_l2.csv",
        "predictions_l1_masked.csv",
        "clusters.toml",
        "predictions_dimension_reduced.csv",
        "predictions_aggregate.csv",
    ] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    // The staged route and the one-shot runner agree on the predictions.
    let bench = tempfile::tempdir().unwrap();
    let out = gridgp(&["bench", "run", s(&scenario), "--out", s(bench.path())]);
    assert_eq!(code(&out), 0);
    for file in [
        "truth.toml",
        "learned_l1.toml",
        "learned_l2.toml",
        "weights.toml",
        "predictions_l2.csv",
        "predictions_l1_masked.csv",
        "clusters.toml",
        "predictions_dimension_reduced.csv",
        "predictions_aggregate.csv",
    ] {
        assert_eq!(
            std::fs::read(dir.join(file)).unwrap(),
            std::fs::read(bench.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let out = gridgp(&["learn", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = 3\n").unwrap();
    assert_eq!(code(&gridgp(&["bench", "run", s(&bad)])), 2);

    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&gridgp(&["bench", "run", s(&missing)])), 4);

    // A stage whose input was never produced.
    let out = gridgp(&["learn", "--config", s(&smoke()), "--out", s(dir.path())]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("observed."));

    // A negative definite intensity has no valid Gaussian conditioning.
    let work = dir.path().join("work");
    for stage in ["simulate", "corrupt", "learn", "identify"] {
        assert_eq!(code(&gridgp(&[stage, "--config", s(&smoke()), "--out", s(&work)])), 0);
    }
    for file in ["learned_l2.toml", "learned_masked.toml"] {
        let path = work.join(file);
        let text = std::fs::read_to_string(&path).unwrap();
        let start = text.find("a = [").unwrap();
        let r = text[start..].matches('[').count() - 1;
        let rows: Vec<String> = (0..r)
            .map(|i| {
                let row: Vec<&str> = (0..r).map(|j| if i == j { "-1.0" } else { "0.0" }).collect();
                format!("[{}]", row.join(", "))
            })
            .collect();
        std::fs::write(&path, format!("{}a = [{}]\n", &text[..start], rows.join(", "))).unwrap();
    }
    let out = gridgp(&["infer", "--config", s(&smoke()), "--out", s(&work)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_suite_runs_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    std::fs::create_dir(&suite).unwrap();
    let text = std::fs::read_to_string(smoke()).unwrap();
    let model = scenarios().join("models/case6.toml");
    for (name, seed) in [("first", 3), ("second", 5)] {
        let t = text
            .replace("models/case6.toml", s(&model))
            .replace("name = \"case6_smoke\"", &format!("name = \"{name}\""))
            .replace("seed = 3", &format!("seed = {seed}"));
        std::fs::write(suite.join(format!("{name}.toml")), t).unwrap();
    }
    let out_dir = dir.path().join("out");
    let out = gridgp(&["bench", "suite", s(&suite), "--out", s(&out_dir), "--threads", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let names: Vec<&str> = stdout.lines().map(|l| l.split(':').next().unwrap()).collect();
    assert_eq!(names, ["first", "second"]);
    assert!(out_dir.join("first/scores.toml").exists());
    assert!(out_dir.join("second/scores.toml").exists());

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&gridgp(&["bench", "suite", s(&empty)])), 2);
    assert_eq!(code(&gridgp(&["bench", "suite", s(&suite), "--threads", "0"])), 2);
}
