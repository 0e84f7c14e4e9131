use std::path::Path;
use std::process::{Command, Output};

fn advdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advdet"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("advdet runs")
}

fn ok(args: &[&str]) -> String {
    let out = advdet(args);
    assert!(
        out.status.success(),
        "advdet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_writes_snapshots_tables_and_images() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let det_a = root.join("det_a");
    let det_b = root.join("det_b");
    let atk = root.join("attack");
    let single = root.join("single");

    let config = root.join("data.toml");
    std::fs::write(&config, "sequences = 6\nseed = 3\n").unwrap();
    ok(&["generate-data", "--config", s(&config), "--out", s(&data)]);
    let snapshot = std::fs::read_to_string(data.join("config.toml")).unwrap();
    assert!(snapshot.contains("sequences = 6"));

    for (dir, arch) in [(&det_a, "grid"), (&det_b, "two_stage")] {
        ok(&[
            "train-detector",
            "--out",
            s(dir),
            "--set",
            &format!("architecture={arch}"),
            "--set",
            "training.count=40",
            "--set",
            "options.epochs=1",
            "--set",
            "options.min_train_detection_rate=0",
        ]);
        assert!(dir.join("checkpoint.json").is_file());
        assert!(dir.join("training.json").is_file());
    }

    let dataset = format!("dataset={}", s(&data));
    let stdout = ok(&[
        "attack",
        "--out",
        s(&atk),
        "--set",
        &dataset,
        "--set",
        &format!("detector={}", s(&det_a)),
        "--set",
        "attack.termination.max_iterations=3",
        "--set",
        "checkpoint_every=2",
        "--set",
        "region={ x_min = 0.0, y_min = 0.0, x_max = 64.0, y_max = 128.0 }",
    ]);
    assert!(stdout.contains("stopped after"));
    for f in ["config.toml", "texture.png", "history.jsonl", "result.json"] {
        assert!(atk.join(f).is_file(), "{f} missing");
    }

    ok(&[
        "attack",
        "--out",
        s(&single),
        "--set",
        &dataset,
        "--set",
        &format!("detector={}", s(&det_a)),
        "--set",
        "mode=single_image",
        "--set",
        "single_image.frames=2",
        "--set",
        "attack.termination.max_iterations=2",
    ]);
    assert!(single.join("single_image.json").is_file());

    let detectors = format!("detectors=[{:?}, {:?}]", s(&det_a), s(&det_b));
    let clean = root.join("clean");
    ok(&["evaluate", "--out", s(&clean), "--set", &dataset, "--set", &detectors, "--set", "annotate=1"]);
    let csv = std::fs::read_to_string(clean.join("rates.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "split,distance,condition,detector,defense,attack,detected,total"
    );
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 8 && l.contains(",clean,")));
    assert_eq!(std::fs::read_dir(clean.join("annotated")).unwrap().count(), 2);

    let defended = root.join("defended");
    ok(&[
        "defend-evaluate",
        "--out",
        s(&defended),
        "--set",
        &dataset,
        "--set",
        &detectors,
        "--set",
        &format!("texture={}", s(&atk)),
        "--set",
        "splits=[\"test\"]",
    ]);
    let csv = std::fs::read_to_string(defended.join("rates.csv")).unwrap();
    for d in [",none,", ",down_up,", ",tv0.1,"] {
        assert!(csv.contains(d), "{d} missing from defended table");
    }
    assert!(csv.lines().skip(1).all(|l| l.starts_with("test,")));

    let single_eval = root.join("single_eval");
    ok(&[
        "defend-evaluate",
        "--out",
        s(&single_eval),
        "--set",
        &dataset,
        "--set",
        &format!("detectors=[{:?}]", s(&det_a)),
        "--set",
        &format!("single_image_run={}", s(&single)),
    ]);

    let transfer = root.join("transfer");
    ok(&[
        "transfer",
        "--out",
        s(&transfer),
        "--set",
        &dataset,
        "--set",
        &format!("texture={}", s(&atk)),
        "--set",
        &format!("source={}", s(&det_a)),
        "--set",
        &format!("target={}", s(&det_b)),
    ]);
    let csv = std::fs::read_to_string(transfer.join("rates.csv")).unwrap();
    assert!(csv.contains(",grid,") && csv.contains(",two_stage,"));

    let merged = root.join("merged");
    let reports = format!("reports=[{:?}, {:?}]", s(&clean), s(&defended));
    ok(&["report", "--out", s(&merged), "--set", &reports]);
    let rows = |p: &Path| std::fs::read_to_string(p.join("rates.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows(&merged), rows(&clean) + rows(&defended));
    assert!(merged.join("rates.txt").is_file());

    let regress = root.join("regress");
    let reports = format!("reports=[{:?}, {:?}, {:?}]", s(&clean), s(&defended), s(&single_eval));
    let regress_out = advdet(&["regress", "--out", s(&regress), "--set", &reports, "--set", "include_clean=true"]);
    if regress_out.status.success() {
        let ranking = std::fs::read_to_string(regress.join("ranking.csv")).unwrap();
        assert_eq!(ranking.lines().next().unwrap(), "rank,feature,coefficient");
        assert!(regress.join("coefficients.json").is_file());
    } else {
        // Tiny detectors may leave every frame with one outcome.
        assert!(String::from_utf8_lossy(&regress_out.stderr).contains("both outcomes"));
    }
}

#[test]
fn unknown_keys_and_malformed_overrides_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let r = advdet(&["generate-data", "--out", s(&out), "--set", "no_such_key=1"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("no_such_key"));
    let r = advdet(&["generate-data", "--out", s(&out), "--set", "sequences"]);
    assert!(!r.status.success());
    let r = advdet(&["evaluate", "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("no detectors"));
}
