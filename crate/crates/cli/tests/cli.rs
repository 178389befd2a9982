use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
interference_samples_per_task = 40
interference_test_per_task = 10
interference_dim = 6
hidden_dim = 8
epochs = 1
timeline_every = 20
";

fn rntn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rntn"))
        .args(args)
        .env_remove("RNTN_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("exp.txt");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn train_writes_exactly_the_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let out = rntn(&["train", "-c", &cfg, "-o", run.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut names: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "checkpoint.bin",
            "config.txt",
            "metrics.csv",
            "report.json",
            "routing_map.json",
            "timeline.csv"
        ]
    );
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(
        metrics.starts_with("epoch,sample_idx,task,loss,correct,r_final,actions,effective_lr\n")
    );

    let eval = rntn(&["eval", "--run", run.to_str().unwrap()]);
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    let printed: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(printed, report["final_accuracy"]);

    let map = tmp.path().join("map.json");
    let exp = rntn(&[
        "export-map",
        "--run",
        run.to_str().unwrap(),
        "-o",
        map.to_str().unwrap(),
    ]);
    assert!(exp.status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(map).unwrap()).unwrap();
    assert_eq!(m["tasks"].as_array().unwrap().len(), 4);
}

#[test]
fn validation_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "representation = approx\n");
    let out = rntn(&["train", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tabular"));

    let out = rntn(&["train", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rntn(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let missing = tmp.path().join("nope.bin");
    let out = rntn(&[
        "eval",
        "-c",
        &cfg,
        "--checkpoint",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn overrides_after_double_dash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("r");
    let out = rntn(&[
        "train",
        "-c",
        &cfg,
        "-o",
        run.to_str().unwrap(),
        "--",
        "--rho",
        "0.3",
        "--wpl-variant=algorithm3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let saved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("rho = 0.3\n"));
    assert!(saved.contains("wpl_variant = algorithm3\n"));
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 3\n");
    let run = tmp.path().join("s");
    let out = Command::new(env!("CARGO_BIN_EXE_rntn"))
        .args(["train", "-c", &cfg, "-o", run.to_str().unwrap()])
        .env("RNTN_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(fs::read_to_string(run.join("config.txt"))
        .unwrap()
        .contains("seed = 11\n"));
}

#[test]
fn sweep_and_bench_print_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = rntn(&["sweep-rho", "-c", &cfg, "--rhos", "0,0.3"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("rho,seed,task_0,task_1,task_2,task_3,mean\n"));
    assert_eq!(text.lines().count(), 3);

    let out = rntn(&[
        "bench-scaling",
        "--ks",
        "2,3",
        "--input-dim",
        "16",
        "--hidden",
        "8",
        "--samples",
        "4",
        "--epochs",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][2], rows[1][2], "routing op count varies with k");
    assert_ne!(rows[2][2], rows[3][2]);
}
