use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bevstream::bench::{parse_report_csv, FusionMode};

const BIN: &str = env!("CARGO_BIN_EXE_bevstream");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn scene_toml(dir: &Path) -> String {
    let path = dir.join("scene.toml");
    fs::write(
        &path,
        "duration = 10.0\nnominal_interval = 0.5\nheight = 64\nwidth = 64\n",
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn simulate_writes_twenty_records_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scene_toml(dir.path());
    for out in ["a", "b"] {
        let o = run(dir.path(), &["simulate", "--config", &cfg, "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/stream.bevs")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/stream.bevs")).unwrap());
    assert_eq!(
        bevstream::fusion::read_stream(a.as_slice()).unwrap().len(),
        20
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/simulate.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"][0]["path"], "stream.bevs");

    let o = run(dir.path(), &["simulate", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(
        dir.path(),
        &[
            "simulate",
            "--config",
            &cfg,
            "--out",
            "d",
            "--set",
            "channels=0",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_consumes_a_simulated_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scene_toml(dir.path());
    assert!(
        run(dir.path(), &["simulate", "--config", &cfg, "--out", "sim"])
            .status
            .success()
    );
    let o = run(
        dir.path(),
        &["replay", "--input", "sim/stream.bevs", "--out", "rep"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("rep/replay.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert!(dir.path().join("rep/memory.bevg").exists());
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["check", "--out", "ok"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("chained_vs_unrolled") && stdout.contains("max_residual="));

    let o = run(
        dir.path(),
        &[
            "check",
            "--suite",
            "oracle",
            "--inject-fault",
            "--out",
            "bad",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let csv = fs::read_to_string(dir.path().join("bad/check.csv")).unwrap();
    let worst = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");

    assert_eq!(
        run(dir.path(), &["check", "--suite", ""]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["check", "--suite", "bogus"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn framedrop_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "framedrop",
            "--out",
            "fd",
            "--set",
            "height=64",
            "--set",
            "width=64",
            "--set",
            "duration=8",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("fd/framedrop.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("fmr,mode,ave_mps,seed"));
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    assert_eq!(rows.len(), 30);
    for seed in 7..12 {
        let ave = |fmr: &str, mode: &str| -> f64 {
            rows.iter()
                .find(|r| r[0] == fmr && r[1] == mode && r[3] == seed.to_string())
                .map(|r| r[2].parse().unwrap())
                .unwrap()
        };
        assert!((ave("0.0", "fixed") - ave("0.0", "embedded")).abs() <= 1e-6);
        assert!(
            ave("0.0", "fixed") <= ave("0.25", "fixed")
                && ave("0.25", "fixed") <= ave("0.5", "fixed")
        );
    }
    let o = run(
        dir.path(),
        &["framedrop", "--out", "fd2", "--set", "fmr_grid=[1.5]"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_rows_and_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--set",
        "channels=4",
        "--set",
        "height=24",
        "--set",
        "width=24",
    ];
    let mut args = vec!["bench", "--out", "b"];
    args.extend(small);
    let o = run(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("fusion-module latency only"));
    let reports =
        parse_report_csv(fs::File::open(dir.path().join("b/bench.csv")).unwrap()).unwrap();
    assert_eq!(reports.len(), 10);
    let rec: Vec<_> = reports
        .iter()
        .filter(|r| r.mode == FusionMode::Recurrent)
        .collect();
    let par: Vec<_> = reports
        .iter()
        .filter(|r| r.mode == FusionMode::Parallel)
        .collect();
    assert!(rec.iter().all(|r| r.state_bytes == rec[0].state_bytes));
    assert!(par.windows(2).all(|w| w[1].state_bytes > w[0].state_bytes));

    let mut args = vec!["bench", "--out", "j", "--json"];
    args.extend(small);
    assert!(run(dir.path(), &args).status.success());
    let json: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(dir.path().join("j/bench.json")).unwrap()).unwrap();
    assert_eq!(json.len(), 10);
    assert!(json[0].get("lat_p95_s").is_some());
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let ok = Command::new(BIN)
        .current_dir(dir.path())
        .env("BEVSTREAM_THREADS", "1")
        .args(["check", "--suite", "split", "--out", "t"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    let bad = Command::new(BIN)
        .current_dir(dir.path())
        .env("BEVSTREAM_THREADS", "zero")
        .args(["check", "--out", "t2"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
