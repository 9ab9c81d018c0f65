use std::path::Path;
use std::process::Command;

fn oreal(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_oreal"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str =
    "bank_size = 8\niterations = 12\nbatch_questions = 4\nrollouts_per_question = 8\nseeds = [0]\n";

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(oreal(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(oreal(&["run", "--seed", "abc"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "no_such_key = 1\n");
    assert_eq!(oreal(&["run", "--config", &cfg]).status.code(), Some(1));
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(
        oreal(&["run", "--variant", "nope", "--out", out]).status.code(),
        Some(1)
    );
}

#[test]
fn run_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let o = oreal(&[
            "run",
            "--config",
            &cfg,
            "--seed",
            "5",
            "--variant",
            "behavior-cloning",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.jsonl", "summary.json"] {
        assert_eq!(
            std::fs::read(dirs[0].join(f)).unwrap(),
            std::fs::read(dirs[1].join(f)).unwrap()
        );
    }
    let summary = std::fs::read_to_string(dirs[0].join("summary.json")).unwrap();
    assert!(summary.contains("\"run_id\": \"behavior-cloning-s5\""));
}

#[test]
fn verify_failure_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bon_ns = [2]\nbon_draws = 500\nbon_tv_tol = 1e-12\nbon_quadrature_points = 1001\n",
    );
    let out = tmp.path().join("v");
    let o = oreal(&["verify-bon", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL pbon_tv n=2"));
    assert!(out.join("verify.json").is_file());
}

#[test]
fn pipeline_rft_run_heatmap_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("r");
    let out_s = out.to_str().unwrap();
    assert!(oreal(&["rft", "--config", &cfg, "--out", out_s]).status.success());
    assert!(out.join("rft_summary.json").is_file());
    assert!(oreal(&["run", "--config", &cfg, "--out", out_s]).status.success());
    assert!(oreal(&["heatmap", "--config", &cfg, "--out", out_s])
        .status
        .success());
    assert!(out.join("heatmap.csv").is_file());
    let metrics = out.join("metrics.jsonl");
    let o = oreal(&["plot", metrics.to_str().unwrap(), "missing.jsonl", "--out", out_s]);
    assert!(o.status.success());
    let lines = std::fs::read_to_string(out.join("plotlines.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, 13);
}

#[test]
fn ablate_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("ab");
    let o = oreal(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
}
