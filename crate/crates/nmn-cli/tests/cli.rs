//! End-to-end tests of the `nmn` binary: every subcommand, the exit
//! code contract, and byte-level reproducibility of training outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn nmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn gen(dir: &Path, name: &str, per_level: &str, seed: &str) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let out = nmn(&[
        "gen-data",
        "--out",
        &path,
        "--d",
        "8",
        "--k",
        "8",
        "--per-level",
        per_level,
        "--seed",
        seed,
    ]);
    assert_success(&out);
    path
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = TempDir::new().expect("tempdir");
    let path = gen(dir.path(), "data.jsonl", "3,3,3,3", "5");
    let dataset = nmn::synth::load(Path::new(&path)).expect("written file loads");
    assert_eq!(dataset.examples.len(), 12);
    assert_eq!(dataset.d, 8);
}

#[test]
fn plan_prints_the_schedule_and_total() {
    let out = nmn(&[
        "plan",
        "--strategy",
        "curriculum",
        "--pretrain",
        "1",
        "--sample-size",
        "10",
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("pretrain"), "missing pretrain row:\n{text}");
    assert!(text.contains("level4"), "missing level rows:\n{text}");
    assert!(
        text.contains("total scheduled presentations: 50"),
        "missing total:\n{text}"
    );
}

#[test]
fn train_eval_and_exec_work_end_to_end() {
    let dir = TempDir::new().expect("tempdir");
    let train = gen(dir.path(), "train.jsonl", "8,8,0,0", "1");
    let eval = gen(dir.path(), "eval.jsonl", "4,0,0,0", "2");
    let out_dir = dir.path().join("run");
    let out_str = out_dir.to_string_lossy().into_owned();

    let out = nmn(&[
        "train",
        "--train",
        &train,
        "--eval",
        &eval,
        "--out",
        &out_str,
        "--strategy",
        "random",
        "--iterations",
        "2",
        "--sample-size",
        "24",
        "--batch-size",
        "8",
        "--seed",
        "3",
    ]);
    assert_success(&out);
    for name in [
        "resolved_config.json",
        "metrics.csv",
        "summary.json",
        "best.ckpt",
        "final.ckpt",
    ] {
        assert!(out_dir.join(name).exists(), "missing output file {name}");
    }
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).expect("metrics readable");
    assert!(metrics
        .starts_with("iteration,difficulty_key,presentations,distinct,train_loss,eval_accuracy"));
    assert_eq!(metrics.lines().count(), 3, "header plus one row per iteration");
    let summary = fs::read_to_string(out_dir.join("summary.json")).expect("summary readable");
    assert!(summary.contains("\"iterations_run\": 2"), "summary:\n{summary}");

    let ckpt = out_dir.join("final.ckpt").to_string_lossy().into_owned();
    let out = nmn(&["eval", "--checkpoint", &ckpt, "--data", &eval]);
    assert_success(&out);
    assert!(
        stdout(&out).contains("accuracy") && stdout(&out).contains("4 examples"),
        "eval output:\n{}",
        stdout(&out)
    );

    let out = nmn(&["exec", "--checkpoint", &ckpt, "--data", &eval]);
    assert_success(&out);
    let text = stdout(&out);
    for needle in ["program:", "steps:", "predicted:", "gold:", "verdict:"] {
        assert!(text.contains(needle), "exec output misses {needle}:\n{text}");
    }
}

#[test]
fn training_twice_gives_byte_identical_outputs() {
    let dir = TempDir::new().expect("tempdir");
    let train = gen(dir.path(), "train.jsonl", "6,6,0,0", "7");
    let eval = gen(dir.path(), "eval.jsonl", "3,0,0,0", "8");

    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = nmn(&[
            "train",
            "--train",
            &train,
            "--eval",
            &eval,
            "--out",
            &out_dir.to_string_lossy(),
            "--strategy",
            "random",
            "--iterations",
            "2",
            "--sample-size",
            "12",
            "--batch-size",
            "4",
            "--seed",
            "9",
        ]);
        assert_success(&out);
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for name in ["metrics.csv", "resolved_config.json", "best.ckpt", "final.ckpt"] {
        let left = fs::read(a.join(name)).expect("first run output readable");
        let right = fs::read(b.join(name)).expect("second run output readable");
        assert_eq!(left, right, "{name} differs between identical runs");
    }
}

#[test]
fn exec_reports_a_missing_id_as_a_data_error() {
    let dir = TempDir::new().expect("tempdir");
    let data = gen(dir.path(), "data.jsonl", "2,0,0,0", "4");
    let out = nmn(&["exec", "--data", &data, "--id", "L9-999999"]);
    assert_eq!(out.status.code(), Some(3), "stderr:\n{}", stderr(&out));
    assert!(stderr(&out).contains("L9-999999"));
}

#[test]
fn config_problems_exit_with_code_two() {
    let dir = TempDir::new().expect("tempdir");
    let config = dir.path().join("bad.json");
    fs::write(&config, "{\"learning_rte\": 0.5}").expect("config written");
    let out = nmn(&["plan", "--config", &config.to_string_lossy()]);
    assert_eq!(out.status.code(), Some(2), "stderr:\n{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rte"));

    let out = nmn(&["plan", "--strategy", "spiral"]);
    assert_eq!(out.status.code(), Some(2));

    let out = nmn(&["plan", "--batch-size", "0"]);
    assert_eq!(out.status.code(), Some(2), "stderr:\n{}", stderr(&out));
}

#[test]
fn missing_files_exit_with_code_three() {
    let dir = TempDir::new().expect("tempdir");
    let ghost = dir.path().join("ghost.jsonl").to_string_lossy().into_owned();
    let out_dir = dir.path().join("run").to_string_lossy().into_owned();
    let out = nmn(&[
        "train", "--train", &ghost, "--eval", &ghost, "--out", &out_dir,
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr:\n{}", stderr(&out));
}

#[test]
fn mismatched_checkpoint_exits_with_code_three() {
    let dir = TempDir::new().expect("tempdir");
    let small = gen(dir.path(), "small.jsonl", "2,0,0,0", "6");
    let big_path = dir.path().join("big.jsonl").to_string_lossy().into_owned();
    let out = nmn(&[
        "gen-data",
        "--out",
        &big_path,
        "--d",
        "12",
        "--per-level",
        "2,0,0,0",
    ]);
    assert_success(&out);

    let run_dir = dir.path().join("run");
    let out = nmn(&[
        "train",
        "--train",
        &small,
        "--eval",
        &small,
        "--out",
        &run_dir.to_string_lossy(),
        "--strategy",
        "random",
        "--iterations",
        "1",
        "--sample-size",
        "4",
        "--batch-size",
        "2",
    ]);
    assert_success(&out);
    let ckpt = run_dir.join("final.ckpt").to_string_lossy().into_owned();
    let out = nmn(&["eval", "--checkpoint", &ckpt, "--data", &big_path]);
    assert_eq!(out.status.code(), Some(3), "stderr:\n{}", stderr(&out));
    assert!(stderr(&out).contains("do not match"));
}

#[test]
fn shipped_configs_all_plan_cleanly() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let expected_totals = [
        ("cl-wa.json", Some(16_000)),
        ("cl-wb.json", Some(16_000)),
        ("cl-wa-p.json", Some(24_000)),
        ("cl-wa-p-r.json", Some(40_000)),
        ("cl-l.json", Some(48_000)),
        ("cl-l-wa.json", Some(48_000)),
        ("random.json", Some(48_000)),
        ("unbalanced.json", None),
        ("balanced.json", None),
    ];
    let on_disk: Vec<String> = fs::read_dir(&configs)
        .expect("configs directory exists")
        .map(|e| e.expect("entry readable").file_name().into_string().unwrap())
        .collect();
    assert_eq!(on_disk.len(), expected_totals.len(), "configs: {on_disk:?}");

    for (name, total) in expected_totals {
        let path = configs.join(name);
        assert!(path.exists(), "missing shipped config {name}");
        let out = nmn(&["plan", "--config", &path.to_string_lossy()]);
        assert_success(&out);
        let text = stdout(&out);
        match total {
            Some(n) => assert!(
                text.contains(&format!("total scheduled presentations: {n}")),
                "{name} schedule:\n{text}"
            ),
            None => assert!(
                text.contains("full or balanced passes"),
                "{name} schedule:\n{text}"
            ),
        }
    }
}

#[test]
fn gradcheck_passes_and_prints_per_seed_lines() {
    let out = nmn(&[
        "gradcheck", "--seeds", "1", "--d", "5", "--k", "3", "--answers", "5",
    ]);
    assert_success(&out);
    let text = stdout(&out);
    assert!(text.contains("seed 0:"), "output:\n{text}");
    assert!(text.contains("all gradient checks pass"), "output:\n{text}");
}
