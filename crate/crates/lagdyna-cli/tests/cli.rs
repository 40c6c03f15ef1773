//! End-to-end tests of the `lagdyna` binary: exit codes, file layout,
//! determinism, and the compare pipeline on synthetic runs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lagdyna::report::{write_metrics_csv, MetricsRow};
use tempfile::tempdir;

fn lagdyna(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lagdyna"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A config small enough that a full grid of runs takes well under a
/// second: the warmup exceeds the total step count, so the agent never
/// trains, and thresholds keep the model stages short.
fn tiny_config(out_dir: &Path, variants: &str, seeds: &str) -> String {
    format!(
        "\
[run]
variants = {variants}
seeds = {seeds}
out = {}

[loop]
episodes = 2
steps_per_episode = 40
env_buffer_threshold = 30
model_train_batch = 48
warmup_steps = 10000
eval_cadence = 40
eval_episodes = 1
rollout_rounds = 1
rollout_batch = 4
rollout_horizon = 2
data_loss_threshold = 1000000

[model]
hidden = 6
adam_passes = 1

[agent]
policy_hidden = 6
critic_hidden = 6
",
        out_dir.display()
    )
}

#[test]
fn missing_required_field_exits_2_and_names_it() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "[run]\nvariants = mfrl\nout = x\n").unwrap();
    let out = lagdyna(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("run.seeds"), "{}", stderr_of(&out));
}

#[test]
fn config_errors_carry_path_and_line() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "[run]\nvariants = mfrl\nseeds = zero\nout = x\n").unwrap();
    let out = lagdyna(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("exp.cfg"), "{err}");
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("run.seeds"), "{err}");

    fs::write(&cfg, "[loop]\nepisodesss = 3\n").unwrap();
    let out = lagdyna(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("episodesss"), "{}", stderr_of(&out));
}

#[test]
fn missing_config_file_exits_2() {
    let out = lagdyna(&["train", "--config", "/nonexistent/exp.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn two_seeds_produce_two_run_csvs_plus_a_merged_one() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let cfg = dir.path().join("exp.cfg");
    let text = tiny_config(&out_dir, "lnn-adam", "0,1");
    fs::write(&cfg, &text).unwrap();

    let out = lagdyna(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    // The input config is never touched.
    assert_eq!(fs::read_to_string(&cfg).unwrap(), text);

    for seed in [0, 1] {
        let run = out_dir.join(format!("lnn-adam-seed{seed}"));
        assert!(run.join("metrics.csv").is_file());
        assert!(run.join("policy.net").is_file());
        assert!(run.join("critic.net").is_file());
        assert!(run.join("model.net").is_file());
        assert!(run.join("model_loss.csv").is_file());
    }
    let merged = out_dir.join("metrics.csv");
    assert!(merged.is_file());
    let metadata = fs::read_to_string(out_dir.join("metadata.txt")).unwrap();
    assert!(metadata.contains("loop.episodes=2"), "{metadata}");
    assert!(metadata.contains("config_hash="), "{metadata}");

    let (hash, rows) = lagdyna::report::read_metrics_csv(&merged).unwrap();
    assert_eq!(hash.len(), 64);
    // 2 seeds x evals at steps 0, 40, 80.
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.variant == "lnn-adam"));
    assert_eq!(
        rows.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![0, 0, 0, 1, 1, 1]
    );
}

#[test]
fn reruns_and_thread_counts_do_not_change_a_byte() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out_a = dir.path().join("a");
    fs::write(&cfg, tiny_config(&out_a, "lnn-ekf,mfrl", "3,4")).unwrap();

    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_lagdyna"))
            .args(["train", "--config", cfg.to_str().unwrap()])
            .env("LAGDYNA_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
        fs::read(out_a.join("metrics.csv")).unwrap()
    };
    let first = run("1");
    let second = run("1");
    assert_eq!(first, second, "sequential rerun changed the merged CSV");
    let parallel = run("3");
    assert_eq!(first, parallel, "thread count changed the merged CSV");
}

#[test]
fn variant_and_seed_flags_override_the_file() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, tiny_config(&out_dir, "lnn-adam", "0,1")).unwrap();

    let other_out = dir.path().join("other");
    let out = lagdyna(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        "mfrl",
        "--seeds",
        "7",
        "--out",
        other_out.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(!out_dir.exists(), "file out dir must not be used");
    let (_, rows) = lagdyna::report::read_metrics_csv(&other_out.join("metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r.variant == "mfrl" && r.seed == 7));
    // Model-free runs have no model artifacts.
    assert!(!other_out.join("mfrl-seed7").join("model.net").exists());
}

#[test]
fn bad_thread_env_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, tiny_config(dir.path(), "mfrl", "0")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lagdyna"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("LAGDYNA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("LAGDYNA_THREADS"), "{}", stderr_of(&out));
}

fn synthetic_run_dir(dir: &Path, variant: &str, curves: &[(u64, Vec<(usize, f64)>)]) {
    fs::create_dir_all(dir).unwrap();
    let mut rows = Vec::new();
    for (seed, curve) in curves {
        for &(step, ret) in curve {
            rows.push(MetricsRow {
                variant: variant.to_string(),
                seed: *seed,
                env_steps: step,
                avg_return: ret,
            });
        }
    }
    write_metrics_csv(&dir.join("metrics.csv"), "cafe", &rows).unwrap();
}

#[test]
fn compare_reports_crossings_and_not_reached() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    synthetic_run_dir(
        &a,
        "lnn-ekf",
        &[
            (0, vec![(0, -900.0), (1000, -280.0), (2000, -250.0)]),
            (1, vec![(0, -880.0), (1000, -500.0), (2000, -240.0)]),
            (2, vec![(0, -870.0), (1000, -290.0), (2000, -230.0)]),
        ],
    );
    synthetic_run_dir(
        &b,
        "mfrl",
        &[(0, vec![(0, -950.0), (1000, -800.0), (2000, -700.0)])],
    );

    let csv_path = dir.path().join("compare.csv");
    let out = lagdyna(&[
        "compare",
        "--out",
        csv_path.to_str().unwrap(),
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let table = stdout_of(&out);
    // Median of (-280, -500, -290) at step 1000 is -290, above -300.
    assert!(table.contains("lnn-ekf"), "{table}");
    assert!(table.contains("not reached"), "{table}");

    let csv = fs::read_to_string(&csv_path).unwrap();
    assert!(csv.contains("# config_hash=cafe"), "{csv}");
    assert!(csv.contains("variant,seeds,steps_to_threshold,median_final_return"), "{csv}");
    assert!(csv.contains("lnn-ekf,3,1000,-240"), "{csv}");
    assert!(csv.contains("mfrl,1,not_reached,-700"), "{csv}");
}

#[test]
fn compare_honors_a_custom_threshold() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a");
    synthetic_run_dir(&a, "mfrl", &[(0, vec![(0, -950.0), (1000, -800.0)])]);
    let csv_path = dir.path().join("compare.csv");
    let out = lagdyna(&[
        "compare",
        "--threshold",
        "-900",
        "--out",
        csv_path.to_str().unwrap(),
        a.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(fs::read_to_string(&csv_path).unwrap().contains("mfrl,1,1000,-800"));
}

#[test]
fn compare_rejects_misaligned_eval_grids() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    synthetic_run_dir(&a, "mfrl", &[(0, vec![(0, -950.0), (1000, -800.0)])]);
    synthetic_run_dir(&b, "mfrl", &[(1, vec![(0, -950.0), (500, -800.0)])]);
    let out = lagdyna(&[
        "compare",
        "--out",
        dir.path().join("c.csv").to_str().unwrap(),
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("aligned"), "{}", stderr_of(&out));
}

#[test]
fn compare_requires_at_least_one_directory() {
    let out = lagdyna(&["compare"]);
    assert_eq!(out.status.code(), Some(2), "clap usage error");
}

#[test]
fn check_prints_a_line_per_property_and_passes() {
    let out = lagdyna(&["check"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    for name in [
        "input-derivative-oracle",
        "operator-weight-jacobian",
        "analytic-pendulum-operator",
        "rk-order",
        "kalman-equivalence",
        "covariance-psd",
        "rk-order-negative-control",
        "covariance-psd-negative-control",
    ] {
        assert!(text.contains(&format!("PASS {name}")), "missing {name} in:\n{text}");
    }
}

#[test]
fn a_failing_run_keeps_partial_outputs_and_exits_1() {
    // An absurd critic learning rate passes validation but makes the first
    // agent update diverge; the run aborts mid-way, yet metadata, the
    // merged CSV, and the per-run partials must still exist.
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        format!(
            "\
[run]
variants = mfrl
seeds = 0
out = {}

[loop]
episodes = 1
steps_per_episode = 30
warmup_steps = 5
eval_cadence = 1000
eval_episodes = 1

[agent]
updates_per_episode = 3
batch = 4
critic_lr = 1e300
policy_hidden = 6
critic_hidden = 6
",
            out_dir.display()
        ),
    )
    .unwrap();
    let out = lagdyna(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("partial"), "{}", stderr_of(&out));
    assert!(out_dir.join("metadata.txt").is_file());
    assert!(out_dir.join("metrics.csv").is_file());
    // The baseline evaluation at step 0 survives in the partial metrics.
    let (_, rows) = lagdyna::report::read_metrics_csv(&out_dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].env_steps, 0);
}
