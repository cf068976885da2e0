//! End-to-end tests running the compiled binary: file round trips, exit
//! codes, config layering, and the shape of each command's output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use streampaint_core::video::read_rvv;
use streampaint_core::weights::{save_wts, StackConfig, WeightSet};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streampaint"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should launch")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout should be utf-8")
}

fn synth_fixture(dir: &Path, frames: &str) {
    run_ok(
        dir,
        &[
            "synth", "--out", "clip.rvv", "--masks", "masks.rvv", "--frames", frames,
        ],
    );
}

#[test]
fn synth_writes_a_readable_clip_with_matching_masks() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(dir.path(), &["synth", "--frames", "9", "--seed", "3"]);
    assert!(stdout.contains("config\t"), "missing config echo: {stdout}");
    assert!(stdout.contains("seed=3"));
    let clip = read_rvv(&dir.path().join("clip.rvv")).unwrap();
    assert_eq!(clip.len(), 9);
    assert_eq!((clip.width(), clip.height()), (32, 32));
    assert!(dir.path().join("masks.rvv").exists());
}

#[test]
fn synth_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["synth", "--out", "a.rvv", "--masks", "am.rvv", "--seed", "5"]);
    run_ok(dir.path(), &["synth", "--out", "b.rvv", "--masks", "bm.rvv", "--seed", "5"]);
    run_ok(dir.path(), &["synth", "--out", "c.rvv", "--masks", "cm.rvv", "--seed", "6"]);
    let (a, b, c) = (
        fs::read(dir.path().join("a.rvv")).unwrap(),
        fs::read(dir.path().join("b.rvv")).unwrap(),
        fs::read(dir.path().join("c.rvv")).unwrap(),
    );
    assert_eq!(a, b, "same seed should reproduce the clip byte for byte");
    assert_ne!(a, c, "different seeds should differ");
}

#[test]
fn inpaint_round_trips_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(dir.path(), "8");
    let stdout = run_ok(
        dir.path(),
        &[
            "inpaint", "--mode", "memory", "--in", "clip.rvv", "--masks", "masks.rvv",
            "--out", "out.rvv",
        ],
    );
    assert!(stdout.contains("mode\tmemory"));
    assert!(stdout.contains("fps\t"));
    let out = read_rvv(&dir.path().join("out.rvv")).unwrap();
    assert_eq!(out.len(), 8);
    let report = fs::read_to_string(dir.path().join("out.rvv.report.txt")).unwrap();
    assert!(report.contains("score_macs\t"));
    assert!(report.contains("frame\tlatency_ms"));
}

#[test]
fn inpaint_runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(dir.path(), "10");
    for mode in ["online", "memory", "refined"] {
        let out_a = format!("{mode}_a.rvv");
        let out_b = format!("{mode}_b.rvv");
        for out in [&out_a, &out_b] {
            run_ok(
                dir.path(),
                &[
                    "inpaint", "--mode", mode, "--in", "clip.rvv", "--masks", "masks.rvv",
                    "--out", out, "--pacing", "synchronous",
                ],
            );
        }
        let a = fs::read(dir.path().join(&out_a)).unwrap();
        let b = fs::read(dir.path().join(&out_b)).unwrap();
        assert_eq!(a, b, "{mode} output should not vary between runs");
    }
}

#[test]
fn weight_file_matches_seeded_initialization() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(dir.path(), "6");
    let weights = WeightSet::seeded(&StackConfig::default(), 42).unwrap();
    save_wts(&weights, &dir.path().join("w.wts")).unwrap();
    run_ok(
        dir.path(),
        &[
            "inpaint", "--mode", "memory", "--in", "clip.rvv", "--masks", "masks.rvv",
            "--out", "from_file.rvv", "--weights", "w.wts",
        ],
    );
    run_ok(
        dir.path(),
        &[
            "inpaint", "--mode", "memory", "--in", "clip.rvv", "--masks", "masks.rvv",
            "--out", "from_seed.rvv", "--seed", "42",
        ],
    );
    let a = fs::read(dir.path().join("from_file.rvv")).unwrap();
    let b = fs::read(dir.path().join("from_seed.rvv")).unwrap();
    assert_eq!(a, b, "loading saved weights should equal seeding them");
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "bogus = 1\n").unwrap();
    let out = run_in(dir.path(), &["synth", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus"), "error should name the key: {stderr}");
}

#[test]
fn malformed_config_line_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "k 7\n").unwrap();
    let out = run_in(dir.path(), &["synth", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_mode_and_missing_setting_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(dir.path(), "4");
    let bad_mode = run_in(
        dir.path(),
        &[
            "inpaint", "--mode", "warp", "--in", "clip.rvv", "--masks", "masks.rvv",
            "--out", "o.rvv",
        ],
    );
    assert_eq!(bad_mode.status.code(), Some(2));
    let missing = run_in(
        dir.path(),
        &["inpaint", "--in", "clip.rvv", "--masks", "masks.rvv", "--out", "o.rvv"],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--mode"));
}

#[test]
fn unreadable_input_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(dir.path(), "4");
    let missing = run_in(
        dir.path(),
        &[
            "inpaint", "--mode", "memory", "--in", "nosuch.rvv", "--masks", "masks.rvv",
            "--out", "o.rvv",
        ],
    );
    assert_eq!(missing.status.code(), Some(3));
    fs::write(dir.path().join("junk.rvv"), b"not a video").unwrap();
    let junk = run_in(
        dir.path(),
        &[
            "inpaint", "--mode", "memory", "--in", "junk.rvv", "--masks", "masks.rvv",
            "--out", "o.rvv",
        ],
    );
    assert_eq!(junk.status.code(), Some(3));
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(dir.path(), "6");
    fs::write(dir.path().join("run.cfg"), "# settings\nk = 7\nseed = 9\ns = 2\n").unwrap();
    let stdout = run_ok(
        dir.path(),
        &[
            "inpaint", "--config", "run.cfg", "--mode", "online", "--in", "clip.rvv",
            "--masks", "masks.rvv", "--out", "o.rvv", "--seed", "11",
        ],
    );
    let config_line = stdout
        .lines()
        .find(|l| l.starts_with("config\t"))
        .expect("config echo line");
    assert!(config_line.contains("k=7"), "file value should apply: {config_line}");
    assert!(config_line.contains("s=2"), "file value should apply: {config_line}");
    assert!(config_line.contains("seed=11"), "flag should win: {config_line}");
}

#[test]
fn config_file_can_supply_required_paths() {
    let dir = tempfile::tempdir().unwrap();
    synth_fixture(dir.path(), "4");
    fs::write(
        dir.path().join("run.cfg"),
        "mode = memory\nin = clip.rvv\nmasks = masks.rvv\nout = o.rvv\n",
    )
    .unwrap();
    run_ok(dir.path(), &["inpaint", "--config", "run.cfg"]);
    assert!(dir.path().join("o.rvv").exists());
}

#[test]
fn bench_reports_every_requested_mode() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(
        dir.path(),
        &["bench", "--frames", "8", "--modes", "offline,online,memory,refined"],
    );
    for mode in ["offline", "online", "memory", "refined"] {
        assert!(
            stdout.contains(&format!("mode\t{mode}")),
            "bench output missing {mode} block"
        );
    }
    assert!(stdout.contains("mean_psnr\t"));
    assert!(stdout.contains("psnr_gap_memory"), "curves table should diff against offline");
}

#[test]
fn sweep_prints_rows_and_cost_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(
        dir.path(),
        &["sweep", "--frames", "12", "--contexts", "2,4,8", "--modes", "online,memory"],
    );
    let rows: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("online\t") || l.starts_with("memory\t"))
        .collect();
    assert_eq!(rows.len(), 6, "3 contexts x 2 modes: {stdout}");
    let online_exp: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("cost_exponent_online\t"))
        .expect("online exponent line")
        .parse()
        .unwrap();
    let memory_exp: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("cost_exponent_memory\t"))
        .expect("memory exponent line")
        .parse()
        .unwrap();
    assert!((online_exp - 2.0).abs() < 0.1, "online grows quadratically: {online_exp}");
    assert!((memory_exp - 1.0).abs() < 0.1, "memory grows linearly: {memory_exp}");
}

#[test]
fn sweep_rejects_unsorted_contexts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["sweep", "--frames", "12", "--contexts", "8,4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_prints_all_four_combinations() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(dir.path(), &["ablate", "--frames", "10"]);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.starts_with("yes\t")).collect();
    assert_eq!(rows.len(), 4, "one row per toggle combination: {stdout}");
    assert!(stdout.contains("self_only_frames"));
}

#[test]
fn outputs_can_be_written_to_files() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        dir.path(),
        &["sweep", "--frames", "12", "--contexts", "2,4", "--out", "sweep.tsv"],
    );
    let text = fs::read_to_string(dir.path().join("sweep.tsv")).unwrap();
    assert!(text.contains("frame_score_macs"));
    run_ok(dir.path(), &["ablate", "--frames", "8", "--out", "ablate.tsv"]);
    assert!(dir.path().join("ablate.tsv").exists());
}

#[test]
fn help_names_every_subcommand() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "inpaint", "bench", "sweep", "ablate"] {
        assert!(text.contains(cmd), "--help should list {cmd}");
    }
}

#[test]
fn paths_resolve_relative_to_the_working_directory() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("nested");
    fs::create_dir(&sub).unwrap();
    synth_fixture(&sub, "4");
    let abs_out: PathBuf = dir.path().join("abs.rvv");
    run_ok(
        &sub,
        &[
            "inpaint", "--mode", "online", "--in", "clip.rvv", "--masks", "masks.rvv",
            "--out", abs_out.to_str().unwrap(),
        ],
    );
    assert!(abs_out.exists());
}
