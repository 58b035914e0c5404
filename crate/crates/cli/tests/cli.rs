use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const TINY: [&str; 6] = [
    "engine.epochs=3",
    "engine.batches_per_epoch=4",
    "engine.batch_size=8",
    "engine.validation_size=70",
    "engine.shift_size=70",
    "engine.probe_size=4",
];

fn crda(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_crda"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn crda");
    let mut pipe = child.stdin.take().unwrap();
    pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn tiny_args<'a>(cmd: &'a [&'a str], out: &'a str) -> Vec<&'a str> {
    let mut args = cmd.to_vec();
    for s in TINY {
        args.extend(["--set", s]);
    }
    args.extend(["--out", out]);
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Asserts the failure contract: the given exit code and exactly one `error:` line.
fn assert_error(o: &Output, code: i32) -> String {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(o.status.code(), Some(code), "stderr: {err}");
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with("error: "), "stderr: {err}");
    lines[0].to_string()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_auc_four_scores() {
    let o = crda(&["oracle", "auc"], Some("score,label\n0.9,1\n0.3,1\n0.5,0\n0.1,0\n"));
    assert!(o.status.success());
    assert_eq!(stdout(&o), "0.750000000000\n");
}

#[test]
fn oracle_auc_reads_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("s.csv");
    fs::write(&f, "0.9,1\n0.3,1\n0.5,0\n0.1,0\n").unwrap();
    assert_eq!(
        stdout(&crda(&["oracle", "auc", path_str(&f)], None)),
        "0.750000000000\n"
    );
}

#[test]
fn oracle_partition_example() {
    let o = crda(&["oracle", "partition"], Some("0.1\n1.9\n1.0\n0.6\n"));
    assert!(o.status.success());
    assert_eq!(stdout(&o), "dominant {0}\nadv1 {1}\nadv2 {2}\nadv3 {3}\n");
}

#[test]
fn oracle_gae_uses_configured_discount() {
    let o = crda(
        &[
            "oracle",
            "gae",
            "--set",
            "ppo.discount=0.5",
            "--set",
            "ppo.gae_lambda=1.0",
        ],
        Some("1,0\n1,0\n"),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "t,advantage,normalized_advantage,return");
    assert!(rows[1].starts_with("0,1.500000000000,"));
    assert!(rows[2].starts_with("1,1.000000000000,"));
}

#[test]
fn dump_schedules_fence_post() {
    let o = crda(&["dump-schedules"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,q,beta,area_raw,area_clamped");
    assert_eq!(lines.len(), 32);
    assert_eq!(lines[1], "0,0.000000000,0.000000000,1.300000000,1.000000000");

    let o = crda(&["dump-schedules", "--set", "engine.epochs=40"], None);
    assert_eq!(stdout(&o).lines().count(), 42);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let line = assert_error(
        &crda(&["dump-schedules", "--set", "curriculum.peak_phase=1.5"], None),
        2,
    );
    assert!(line.contains("curriculum.peak_phase"));
    let line = assert_error(&crda(&["dump-schedules", "--set", "ppo.bogus=1"], None), 2);
    assert!(line.contains("ppo.bogus"));
    let line = assert_error(&crda(&["dump-schedules", "--set", "engine.epochs=many"], None), 2);
    assert!(line.contains("engine.epochs"));

    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("c.cfg");
    fs::write(&f, "[engine]\nwarp = 9\n").unwrap();
    let line = assert_error(&crda(&["dump-schedules", "--config", path_str(&f)], None), 2);
    assert!(line.contains("engine.warp"));
    assert_error(&crda(&["train", "--config", "/definitely/not/here.cfg"], None), 2);
}

#[test]
fn usage_errors_are_single_line() {
    assert_error(&crda(&["oracle", "median"], None), 2);
    assert_error(&crda(&["ablate", "6"], None), 2);
    assert_error(&crda(&["frobnicate"], None), 2);
    assert_error(&crda(&[], None), 2);
}

#[test]
fn bad_inputs_fail_nonzero_on_one_line() {
    assert_error(&crda(&["oracle", "auc"], Some("0.1,1\n0.2,1\n")), 1);
    assert_error(&crda(&["oracle", "auc"], Some("0.1,1\nx,y\n")), 1);
    assert_error(&crda(&["oracle", "partition"], Some("")), 1);
    assert_error(&crda(&["eval", "/no/such/file.crda"], None), 1);

    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("junk.crda");
    fs::write(&f, "not a checkpoint\n").unwrap();
    let line = assert_error(&crda(&["eval", path_str(&f)], None), 1);
    assert!(line.contains("version"));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = tiny_args(&["train"], path_str(&out));
    args.extend(["--set", "engine.detector_lr=1e200"]);
    let line = assert_error(&crda(&args, None), 3);
    assert!(line.contains("non-finite"));
}

#[test]
fn train_writes_outputs_and_effective_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = tiny_args(&["train"], path_str(&out));
    args.extend(["--set", "ppo.clip=0.1", "--seed", "7"]);
    let o = crda(&args, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.jsonl",
        "summary.json",
        "effective_config",
        "final.crda",
        "timings.jsonl",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let eff = fs::read_to_string(out.join("effective_config")).unwrap();
    assert!(eff.contains("clip = 0.1\n"));
    assert!(eff.contains("seed = 7\n"));
    assert_eq!(
        fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(),
        3
    );
    let text = stdout(&o);
    let auc_line = text.lines().find(|l| l.starts_with("final_val_auc ")).unwrap();
    assert_eq!(auc_line.split('.').nth(1).unwrap().len(), 12);

    let cfg_copy = dir.path().join("again.cfg");
    let again = dir.path().join("again");
    fs::write(&cfg_copy, eff.replace(path_str(&out), path_str(&again))).unwrap();
    let o = crda(&["train", "--config", path_str(&cfg_copy)], None);
    assert!(o.status.success());
    assert_eq!(
        fs::read(out.join("metrics.jsonl")).unwrap(),
        fs::read(again.join("metrics.jsonl")).unwrap()
    );

    let o = crda(&["eval", path_str(&out.join("final.crda"))], None);
    assert!(o.status.success());
    let eval = stdout(&o);
    assert!(eval.starts_with("epoch 3\n"));
    let val = eval.lines().find(|l| l.starts_with("val_auc ")).unwrap();
    assert_eq!(
        val.trim_start_matches("val_"),
        auc_line.trim_start_matches("final_val_")
    );
}

#[test]
fn ablation_presets_use_subdirectories_and_preset_5_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let base = path_str(dir.path());
    let train_dir = dir.path().join("plain");
    assert!(crda(&tiny_args(&["train"], path_str(&train_dir)), None)
        .status
        .success());
    assert!(crda(&tiny_args(&["ablate", "5"], base), None).status.success());
    assert!(crda(&tiny_args(&["ablate", "1"], base), None).status.success());

    assert_eq!(
        fs::read(train_dir.join("metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("ablate_5/metrics.jsonl")).unwrap()
    );
    let eff = fs::read_to_string(dir.path().join("ablate_1/effective_config")).unwrap();
    for flag in ["no_rl = true", "no_irm = true", "no_curriculum = true"] {
        assert!(eff.contains(flag), "{flag} missing");
    }
    assert_ne!(
        fs::read(dir.path().join("ablate_1/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("ablate_5/metrics.jsonl")).unwrap()
    );
}

#[test]
fn help_exits_zero() {
    let o = crda(&["--help"], None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("dump-schedules"));
}
