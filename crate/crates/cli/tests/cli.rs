use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vprior_core::trainer::{read_metrics, Checkpoint, ConfigMap, MetricRecord, Phase};

const TINY: [&str; 14] = [
    "--set",
    "model.widths=4,8",
    "--set",
    "model.blocks=1,1",
    "--set",
    "model.stem_stride=1",
    "--set",
    "augment.crop_size=16",
    "--set",
    "phase1.batch_size=4",
    "--set",
    "phase2.batch_size=4",
    "--set",
    "phase2.stages=stage1,stage2",
];

fn vprior(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vprior"))
        .args(args)
        .env_remove("VPRIOR_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn toy(dir: &Path) -> PathBuf {
    let root = dir.join("toy");
    let out = vprior(&[
        "make-toy-data",
        root.to_str().unwrap(),
        "--classes",
        "2",
        "--train-per-class",
        "4",
        "--val-per-class",
        "2",
        "--size",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    root
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find_map(|l| l.strip_prefix("run: ")).expect("run directory printed");
    PathBuf::from(line)
}

fn with_common<'a>(args: &[&'a str], data: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(["--data", data, "--out", out]);
    v.extend(TINY);
    v
}

#[test]
fn pretrain_finetune_probe_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let (data, out) = (data.to_str().unwrap(), dir.path().join("runs"));
    let out = out.to_str().unwrap();

    let res = vprior(&with_common(&["pretrain", "--epochs", "1", "--queue-size", "8"], data, out));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let run = run_dir(&res);
    for f in ["config.txt", "version.txt", "metrics.jsonl", "checkpoint.ckpt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let cfg = ConfigMap::parse(&fs::read_to_string(run.join("config.txt")).unwrap()).unwrap();
    assert_eq!(cfg.get("phase1.epochs"), Some("1"));
    assert_eq!(cfg.get("phase1.queue_size"), Some("8"));
    let steps = read_metrics(&run.join("metrics.jsonl"))
        .unwrap()
        .into_iter()
        .filter(|r| matches!(r, MetricRecord::Step(_)))
        .count();
    assert_eq!(steps, 2);
    let ckpt_path = run.join("checkpoint.ckpt");
    assert_eq!(Checkpoint::load(&ckpt_path).unwrap().phase, Phase::Phase1);
    let ckpt = ckpt_path.to_str().unwrap();

    let res = vprior(&with_common(&["finetune", "--checkpoint", ckpt, "--epochs", "1"], data, out));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let ft = run_dir(&res);
    let csv = fs::read_to_string(ft.join("results.csv")).unwrap();
    assert!(csv.starts_with("split,top1\ntrain,"));
    let ft_ckpt = ft.join("checkpoint.ckpt");

    let res = vprior(&with_common(&["eval", "--checkpoint", ft_ckpt.to_str().unwrap()], data, out));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let res = vprior(&with_common(&["probe", "--checkpoint", ckpt, "--epochs", "5"], data, out));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let probe = run_dir(&res).join("probe.json");
    assert!(probe.is_file());

    let res = vprior(&with_common(&["eval", "--checkpoint", ckpt], data, out));
    assert_eq!(res.status.code(), Some(1), "a pre-training checkpoint needs a probe");
    let res = vprior(&with_common(&["eval", "--checkpoint", ckpt, "--probe", probe.to_str().unwrap()], data, out));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn resume_continues_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let (data, out) = (data.to_str().unwrap(), dir.path().join("runs"));
    let out = out.to_str().unwrap();
    let res = vprior(&with_common(&["pretrain", "--epochs", "1", "--queue-size", "8"], data, out));
    let first = run_dir(&res).join("checkpoint.ckpt");
    let res = vprior(&with_common(
        &["pretrain", "--epochs", "2", "--queue-size", "8", "--resume", first.to_str().unwrap()],
        data,
        out,
    ));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(Checkpoint::load(&run_dir(&res).join("checkpoint.ckpt")).unwrap().epoch, 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let res = vprior(&["pretrain", "--no-such-flag"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("Usage"));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = vprior(&["pretrain", "--data", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("error[io]"));
}

#[test]
fn dataset_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let out = dir.path().join("runs");
    let mut args = vec!["pretrain", "--epochs", "1", "--queue-size", "8", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    let res = Command::new(env!("CARGO_BIN_EXE_vprior"))
        .args(&args)
        .env("VPRIOR_DATA", &data)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn diverging_run_exits_with_non_finite_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let (data, out) = (data.to_str().unwrap(), dir.path().join("runs"));
    let out = out.to_str().unwrap();
    let mut args = with_common(&["pretrain", "--epochs", "5", "--queue-size", "8"], data, out);
    args.extend(["--set", "phase1.lr=1e30"]);
    let res = vprior(&args);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("non-finite"));
}

#[test]
fn negatives_ablation_emits_one_row_per_cell_in_and_out_of_process() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let (data, out) = (data.to_str().unwrap(), dir.path().join("runs"));
    let out = out.to_str().unwrap();
    let base = ["ablate-negatives", "--neg", "8,32,128", "--margins", "0,0.4", "--seeds", "0"];
    let mut args = with_common(&base, data, out);
    args.extend(["--set", "phase1.epochs=1", "--set", "probe.epochs=3"]);
    let res = vprior(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let sequential = fs::read_to_string(run_dir(&res).join("results.csv")).unwrap();
    let lines: Vec<&str> = sequential.lines().collect();
    assert_eq!(lines[0], "loss,margin,queue_size,seed,probe_top1");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("info_nce,0,8,0,"));
    assert!(lines[6].starts_with("margin_info_nce,0.4,128,0,"));

    args.push("--parallel");
    let res = vprior(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let parallel = fs::read_to_string(run_dir(&res).join("results.csv")).unwrap();
    assert_eq!(parallel, sequential);
}

#[test]
fn pipeline_ablation_reports_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let (data, out) = (data.to_str().unwrap(), dir.path().join("runs"));
    let out = out.to_str().unwrap();
    let mut args = with_common(&["ablate-pipeline", "--seeds", "0"], data, out);
    args.extend([
        "--set",
        "phase1.epochs=1",
        "--set",
        "phase1.queue_size=8",
        "--set",
        "phase2.epochs=1",
        "--set",
        "probe.epochs=3",
    ]);
    let res = vprior(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(run_dir(&res).join("results.csv")).unwrap();
    let arms: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        arms,
        ["random_init_probe", "supervised_scratch", "phase1_probe", "phase1_finetune", "phase1_phase2"]
    );
}
