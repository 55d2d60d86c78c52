//! End-to-end runs of the `flowgrpo` binary on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use flowgrpo::logs::{read_all, ChildRecord, RwrRecord, SummaryRecord, TrainRecord};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flowgrpo"));
    c.env("FLOWGRPO_WORKERS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> PathBuf {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

const TINY: &[&str] = &[
    "--set", "model.hidden=[16,16,16]",
    "--set", "grpo.group_size=4",
    "--set", "grpo.prompts_per_iter=2",
    "--set", "grpo.iterations=4",
    "--set", "grpo.eval_interval=2",
    "--set", "grpo.eval_samples=8",
    "--set", "grpo.checkpoint_interval=2",
    "--set", "run.wall_clock=false",
];

struct Shared {
    root: PathBuf,
    checkpoint: PathBuf,
}

/// One tiny pretrained checkpoint shared by the tests in this file.
fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli");
        let _ = std::fs::remove_dir_all(&root);
        let out = root.join("pre");
        let mut args = vec!["pretrain", "--out", out.to_str().unwrap(), "--set", "pretrain.steps=80"];
        args.extend_from_slice(TINY);
        let run_dir = ok(&args);
        Shared {
            checkpoint: run_dir.join("checkpoints/model.ckpt"),
            root,
        }
    })
}

fn with<'a>(cmd: &'a str, out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--out", out.to_str().unwrap(), "--checkpoint", shared().checkpoint.to_str().unwrap()];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

#[test]
fn exit_codes() {
    let s = shared();
    let bad_key = run(&["grpo", "--out", s.root.join("x1").to_str().unwrap(), "--set", "grpo.nope=1"]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("grpo.nope"));

    let bad_type = run(&["grpo", "--out", s.root.join("x2").to_str().unwrap(), "--set", "grpo.beta=\"high\""]);
    assert_eq!(bad_type.status.code(), Some(1));

    let missing = run(&["grpo", "--out", s.root.join("x3").to_str().unwrap(), "--checkpoint", "/no/such/file.ckpt"]);
    assert_eq!(missing.status.code(), Some(3));

    let cfg = s.root.join("bad.toml");
    std::fs::write(&cfg, "[grpo]\nbeta = 0.1\nunknown_key = 3\n").unwrap();
    let from_file = run(&["grpo", "--config", cfg.to_str().unwrap(), "--out", s.root.join("x4").to_str().unwrap()]);
    assert_eq!(from_file.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&from_file.stderr).contains("grpo.unknown_key"));
}

#[test]
fn grpo_run_directory() {
    let out = shared().root.join("grpo_beta0");
    let dir = ok(&with("grpo", &out, &["--set", "grpo.beta=0"]));
    for f in [
        "config.toml",
        "manifest.json",
        "checkpoints/model.ckpt",
        "checkpoints/iter_00002.ckpt",
        "checkpoints/iter_00004.ckpt",
        "logs/grpo.csv",
        "plots/reward.svg",
        "plots/kl.svg",
        "plots/diversity.svg",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let log: Vec<TrainRecord> = read_all(&dir.join("logs/grpo.csv")).unwrap();
    assert_eq!(log.len(), 4);
    assert_eq!(log.iter().filter(|r| r.eval_reward.is_some()).count(), 2);
    assert!(log.iter().all(|r| r.mean_kl == 0.0 && r.wall_ms == 0));
    let header = std::fs::read_to_string(dir.join("logs/grpo.csv")).unwrap();
    assert!(header.starts_with("iter,mean_reward,eval_reward,mean_kl,clip_frac,diversity,net_evals,wall_ms\n"));

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["tags"].as_array().unwrap().iter().any(|t| t == "beta0"));
    assert_eq!(manifest["command"], "grpo");

    // The snapshot is the effective configuration.
    let cfg = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    let parsed: toml::Table = cfg.parse().unwrap();
    assert_eq!(parsed["grpo"]["beta"].as_float(), Some(0.0));
    assert_eq!(parsed["grpo"]["group_size"].as_integer(), Some(4));

    // Completed run directories are never overwritten.
    let again = run(&with("grpo", &out, &[]));
    assert_eq!(again.status.code(), Some(3));
}

#[test]
fn reruns_are_byte_identical() {
    let root = &shared().root;
    let a = ok(&with("grpo", &root.join("det_a"), &[]));
    let b = ok(&with("grpo", &root.join("det_b"), &[]));
    for f in ["checkpoints/model.ckpt", "checkpoints/iter_00002.ckpt", "logs/grpo.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // Manifests agree on every artifact; only the snapshot differs, by `output_dir`.
    let files = |d: &Path| {
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
        m["files"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|f| f["path"] != "config.toml")
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(files(&a), files(&b));
}

#[test]
fn rwr_baseline_logs_weights() {
    let dir = ok(&with("baseline", &shared().root.join("rwr"), &["--set", "baseline.method=\"rwr\""]));
    let log: Vec<TrainRecord> = read_all(&dir.join("logs/baseline.csv")).unwrap();
    assert_eq!(log.len(), 4);
    let w: Vec<RwrRecord> = read_all(&dir.join("logs/rwr_weights.csv")).unwrap();
    // 4 iterations × 2 groups × 4 samples.
    assert_eq!(w.len(), 32);
    for chunk in w.chunks(4) {
        assert!(chunk.iter().all(|r| r.iter == chunk[0].iter && r.condition == chunk[0].condition));
        assert!((chunk.iter().map(|r| r.weight).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dpo_baseline_has_grpo_schema() {
    let dir = ok(&with("baseline", &shared().root.join("dpo"), &["--set", "baseline.online=false"]));
    let a = std::fs::read_to_string(dir.join("logs/baseline.csv")).unwrap();
    assert!(a.starts_with("iter,mean_reward,eval_reward,mean_kl,clip_frac,diversity,net_evals,wall_ms\n"));
    assert!(!dir.join("logs/rwr_weights.csv").exists());
}

#[test]
fn eval_reports_and_negative_control() {
    let root = &shared().root;
    let small = ["--set", "eval.samples=2000", "--set", "eval.diversity_samples=32", "--set", "eval.plot_samples=40"];
    let dir = ok(&with("eval", &root.join("eval"), &small));
    let text = std::fs::read_to_string(dir.join("logs/eval.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value,null_value,ratio,n,pass"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "marginal_equivalence");
    let good_ratio: f64 = rows[0][3].parse().unwrap();
    assert_eq!(rows[1][0], "diversity");
    assert_eq!(rows[2][0], "mode_match_accuracy");
    assert!(dir.join("plots/ode_vs_sde.svg").is_file());

    let mut bad = small.to_vec();
    bad.extend(["--set", "eval.corrupt_drift=true"]);
    let dir = ok(&with("eval", &root.join("eval_bad"), &bad));
    let text = std::fs::read_to_string(dir.join("logs/eval.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "marginal_equivalence_uncorrected");
    assert_eq!(row[5], "false", "dropping the drift correction must fail: {row:?}");
    let bad_ratio: f64 = row[3].parse().unwrap();
    assert!(bad_ratio > 2.0 * good_ratio, "{bad_ratio} vs {good_ratio}");
}

#[test]
fn trained_single_gaussian_passes_equivalence() {
    let root = &shared().root;
    let data = ["--set", "dataset.kind=\"single_gaussian\"", "--set", "dataset.std=0.5"];
    let (sg, sg_eval) = (root.join("sg"), root.join("sg_eval"));
    let mut pre = vec!["pretrain", "--out", sg.to_str().unwrap(), "--set", "pretrain.steps=3000"];
    pre.extend_from_slice(&data);
    let dir = ok(&pre);
    let ckpt = dir.join("checkpoints/model.ckpt");
    let mut ev = vec!["eval", "--out", sg_eval.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()];
    ev.extend_from_slice(&data);
    ev.extend(["--set", "eval.plot_samples=40", "--set", "eval.diversity_samples=32"]);
    let dir = ok(&ev);
    let text = std::fs::read_to_string(dir.join("logs/eval.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[4], row[5]), ("marginal_equivalence", "10000", "true"), "{row:?}");
    // Without a reward-bearing dataset only diversity is reported alongside.
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn ablate_over_train_steps() {
    let dir = ok(&with(
        "ablate",
        &shared().root.join("ablate"),
        &[
            "--set", "ablate.axis=\"t_train\"",
            "--set", "ablate.values=[5,10,40]",
            "--set", "ablate.seeds=[0,1]",
            "--set", "grpo.iterations=2",
        ],
    ));
    let summary: Vec<SummaryRecord> = read_all(&dir.join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 3);
    let per_iter: Vec<f64> = summary.iter().map(|s| s.net_evals.unwrap()).collect();
    assert_eq!(per_iter[1], 2.0 * per_iter[0]);
    assert_eq!(per_iter[2], 8.0 * per_iter[0]);
    let runs: Vec<ChildRecord> = read_all(&dir.join("logs/runs.csv")).unwrap();
    assert_eq!(runs.len(), 6);
    assert!(runs.iter().all(|r| r.status == "ok"));
    assert!(dir.join("t_train_40/seed_1/logs/grpo.csv").is_file());
    assert!(dir.join("plots/overlay.svg").is_file());
}

#[test]
fn ablate_records_failed_children() {
    // G = 1 is rejected by the trainer; the grid still completes.
    let dir = ok(&with(
        "ablate",
        &shared().root.join("ablate_fail"),
        &["--set", "ablate.axis=\"g\"", "--set", "ablate.values=[1,4]", "--set", "grpo.iterations=1"],
    ));
    let runs: Vec<ChildRecord> = read_all(&dir.join("logs/runs.csv")).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].status, "failed");
    assert!(!runs[0].error.is_empty());
    assert_eq!(runs[1].status, "ok");
    let summary: Vec<SummaryRecord> = read_all(&dir.join("summary.csv")).unwrap();
    assert_eq!(summary[0].final_reward, None);
    assert!(summary[1].final_reward.is_some());
}
