//! The five subcommands. Each writes one run directory and returns its path.

use std::path::{Path, PathBuf};
use std::time::Instant;

use flowgrpo_core::baselines::{train_baseline, Method};
use flowgrpo_core::eval::{
    evaluate_policy, marginal_equivalence_test, pooled_ode, pooled_sde, EquivalenceConfig,
    MetricReport, PolicyEvalConfig,
};
use flowgrpo_core::flow::{pretrain, DatasetSpec};
use flowgrpo_core::grpo::{train_grpo, TrainLogRow, TrainOutcome};
use flowgrpo_core::numerics::Rng;
use flowgrpo_core::rewards::RewardSpec;
use flowgrpo_core::sampler::{sample_ode, Drift, NoiseSchedule, TimeGrid};
use flowgrpo_core::{VelocityField, VelocityNet};
use rayon::prelude::*;

use crate::config::{format_number, RunConfig};
use crate::error::{CliError, CliResult};
use crate::logs::{self, ChildRecord, CsvLog, SummaryRecord, TrainRecord};
use crate::plot;
use crate::rundir::RunDir;

pub const CHECKPOINT: &str = "checkpoints/model.ckpt";

/// Progress on stderr, silenced by setting `FLOWGRPO_QUIET`.
fn progress(msg: &str) {
    if std::env::var_os("FLOWGRPO_QUIET").is_none() {
        eprintln!("[flowgrpo] {msg}");
    }
}

/// The checkpoint given on the command line, else `run.checkpoint`.
fn resolve_checkpoint(cfg: &RunConfig, cli: Option<&Path>) -> CliResult<PathBuf> {
    let path = cli
        .map(Path::to_path_buf)
        .or_else(|| cfg.checkpoint_path())
        .ok_or_else(|| CliError::Config("no checkpoint given (use --checkpoint or run.checkpoint)".into()))?;
    if !path.is_file() {
        return Err(CliError::Io(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_matching(path: &Path, dataset: &DatasetSpec) -> CliResult<VelocityNet> {
    let net = VelocityNet::load_checkpoint(path)?;
    if net.dim() != dataset.dim() || net.conditions() != dataset.conditions() {
        return Err(CliError::Config(format!(
            "checkpoint has d={}, K={} but the dataset has d={}, K={}",
            net.dim(),
            net.conditions(),
            dataset.dim(),
            dataset.conditions()
        )));
    }
    Ok(net)
}

fn per_condition_scatter(samples: &[Vec<Vec<f64>>]) -> Vec<(String, Vec<(f64, f64)>)> {
    samples
        .iter()
        .enumerate()
        .map(|(c, xs)| {
            let pts = xs.iter().map(|x| (x[0], x.get(1).copied().unwrap_or(0.0))).collect();
            (format!("c={c}"), pts)
        })
        .collect()
}

pub fn cmd_pretrain(cfg: &RunConfig) -> CliResult<PathBuf> {
    let pc = cfg.pretrain_config()?;
    let rd = RunDir::create(&cfg.output_dir())?;
    rd.write_config(cfg)?;
    progress(&format!("pretraining for {} steps", pc.steps));
    let out = pretrain(&pc)?;
    out.net.save_checkpoint(&rd.path(CHECKPOINT))?;
    logs::write_all(
        &rd.path("logs/pretrain.csv"),
        &logs::pretrain_records(&out.log, cfg.boolean("run.wall_clock")),
    )?;
    let k = pc.dataset.conditions();
    let n = cfg.count("pretrain.plot_samples")?.max(k);
    let grid = TimeGrid::uniform(cfg.count("eval.steps")?)?;
    let mut rng = Rng::substream(pc.seed, 30);
    let mut samples = Vec::with_capacity(k);
    for c in 0..k {
        samples.push(sample_ode(&out.net, n / k, &grid, c, &mut rng)?);
    }
    rd.write(
        "plots/samples.svg",
        plot::scatter("ODE samples after pretraining", &per_condition_scatter(&samples)).as_bytes(),
    )?;
    if let Some(last) = out.log.last() {
        progress(&format!("final loss {:.4}", last.loss));
    }
    rd.finish("pretrain", cfg)?;
    Ok(rd.root().to_path_buf())
}

/// Result of one fine-tuning run, for callers that aggregate runs.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub log: Vec<TrainLogRow>,
    pub wall_s: f64,
}

impl TrainRun {
    pub fn final_reward(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.eval_reward)
    }

    pub fn final_diversity(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.diversity)
    }

    pub fn mean_net_evals(&self) -> Option<f64> {
        (!self.log.is_empty())
            .then(|| self.log.iter().map(|r| r.net_evals as f64).sum::<f64>() / self.log.len() as f64)
    }
}

fn curve_plots(rd: &RunDir, log: &[TrainLogRow]) -> CliResult<()> {
    let x = |r: &TrainLogRow| r.prompts_seen as f64;
    let train: Vec<(f64, f64)> = log.iter().map(|r| (x(r), r.mean_reward)).collect();
    let eval: Vec<(f64, f64)> = log.iter().filter_map(|r| r.eval_reward.map(|e| (x(r), e))).collect();
    rd.write(
        "plots/reward.svg",
        plot::lines(
            "Reward",
            "training prompts",
            "reward",
            &[("train (SDE)".into(), train), ("eval".into(), eval)],
        )
        .as_bytes(),
    )?;
    let kl: Vec<(f64, f64)> = log.iter().map(|r| (x(r), r.mean_kl)).collect();
    rd.write(
        "plots/kl.svg",
        plot::lines("Mean per-step KL", "training prompts", "KL", &[("kl".into(), kl)]).as_bytes(),
    )?;
    let div: Vec<(f64, f64)> = log.iter().filter_map(|r| r.diversity.map(|d| (x(r), d))).collect();
    rd.write(
        "plots/diversity.svg",
        plot::lines("Diversity", "training prompts", "mean pairwise distance", &[("eval".into(), div)])
            .as_bytes(),
    )?;
    Ok(())
}

/// Shared driver for GRPO and the baselines: streams the CSV log, writes
/// periodic checkpoints and the final artifacts.
fn run_training(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    command: &str,
    log_name: &str,
    train: impl FnOnce(
        &VelocityNet,
        &RewardSpec,
        &mut dyn FnMut(&TrainLogRow, &VelocityNet) -> flowgrpo_core::Result<()>,
    ) -> CliResult<(TrainOutcome, Vec<logs::RwrRecord>)>,
) -> CliResult<TrainRun> {
    let dataset = cfg.dataset()?;
    let reward = cfg.reward(&dataset)?;
    let ckpt = resolve_checkpoint(cfg, checkpoint)?;
    let base = load_matching(&ckpt, &dataset)?;
    let ckpt_interval = cfg.count("grpo.checkpoint_interval")?;
    let wall_clock = cfg.boolean("run.wall_clock");
    let rd = RunDir::create(&cfg.output_dir())?;
    rd.write_config(cfg)?;
    let mut csv = CsvLog::create(&rd.path(&format!("logs/{log_name}")))?;
    let start = Instant::now();
    let mut io_error = None;
    let mut on_iter = |row: &TrainLogRow, net: &VelocityNet| -> flowgrpo_core::Result<()> {
        let mut step = || -> CliResult<()> {
            csv.push(&TrainRecord::from_row(row, wall_clock))?;
            if ckpt_interval > 0 && (row.iter + 1) % ckpt_interval == 0 {
                net.save_checkpoint(&rd.path(&format!("checkpoints/iter_{:05}.ckpt", row.iter + 1)))?;
            }
            if let Some(e) = row.eval_reward {
                progress(&format!(
                    "{command} iter {} eval reward {e:.4} diversity {:.4}",
                    row.iter + 1,
                    row.diversity.unwrap_or(f64::NAN)
                ));
            }
            Ok(())
        };
        step().map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            flowgrpo_core::Error::InvalidArgument(msg)
        })
    };
    let result = train(&base, &reward, &mut on_iter);
    let (outcome, rwr) = match result {
        Ok(v) => v,
        Err(e) => return Err(io_error.take().unwrap_or(e)),
    };
    drop(csv);
    outcome.net.save_checkpoint(&rd.path(CHECKPOINT))?;
    if !rwr.is_empty() {
        logs::write_all(&rd.path("logs/rwr_weights.csv"), &rwr)?;
    }
    curve_plots(&rd, &outcome.log)?;
    let wall_s = if wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };
    rd.finish(command, cfg)?;
    Ok(TrainRun {
        dir: rd.root().to_path_buf(),
        log: outcome.log,
        wall_s,
    })
}

pub fn cmd_grpo(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<TrainRun> {
    let gc = cfg.grpo_config()?;
    run_training(cfg, checkpoint, "grpo", "grpo.csv", |base, reward, on_iter| {
        let r = |x: &[f64], c: usize| reward.score(x, c);
        let out = train_grpo(base, &r, &gc, on_iter)?;
        Ok((out, Vec::new()))
    })
}

pub fn cmd_baseline(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<TrainRun> {
    let bc = cfg.baseline_config()?;
    run_training(cfg, checkpoint, "baseline", "baseline.csv", |base, reward, on_iter| {
        let r = |x: &[f64], c: usize| reward.score(x, c);
        let out = train_baseline(base, &r, &bc, on_iter)?;
        let rwr = if bc.method == Method::Rwr {
            logs::rwr_records(&out.rwr_weights)
        } else {
            Vec::new()
        };
        Ok((out.train, rwr))
    })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<(PathBuf, Vec<MetricReport>)> {
    let dataset = cfg.dataset()?;
    let ckpt = resolve_checkpoint(cfg, checkpoint)?;
    let net = load_matching(&ckpt, &dataset)?;
    let seed = cfg.seed()?;
    let n = cfg.count("eval.samples")?;
    let steps = cfg.count("eval.steps")?;
    let grid = TimeGrid::uniform(steps)?;
    let schedule = NoiseSchedule::new(cfg.float("eval.a"));
    schedule.validate().map_err(CliError::from_config)?;
    let drift = if cfg.boolean("eval.corrupt_drift") {
        Drift::Uncorrected
    } else {
        Drift::Corrected
    };
    let eq = EquivalenceConfig {
        n_projections: cfg.count("eval.projections")?,
        threshold: cfg.float("eval.threshold"),
        drift,
    };
    if n < 2 || eq.n_projections == 0 {
        return Err(CliError::Config("eval.samples >= 2 and eval.projections >= 1 required".into()));
    }
    let rd = RunDir::create(&cfg.output_dir())?;
    rd.write_config(cfg)?;
    let mut rng = Rng::substream(seed, 40);
    let k = net.conditions();
    let mut reports = vec![marginal_equivalence_test(&net, k, &grid, &schedule, n, &eq, &mut rng)?];

    let reward = dataset.centers().is_some().then(|| cfg.reward(&dataset)).transpose()?;
    let pe = PolicyEvalConfig {
        steps,
        samples_per_condition: cfg.count("eval.diversity_samples")?,
        sde_noise: None,
        seed,
    };
    let ev = match &reward {
        Some(spec) => evaluate_policy(&net, &|x: &[f64], c| spec.score(x, c), &pe)?,
        None => evaluate_policy(&net, &|_: &[f64], _| 0.0, &pe)?,
    };
    let per_cond = pe.samples_per_condition * k;
    reports.push(MetricReport::scalar("diversity", ev.diversity, per_cond));
    if let Some(spec) = &reward {
        let name = match spec {
            RewardSpec::ModeMatch { .. } => "mode_match_accuracy".to_string(),
            _ => format!("reward_{}", cfg.string("reward.kind")),
        };
        reports.push(MetricReport::scalar(&name, ev.reward, per_cond));
    }
    let mut text = String::from(MetricReport::CSV_HEADER);
    text.push('\n');
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    rd.write("logs/eval.csv", text.as_bytes())?;

    let m = cfg.count("eval.plot_samples")?.max(k);
    let mut prng = Rng::substream(seed, 41);
    let ode = pooled_ode(&net, m, k, &grid, &mut prng)?;
    let sde = pooled_sde(&net, m, k, &grid, &schedule, drift, &mut prng)?;
    let pts = |xs: &[Vec<f64>]| xs.iter().map(|x| (x[0], x.get(1).copied().unwrap_or(0.0))).collect();
    rd.write(
        "plots/ode_vs_sde.svg",
        plot::scatter(
            "ODE vs SDE terminal samples",
            &[("ODE".into(), pts(&ode)), ("SDE".into(), pts(&sde))],
        )
        .as_bytes(),
    )?;
    for r in &reports {
        progress(&format!("{} = {:.5} (pass: {})", r.name, r.value, r.pass));
    }
    rd.finish("eval", cfg)?;
    Ok((rd.root().to_path_buf(), reports))
}

/// Config key and integer-ness of each ablation axis.
fn axis_key(axis: &str) -> CliResult<(&'static str, bool)> {
    match axis {
        "a" => Ok(("grpo.a", false)),
        "g" | "G" => Ok(("grpo.group_size", true)),
        "t_train" => Ok(("grpo.t_train", true)),
        "beta" => Ok(("grpo.beta", false)),
        other => Err(CliError::Config(format!(
            "unknown ablation axis `{other}` (expected a, g, t_train or beta)"
        ))),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One GRPO run per `(value, seed)`; failures are recorded and the grid continues.
pub fn cmd_ablate(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<(PathBuf, Vec<SummaryRecord>)> {
    let axis = cfg.string("ablate.axis").to_string();
    let (key, integer) = axis_key(&axis)?;
    let values = cfg.floats("ablate.values");
    let seeds = cfg.ints("ablate.seeds");
    if values.is_empty() || seeds.is_empty() || seeds.iter().any(|&s| s < 0) {
        return Err(CliError::Config("ablate.values and ablate.seeds must be non-empty, seeds >= 0".into()));
    }
    if integer && values.iter().any(|v| v.fract() != 0.0) {
        return Err(CliError::Config(format!("axis `{axis}` takes integer values")));
    }
    let ckpt = resolve_checkpoint(cfg, checkpoint)?;
    let root = cfg.output_dir();
    let rd = RunDir::create(&root)?;
    rd.write_config(cfg)?;
    let wall_clock = cfg.boolean("run.wall_clock");

    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s as u64)))
        .collect();
    let results: Vec<CliResult<TrainRun>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let mut child = cfg.clone();
            if integer {
                child.set_int(key, v as i64);
            } else {
                child.set_float(key, v);
            }
            child.set_int("seed", seed as i64);
            let dir = root.join(format!("{axis}_{}", format_number(v))).join(format!("seed_{seed}"));
            child.set_str("output_dir", &dir.to_string_lossy());
            cmd_grpo(&child, Some(&ckpt))
        })
        .collect();

    let mut children = Vec::with_capacity(jobs.len());
    for (&(value, seed), res) in jobs.iter().zip(&results) {
        children.push(match res {
            Ok(run) => ChildRecord {
                axis: axis.clone(),
                value,
                seed,
                status: "ok".into(),
                final_reward: run.final_reward(),
                diversity: run.final_diversity(),
                net_evals: run.mean_net_evals(),
                wall_s: Some(if wall_clock { run.wall_s } else { 0.0 }),
                error: String::new(),
            },
            Err(e) => {
                progress(&format!("child {axis}={value} seed {seed} failed: {e}"));
                ChildRecord {
                    axis: axis.clone(),
                    value,
                    seed,
                    status: "failed".into(),
                    final_reward: None,
                    diversity: None,
                    net_evals: None,
                    wall_s: None,
                    error: e.to_string(),
                }
            }
        });
    }
    let summary: Vec<SummaryRecord> = values
        .iter()
        .map(|&v| {
            let ok: Vec<&ChildRecord> = children.iter().filter(|c| c.value == v && c.status == "ok").collect();
            SummaryRecord {
                axis: axis.clone(),
                value: v,
                final_reward: mean(ok.iter().filter_map(|c| c.final_reward)),
                diversity: mean(ok.iter().filter_map(|c| c.diversity)),
                net_evals: mean(ok.iter().filter_map(|c| c.net_evals)),
                wall_s: mean(ok.iter().filter_map(|c| c.wall_s)),
            }
        })
        .collect();
    logs::write_all(&rd.path("summary.csv"), &summary)?;
    logs::write_all(&rd.path("logs/runs.csv"), &children)?;

    // Overlay of the seed-averaged eval reward curves.
    let mut series = Vec::new();
    for &v in &values {
        let runs: Vec<&TrainRun> = jobs
            .iter()
            .zip(&results)
            .filter(|((jv, _), _)| *jv == v)
            .filter_map(|(_, r)| r.as_ref().ok())
            .collect();
        let Some(first) = runs.first() else { continue };
        let pts = first
            .log
            .iter()
            .enumerate()
            .filter(|(_, r)| r.eval_reward.is_some())
            .map(|(i, r)| {
                let m = mean(runs.iter().filter_map(|run| run.log.get(i).and_then(|x| x.eval_reward)));
                (r.prompts_seen as f64, m.unwrap_or(f64::NAN))
            })
            .collect();
        series.push((format!("{axis}={}", format_number(v)), pts));
    }
    rd.write(
        "plots/overlay.svg",
        plot::lines(&format!("Ablation over {axis}"), "training prompts", "eval reward", &series).as_bytes(),
    )?;
    rd.finish("ablate", cfg)?;
    Ok((rd.root().to_path_buf(), summary))
}
