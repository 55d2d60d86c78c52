//! Best-of-group SFT, reward-weighted regression and Flow-DPO, trained on
//! the same rollout groups as GRPO.
//!
//! Each update takes flow-matching draws explicitly, laid out one per
//! terminal sample in group order (SFT and RWR) or one per group (DPO), so
//! gradients can be checked against finite differences at fixed noise.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, PolicyEvalConfig};
use crate::flow::{fm_draws, fm_evaluate, FmDraw};
use crate::grpo::{collect_groups, mean_group_reward, Group, HarnessConfig, TrainLogRow, TrainOutcome};
use crate::model::{VelocityField, VelocityNet};
use crate::numerics::{adam_step, AdamState, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sft,
    Rwr,
    Dpo,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Method::Sft),
            "rwr" => Ok(Method::Rwr),
            "dpo" => Ok(Method::Dpo),
            _ => Err(Error::InvalidArgument(format!(
                "unknown baseline method {s:?} (expected sft, rwr or dpo)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Rwr => "rwr",
            Method::Dpo => "dpo",
        }
    }
}

/// Index of the highest reward; ties go to the lowest index.
pub fn best_index(rewards: &[f64]) -> usize {
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
    }
    best
}

/// Index of the lowest reward; ties go to the lowest index.
pub fn worst_index(rewards: &[f64]) -> usize {
    let mut worst = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r < rewards[worst] {
            worst = i;
        }
    }
    worst
}

/// Numerically stable softmax.
pub fn rwr_weights(rewards: &[f64]) -> Vec<f64> {
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rewards.iter().map(|r| (r - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn sample_count(groups: &[Group]) -> usize {
    groups.iter().map(|g| g.trajectories.len()).sum()
}

fn check_draws(groups: &[Group], draws: &[FmDraw], expected: usize) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups".into()));
    }
    if draws.len() != expected {
        return Err(Error::Shape(format!("{} draws, expected {expected}", draws.len())));
    }
    Ok(())
}

/// Flow-matching loss on each group's best terminal sample, averaged over
/// groups. `draws` has one entry per sample; the best sample's is used.
pub fn sft_update(net: &VelocityNet, groups: &[Group], draws: &[FmDraw]) -> Result<(f64, Vec<Tensor>)> {
    check_draws(groups, draws, sample_count(groups))?;
    let mut x0s = Vec::with_capacity(groups.len());
    let mut cs = Vec::with_capacity(groups.len());
    let mut picked = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        let b = best_index(&g.rewards);
        x0s.push(g.trajectories[b].terminal());
        cs.push(g.condition);
        picked.push(draws[offset + b].clone());
        offset += g.trajectories.len();
    }
    let eval = fm_evaluate(net, &x0s, &cs, &picked)?;
    let w = 1.0 / groups.len() as f64;
    let loss = eval.errors.iter().sum::<f64>() * w;
    let grads = eval.weighted_grads(net, &vec![w; groups.len()])?;
    Ok((loss, grads))
}

/// `mean_g Σ_i softmax(R_g)_i · e_gi` with one draw per sample.
pub fn rwr_update(net: &VelocityNet, groups: &[Group], draws: &[FmDraw]) -> Result<(f64, Vec<Tensor>)> {
    check_draws(groups, draws, sample_count(groups))?;
    let mut x0s = Vec::new();
    let mut cs = Vec::new();
    let mut weights = Vec::new();
    let scale = 1.0 / groups.len() as f64;
    for g in groups {
        for (traj, w) in g.trajectories.iter().zip(rwr_weights(&g.rewards)) {
            x0s.push(traj.terminal());
            cs.push(g.condition);
            weights.push(w * scale);
        }
    }
    let eval = fm_evaluate(net, &x0s, &cs, draws)?;
    let loss = eval.errors.iter().zip(&weights).map(|(e, w)| e * w).sum();
    let grads = eval.weighted_grads(net, &weights)?;
    Ok((loss, grads))
}

/// `(chosen, rejected)` indices per group, or `None` when all rewards tie.
pub fn preference_pair(rewards: &[f64]) -> Option<(usize, usize)> {
    let (b, w) = (best_index(rewards), worst_index(rewards));
    (rewards[b] > rewards[w]).then_some((b, w))
}

/// `softplus(β[(e_θ(ch) - e_ref(ch)) - (e_θ(rej) - e_ref(rej))])` averaged
/// over groups with a strict preference; one draw per group is shared by the
/// chosen and rejected samples and by both networks.
///
/// Groups whose rewards all tie contribute nothing; if every group ties the
/// loss and gradients are zero.
pub fn dpo_update(
    net: &VelocityNet,
    reference: &VelocityNet,
    groups: &[Group],
    draws: &[FmDraw],
    beta_dpo: f64,
) -> Result<(f64, Vec<Tensor>)> {
    check_draws(groups, draws, groups.len())?;
    if !(beta_dpo > 0.0) {
        return Err(Error::InvalidArgument(format!("beta_dpo must be positive, got {beta_dpo}")));
    }
    let mut x0s = Vec::new();
    let mut cs = Vec::new();
    let mut shared = Vec::new();
    for (g, draw) in groups.iter().zip(draws) {
        if let Some((ch, rej)) = preference_pair(&g.rewards) {
            for i in [ch, rej] {
                x0s.push(g.trajectories[i].terminal());
                cs.push(g.condition);
                shared.push(draw.clone());
            }
        }
    }
    if x0s.is_empty() {
        return Ok((0.0, net.zero_grads()));
    }
    let pairs = x0s.len() / 2;
    let theta = fm_evaluate(net, &x0s, &cs, &shared)?;
    let refe = fm_evaluate(reference, &x0s, &cs, &shared)?;
    let mut loss = 0.0;
    let mut weights = vec![0.0; x0s.len()];
    for p in 0..pairs {
        let (ch, rej) = (2 * p, 2 * p + 1);
        let diff = (theta.errors[ch] - refe.errors[ch]) - (theta.errors[rej] - refe.errors[rej]);
        // loss = -log σ(m) with m = -β·diff, i.e. softplus(β·diff).
        let z = beta_dpo * diff;
        loss += softplus(z);
        let s = sigmoid(z) / pairs as f64;
        weights[ch] = beta_dpo * s;
        weights[rej] = -beta_dpo * s;
    }
    loss /= pairs as f64;
    let grads = theta.weighted_grads(net, &weights)?;
    Ok((loss, grads))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub method: Method,
    pub online: bool,
    pub refresh_interval: usize,
    /// Online DPO only: re-anchor the reference to the collection network at
    /// every refresh (iterative DPO). Offline runs always use the base.
    pub refresh_reference: bool,
    pub beta_dpo: f64,
    pub group_size: usize,
    pub a: f64,
    pub t_train: usize,
    pub t_eval: usize,
    pub lr: f64,
    pub iterations: usize,
    pub prompts_per_iter: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub eval_sde: bool,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            online: true,
            refresh_interval: 40,
            refresh_reference: true,
            beta_dpo: 1.0,
            group_size: 24,
            a: 0.7,
            t_train: 10,
            t_eval: 40,
            lr: 3e-4,
            iterations: 500,
            prompts_per_iter: 4,
            eval_interval: 25,
            eval_samples: 256,
            eval_sde: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.refresh_interval == 0 {
            return bad("refresh_interval must be at least 1");
        }
        if self.method == Method::Dpo && !(self.beta_dpo > 0.0) {
            return bad("beta_dpo must be positive");
        }
        if self.group_size < 2 || self.t_train < 1 || self.t_eval < 1 {
            return bad("group size must be >= 2 and step counts >= 1");
        }
        if !(self.a > 0.0) || !(self.lr > 0.0) {
            return bad("a and lr must be positive");
        }
        if self.prompts_per_iter == 0 || self.eval_interval == 0 || self.eval_samples < 2 {
            return bad("prompts_per_iter and eval_interval must be positive, eval_samples >= 2");
        }
        Ok(())
    }

    pub fn eval_config(&self) -> PolicyEvalConfig {
        PolicyEvalConfig {
            steps: self.t_eval,
            samples_per_condition: self.eval_samples,
            sde_noise: self.eval_sde.then_some(self.a),
            seed: self.seed,
        }
    }
}

/// RWR softmax weights of one group at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RwrWeights {
    pub iter: usize,
    pub condition: usize,
    pub rewards: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub train: TrainOutcome,
    /// Filled for RWR only.
    pub rwr_weights: Vec<RwrWeights>,
}

/// Trains one baseline from `base`, which is also the initial DPO reference.
///
/// Offline runs always collect with `base`; online runs replace the
/// collection network (and, with `refresh_reference`, the DPO reference) with
/// the live one every `refresh_interval` iterations.
pub fn train_baseline<R>(
    base: &VelocityNet,
    reward: &R,
    config: &BaselineConfig,
    mut on_iter: impl FnMut(&TrainLogRow, &VelocityNet) -> Result<()>,
) -> Result<BaselineOutcome>
where
    R: Fn(&[f64], usize) -> f64 + Sync,
{
    config.validate()?;
    let mut reference = base.clone();
    let mut net = base.clone();
    let mut collector = base.clone();
    let mut adam = AdamState::new(net.params(), config.lr);
    let mut rng = Rng::substream(config.seed, 10);
    let mut fm_rng = Rng::substream(config.seed, 11);
    let harness = HarnessConfig {
        group_size: config.group_size,
        prompts_per_iter: config.prompts_per_iter,
        conditions: base.conditions(),
        a: config.a,
        t_train: config.t_train,
    };
    let eval_cfg = config.eval_config();
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.iterations);
    let mut rwr_log = Vec::new();
    for iter in 0..config.iterations {
        if config.online && iter > 0 && iter % config.refresh_interval == 0 {
            collector = net.clone();
            if config.refresh_reference {
                reference = collector.clone();
            }
        }
        let (groups, mut net_evals) = collect_groups(&collector, reward, &harness, iter, &mut rng)?;
        let d = net.dim();
        let grads = match config.method {
            Method::Sft => {
                let draws = fm_draws(sample_count(&groups), d, &mut fm_rng);
                net_evals += groups.len() as u64;
                sft_update(&net, &groups, &draws)?.1
            }
            Method::Rwr => {
                let n = sample_count(&groups);
                let draws = fm_draws(n, d, &mut fm_rng);
                net_evals += n as u64;
                for g in &groups {
                    rwr_log.push(RwrWeights {
                        iter,
                        condition: g.condition,
                        rewards: g.rewards.clone(),
                        weights: rwr_weights(&g.rewards),
                    });
                }
                rwr_update(&net, &groups, &draws)?.1
            }
            Method::Dpo => {
                let draws = fm_draws(groups.len(), d, &mut fm_rng);
                let pairs = groups.iter().filter(|g| preference_pair(&g.rewards).is_some()).count();
                net_evals += 4 * pairs as u64;
                dpo_update(&net, &reference, &groups, &draws, config.beta_dpo)?.1
            }
        };
        adam_step(net.params_mut(), &grads, &mut adam)?;
        let mut row = TrainLogRow {
            iter,
            mean_reward: mean_group_reward(&groups),
            eval_reward: None,
            mean_kl: 0.0,
            clip_frac: 0.0,
            diversity: None,
            net_evals,
            wall_ms: 0,
            degenerate_groups: groups.iter().filter(|g| g.is_degenerate()).count(),
            prompts_seen: (iter + 1) * config.prompts_per_iter,
        };
        if (iter + 1) % config.eval_interval == 0 || iter + 1 == config.iterations {
            let ev = evaluate_policy(&net, reward, &eval_cfg)?;
            row.eval_reward = Some(ev.reward);
            row.diversity = Some(ev.diversity);
        }
        row.wall_ms = start.elapsed().as_millis() as u64;
        on_iter(&row, &net)?;
        log.push(row);
    }
    Ok(BaselineOutcome {
        train: TrainOutcome { net, log },
        rwr_weights: rwr_log,
    })
}
