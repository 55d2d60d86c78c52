//! Group-relative policy optimization over SDE denoising trajectories.
//!
//! Each iteration freezes a copy of the live network as the behaviour policy,
//! rolls out groups of `G` trajectories per condition on a short training
//! grid, standardizes terminal rewards within each group and takes gradient
//! steps on the clipped ratio objective with a closed-form Gaussian KL penalty
//! toward a frozen reference network.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, PolicyEvalConfig};
use crate::model::{VelocityField, VelocityNet};
use crate::numerics::{adam_step, AdamState, Rng, Tensor};
use crate::sampler::{
    mean_velocity_jacobian, rollout_sde, sde_mean, transition_logprob, CountingField, Drift,
    NoiseSchedule, TimeGrid, Trajectory,
};

/// Reward-std threshold below which a group is treated as degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `(R_i - mean) / std` with the population std; all zeros if `std < 1e-8`.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Closed-form KL between the Gaussian transitions of two velocity predictions
/// at the same state: `(|dt|/2) · (σ(1-t)/(2t) + 1/σ)² · ‖v_θ - v_ref‖²`.
pub fn kl_term(v_theta: &[f64], v_ref: &[f64], t: f64, dt: f64, schedule: &NoiseSchedule) -> Result<f64> {
    let s = schedule.sigma(t);
    if !(s > 0.0) {
        return Err(Error::InvalidArgument("KL is undefined for a zero-noise policy".into()));
    }
    Ok(kl_from_sigma(v_theta, v_ref, t, dt, s))
}

fn kl_coefficient(t: f64, sigma: f64) -> f64 {
    sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma
}

fn kl_from_sigma(v_theta: &[f64], v_ref: &[f64], t: f64, dt: f64, sigma: f64) -> f64 {
    let c = kl_coefficient(t, sigma);
    0.5 * dt.abs() * c * c * crate::numerics::dist_sq(v_theta, v_ref)
}

/// `exp(ℓ_new - ℓ_old)`.
pub fn ratio(logprob_new: f64, logprob_old: f64) -> f64 {
    (logprob_new - logprob_old).exp()
}

/// `G` trajectories sharing one condition, their rewards and advantages.
#[derive(Debug, Clone)]
pub struct Group {
    pub condition: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self> {
        if trajectories.is_empty() || trajectories.len() != rewards.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trajectories with {} rewards",
                trajectories.len(),
                rewards.len()
            )));
        }
        let condition = trajectories[0].condition;
        let grid = &trajectories[0].grid;
        if trajectories
            .iter()
            .any(|t| t.condition != condition || &t.grid != grid)
        {
            return Err(Error::InvalidArgument(
                "group trajectories must share condition and grid".into(),
            ));
        }
        let advantages = group_advantages(&rewards);
        Ok(Self {
            condition,
            trajectories,
            rewards,
            advantages,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }

    pub fn terminals(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.terminal().to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoLossConfig {
    pub clip_range: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GrpoDiagnostics {
    pub mean_ratio: f64,
    /// Fraction of transitions whose ratio lies outside `[1 - ε, 1 + ε]`.
    pub clip_frac: f64,
    pub mean_kl: f64,
    pub max_abs_log_ratio: f64,
    pub transitions: usize,
    pub net_evals: u64,
}

/// Per-transition surrogate `min(r·A, clip(r)·A)` and its derivative in `r`.
pub fn clipped_surrogate(r: f64, advantage: f64, clip_range: f64) -> (f64, f64) {
    let clipped = r.clamp(1.0 - clip_range, 1.0 + clip_range);
    let unclipped_obj = r * advantage;
    let clipped_obj = clipped * advantage;
    if unclipped_obj <= clipped_obj {
        (unclipped_obj, advantage)
    } else {
        let in_range = (1.0 - clip_range..=1.0 + clip_range).contains(&r);
        (clipped_obj, if in_range { advantage } else { 0.0 })
    }
}

/// Negated clipped objective averaged over trajectories and their
/// transitions, with its exact gradient.
///
/// `groups` must carry the behaviour policy's stored log-probabilities.
/// Gradients flow through `v_θ` into both the transition mean (ratio term)
/// and the KL term; `reference` is only evaluated when `beta > 0`.
pub fn grpo_loss_and_grads(
    net: &VelocityNet,
    reference: &VelocityNet,
    groups: &[Group],
    config: &GrpoLossConfig,
) -> Result<(f64, Vec<Tensor>, GrpoDiagnostics)> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups".into()));
    }
    if !(config.clip_range > 0.0) || !(config.beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid loss config {config:?}")));
    }
    let d = net.dim();
    let n_traj: usize = groups.iter().map(|g| g.trajectories.len()).sum();

    // Flatten every transition into one batch.
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut cs = Vec::new();
    struct Row<'a> {
        traj: &'a Trajectory,
        step: usize,
        advantage: f64,
        weight: f64,
    }
    let mut rows = Vec::new();
    for g in groups {
        for (traj, &adv) in g.trajectories.iter().zip(&g.advantages) {
            let steps = traj.steps();
            if steps == 0 {
                return Err(Error::InvalidArgument("empty trajectory".into()));
            }
            let w = 1.0 / (n_traj as f64 * steps as f64);
            for k in 0..steps {
                xs.extend_from_slice(&traj.states[k]);
                ts.push(traj.grid.times()[k]);
                cs.push(traj.condition);
                rows.push(Row {
                    traj,
                    step: k,
                    advantage: adv,
                    weight: w,
                });
            }
        }
    }
    let (v, tape) = net.forward_batch(&xs, &ts, &cs)?;
    let mut net_evals = rows.len() as u64;
    let v_ref = if config.beta > 0.0 {
        net_evals += rows.len() as u64;
        Some(reference.velocity_batch(&xs, &ts, &cs)?)
    } else {
        None
    };

    let mut upstream = vec![0.0; v.len()];
    let mut objective = 0.0;
    let mut diag = GrpoDiagnostics {
        transitions: rows.len(),
        net_evals,
        ..Default::default()
    };
    for (j, row) in rows.iter().enumerate() {
        let traj = row.traj;
        let k = row.step;
        let t = ts[j];
        let dt = traj.grid.dt();
        let s = traj.schedule.sigma(t);
        let old_lp = traj.logprobs[k].ok_or_else(|| {
            Error::InvalidArgument("trajectory has no log-probabilities (zero noise)".into())
        })?;
        let x = &traj.states[k];
        let x_next = &traj.states[k + 1];
        let vj = &v[j * d..(j + 1) * d];
        let mean = sde_mean(x, vj, t, dt, s, Drift::Corrected);
        let new_lp = transition_logprob(&mean, x_next, s, dt)?;
        let log_r = new_lp - old_lp;
        let r = log_r.exp();
        let (surr, dsurr_dr) = clipped_surrogate(r, row.advantage, config.clip_range);

        // dℓ/dv = J (x_next - mean) / (σ² |dt|)
        let jac = mean_velocity_jacobian(t, dt, s);
        let coef = dsurr_dr * r * jac / (s * s * dt.abs());
        let up = &mut upstream[j * d..(j + 1) * d];
        for i in 0..d {
            up[i] = -row.weight * coef * (x_next[i] - mean[i]);
        }
        let mut term = surr;
        if let Some(vr) = &v_ref {
            let vrj = &vr[j * d..(j + 1) * d];
            let kl = kl_from_sigma(vj, vrj, t, dt, s);
            let c = kl_coefficient(t, s);
            let g = dt.abs() * c * c;
            for i in 0..d {
                up[i] += row.weight * config.beta * g * (vj[i] - vrj[i]);
            }
            term -= config.beta * kl;
            diag.mean_kl += kl;
        }
        objective += row.weight * term;
        diag.mean_ratio += r;
        if (r - 1.0).abs() > config.clip_range {
            diag.clip_frac += 1.0;
        }
        diag.max_abs_log_ratio = diag.max_abs_log_ratio.max(log_r.abs());
    }
    let m = rows.len() as f64;
    diag.mean_ratio /= m;
    diag.clip_frac /= m;
    diag.mean_kl /= m;
    let loss = -objective;
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite GRPO loss".into()));
    }
    let (grads, _) = net.backward_batch(&tape, &upstream)?;
    Ok((loss, grads, diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub a: f64,
    pub t_train: usize,
    pub t_eval: usize,
    pub clip_range: f64,
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    pub prompts_per_iter: usize,
    pub inner_epochs: usize,
    /// Evaluate every this many iterations (and after the last one).
    pub eval_interval: usize,
    pub eval_samples: usize,
    /// Use SDE instead of ODE sampling for periodic evaluation.
    pub eval_sde: bool,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 24,
            a: 0.7,
            t_train: 10,
            t_eval: 40,
            clip_range: 1e-4,
            beta: 0.01,
            lr: 3e-4,
            iterations: 500,
            prompts_per_iter: 4,
            inner_epochs: 1,
            eval_interval: 25,
            eval_samples: 256,
            eval_sde: false,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.group_size < 2 {
            return bad(format!("group size {} < 2", self.group_size));
        }
        if self.t_train < 2 || self.t_eval < 1 {
            return bad("T_train must be >= 2 and T_eval >= 1".into());
        }
        if !(self.beta >= 0.0) || !(self.clip_range > 0.0) || !(self.lr > 0.0) {
            return bad("beta >= 0, clip > 0 and lr > 0 required".into());
        }
        if !(self.a > 0.0) {
            return bad("noise level a must be positive for policy-gradient training".into());
        }
        if self.prompts_per_iter == 0 || self.inner_epochs == 0 || self.eval_interval == 0 {
            return bad("prompts_per_iter, inner_epochs and eval_interval must be positive".into());
        }
        if self.eval_samples < 2 {
            return bad("eval_samples must be at least 2".into());
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

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    pub mean_reward: f64,
    pub eval_reward: Option<f64>,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub diversity: Option<f64>,
    /// Velocity evaluations spent on rollouts and loss computation this iteration.
    pub net_evals: u64,
    pub wall_ms: u64,
    pub degenerate_groups: usize,
    pub prompts_seen: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: VelocityNet,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    pub fn final_eval_reward(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.eval_reward)
    }

    pub fn final_diversity(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.diversity)
    }
}

/// Rollout parameters shared by the GRPO trainer and the baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessConfig {
    pub group_size: usize,
    pub prompts_per_iter: usize,
    pub conditions: usize,
    pub a: f64,
    pub t_train: usize,
}

/// Rolls out one group per prompt with the behaviour network and scores it.
///
/// Conditions are assigned round-robin from `iter * prompts_per_iter`.
/// Returns the groups and the number of velocity evaluations used.
pub fn collect_groups<R>(
    behaviour: &VelocityNet,
    reward: &R,
    harness: &HarnessConfig,
    iter: usize,
    rng: &mut Rng,
) -> Result<(Vec<Group>, u64)>
where
    R: Fn(&[f64], usize) -> f64 + Sync,
{
    let grid = TimeGrid::uniform(harness.t_train)?;
    let schedule = NoiseSchedule::new(harness.a);
    let counting = CountingField::new(behaviour);
    let mut groups = Vec::with_capacity(harness.prompts_per_iter);
    for p in 0..harness.prompts_per_iter {
        let c = (iter * harness.prompts_per_iter + p) % harness.conditions;
        let trajs = rollout_sde(&counting, harness.group_size, &grid, &schedule, c, rng)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let rewards: Vec<f64> = trajs.iter().map(|t| reward(t.terminal(), c)).collect();
        groups.push(Group::new(trajs, rewards)?);
    }
    Ok((groups, counting.count()))
}

pub(crate) fn mean_group_reward(groups: &[Group]) -> f64 {
    let (s, n) = groups
        .iter()
        .flat_map(|g| g.rewards.iter())
        .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
    s / n as f64
}

/// Fine-tunes `base` with GRPO; `base` also serves as the frozen reference.
///
/// `on_iter` sees every log row together with the updated network.
pub fn train_grpo<R>(
    base: &VelocityNet,
    reward: &R,
    config: &GrpoConfig,
    mut on_iter: impl FnMut(&TrainLogRow, &VelocityNet) -> Result<()>,
) -> Result<TrainOutcome>
where
    R: Fn(&[f64], usize) -> f64 + Sync,
{
    config.validate()?;
    let reference = base.clone();
    let mut net = base.clone();
    let mut adam = AdamState::new(net.params(), config.lr);
    let mut rng = Rng::substream(config.seed, 10);
    let harness = HarnessConfig {
        group_size: config.group_size,
        prompts_per_iter: config.prompts_per_iter,
        conditions: base.conditions(),
        a: config.a,
        t_train: config.t_train,
    };
    let loss_cfg = GrpoLossConfig {
        clip_range: config.clip_range,
        beta: config.beta,
    };
    let eval_cfg = config.eval_config();
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let behaviour = net.clone();
        let (groups, mut net_evals) = collect_groups(&behaviour, reward, &harness, iter, &mut rng)?;
        let mut last = GrpoDiagnostics::default();
        for _ in 0..config.inner_epochs {
            let (_loss, grads, diag) = grpo_loss_and_grads(&net, &reference, &groups, &loss_cfg)?;
            net_evals += diag.net_evals;
            adam_step(net.params_mut(), &grads, &mut adam)?;
            last = diag;
        }
        let mut row = TrainLogRow {
            iter,
            mean_reward: mean_group_reward(&groups),
            eval_reward: None,
            mean_kl: last.mean_kl,
            clip_frac: last.clip_frac,
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
    Ok(TrainOutcome { net, log })
}
