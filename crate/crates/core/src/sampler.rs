//! Time grids, the noise schedule, Euler ODE sampling and the
//! marginal-preserving Euler–Maruyama SDE sampler.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data) with signed step
//! `dt = -1/T`. One SDE transition is
//!
//! ```text
//! mean   = x + [v + σ²/(2t) · (x + (1 - t) v)] · dt
//! x_next = mean + σ · sqrt(|dt|) · ε,        ε ~ N(0, I)
//! ```
//!
//! so the policy `p(x_next | x)` is isotropic Gaussian with variance `σ²|dt|`.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::numerics::{dist_sq, norm_sq, Rng};

/// Euclidean norm above which a state is treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Trajectories per parallel work item.
const ROLLOUT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `t_k = (T - k) / T` for `k = 0..=T`; endpoints are exactly 1 and 0.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        let times = (0..=steps)
            .map(|k| (steps - k) as f64 / steps as f64)
            .collect();
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Signed step, `-1/T`.
    pub fn dt(&self) -> f64 {
        -1.0 / self.steps() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub a: f64,
    pub t_clamp_lo: f64,
    pub t_clamp_hi: f64,
}

impl NoiseSchedule {
    pub fn new(a: f64) -> Self {
        Self {
            a,
            t_clamp_lo: 1e-3,
            t_clamp_hi: 1.0 - 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.a >= 0.0
            && self.a.is_finite()
            && 0.0 < self.t_clamp_lo
            && self.t_clamp_lo < self.t_clamp_hi
            && self.t_clamp_hi < 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid noise schedule {self:?}")));
        }
        Ok(())
    }

    /// `σ_t = a · sqrt(t' / (1 - t'))` with `t' = clamp(t, lo, hi)`.
    pub fn sigma(&self, t: f64) -> f64 {
        let tc = t.clamp(self.t_clamp_lo, self.t_clamp_hi);
        self.a * (tc / (1.0 - tc)).sqrt()
    }

    /// The schedule the samplers use on `grid`: the upper clamp is lowered to
    /// the first interior grid point `1 - 1/T`, so the `t = 1` step borrows
    /// the noise level of its neighbour instead of `σ` near the singularity.
    pub fn for_grid(&self, grid: &TimeGrid) -> Self {
        let first_interior = grid.times().get(1).copied().unwrap_or(0.0);
        let mut s = *self;
        if grid.steps() >= 2 && first_interior < s.t_clamp_hi {
            s.t_clamp_hi = first_interior.max(s.t_clamp_lo * 2.0);
        }
        s
    }
}

pub fn sigma(t: f64, schedule: &NoiseSchedule) -> f64 {
    schedule.sigma(t)
}

/// Euler step of `dx = v dt`.
pub fn ode_step(v: &[f64], x: &[f64], dt: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| xi + vi * dt).collect()
}

/// Which drift the SDE sampler integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Drift {
    /// Velocity plus the score correction that keeps the ODE marginals.
    #[default]
    Corrected,
    /// Velocity only, with noise added on top. Does not preserve marginals;
    /// exists as a negative control.
    Uncorrected,
}

/// Transition mean of one Euler–Maruyama step.
pub fn sde_mean(x: &[f64], v: &[f64], t: f64, dt: f64, sigma: f64, drift: Drift) -> Vec<f64> {
    match drift {
        Drift::Corrected => {
            let k = sigma * sigma / (2.0 * t);
            x.iter()
                .zip(v)
                .map(|(&xi, &vi)| xi + (vi + k * (xi + (1.0 - t) * vi)) * dt)
                .collect()
        }
        Drift::Uncorrected => ode_step(v, x, dt),
    }
}

/// `∂ mean / ∂ v`, a scalar multiple of the identity: `dt · (1 + σ²(1 - t)/(2t))`.
pub fn mean_velocity_jacobian(t: f64, dt: f64, sigma: f64) -> f64 {
    dt * (1.0 + sigma * sigma * (1.0 - t) / (2.0 * t))
}

/// Log-density of `x_next` under `N(mean, σ²|dt| I)`.
pub fn transition_logprob(mean: &[f64], x_next: &[f64], sigma: f64, dt: f64) -> Result<f64> {
    if !(sigma > 0.0) || dt == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate transition: sigma={sigma}, dt={dt}"
        )));
    }
    let var = sigma * sigma * dt.abs();
    let d = mean.len() as f64;
    Ok(-0.5 * d * (2.0 * PI * var).ln() - dist_sq(x_next, mean) / (2.0 * var))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_next: Vec<f64>,
    pub mean: Vec<f64>,
    /// `None` when `σ = 0` and the transition is a point mass.
    pub logprob: Option<f64>,
}

fn check_state(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) || norm_sq(x) > DIVERGENCE_NORM * DIVERGENCE_NORM {
        return Err(Error::Divergence(format!("state left the finite region: {x:?}")));
    }
    Ok(())
}

/// Mean, noisy next state and log-probability for a precomputed velocity.
pub fn sde_transition(
    x: &[f64],
    v: &[f64],
    t: f64,
    dt: f64,
    sigma: f64,
    drift: Drift,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let mean = sde_mean(x, v, t, dt, sigma, drift);
    let (x_next, logprob) = if sigma > 0.0 {
        let scale = sigma * dt.abs().sqrt();
        let x_next: Vec<f64> = mean
            .iter()
            .map(|m| m + scale * rng.standard_normal())
            .collect();
        let lp = transition_logprob(&mean, &x_next, sigma, dt)?;
        (x_next, Some(lp))
    } else {
        (mean.clone(), None)
    };
    check_state(&x_next)?;
    Ok(StepOutput {
        x_next,
        mean,
        logprob,
    })
}

/// One Euler–Maruyama step of the marginal-preserving SDE at grid time `t > 0`.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    schedule: &NoiseSchedule,
    c: usize,
    rng: &mut Rng,
) -> Result<StepOutput> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("sde_step needs t > 0, got {t}")));
    }
    check_state(x)?;
    let v = field.velocity_batch(x, &[t], &[c])?;
    sde_transition(x, &v, t, dt, schedule.sigma(t), Drift::Corrected, rng)
}

/// One reverse-time rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub condition: usize,
    /// `T + 1` states, `states[0]` at `t = 1`.
    pub states: Vec<Vec<f64>>,
    /// Mean of each of the `T` transitions.
    pub means: Vec<Vec<f64>>,
    /// Log-probability of each transition; `None` when `σ = 0`.
    pub logprobs: Vec<Option<f64>>,
    pub grid: TimeGrid,
    /// The effective (grid-fitted) schedule used to generate the rollout.
    pub schedule: NoiseSchedule,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    pub fn steps(&self) -> usize {
        self.means.len()
    }

    /// Log-probabilities re-derived from the stored states, means, grid and schedule.
    pub fn recompute_logprobs(&self) -> Result<Vec<f64>> {
        let dt = self.grid.dt();
        (0..self.steps())
            .map(|k| {
                let s = self.schedule.sigma(self.grid.times()[k]);
                transition_logprob(&self.means[k], &self.states[k + 1], s, dt)
            })
            .collect()
    }
}

/// Wraps a field and counts how many points it has evaluated.
pub struct CountingField<'a, F: VelocityField + ?Sized> {
    inner: &'a F,
    count: AtomicU64,
}

impl<'a, F: VelocityField + ?Sized> CountingField<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for CountingField<'_, F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity_batch(&self, xs: &[f64], ts: &[f64], cs: &[usize]) -> Result<Vec<f64>> {
        self.count.fetch_add(ts.len() as u64, Ordering::Relaxed);
        self.inner.velocity_batch(xs, ts, cs)
    }
}

fn initial_noise(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.standard_normal()).collect()
}

struct Lane {
    index: usize,
    rng: Rng,
    states: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    logprobs: Vec<Option<f64>>,
    failed: Option<Error>,
}

fn rollout_chunk<F: VelocityField + ?Sized>(
    field: &F,
    indices: &[usize],
    key: u64,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    drift: Drift,
    c: usize,
) -> Vec<(usize, Result<Trajectory>)> {
    let d = field.dim();
    let dt = grid.dt();
    let mut lanes: Vec<Lane> = indices
        .iter()
        .map(|&i| {
            let mut rng = Rng::substream(key, i as u64);
            let x = initial_noise(d, &mut rng);
            Lane {
                index: i,
                rng,
                states: vec![x],
                means: Vec::with_capacity(grid.steps()),
                logprobs: Vec::with_capacity(grid.steps()),
                failed: None,
            }
        })
        .collect();
    for k in 0..grid.steps() {
        let t = grid.times()[k];
        let s = schedule.sigma(t);
        let live: Vec<usize> = (0..lanes.len()).filter(|&j| lanes[j].failed.is_none()).collect();
        if live.is_empty() {
            break;
        }
        let mut xs = Vec::with_capacity(live.len() * d);
        for &j in &live {
            xs.extend_from_slice(lanes[j].states.last().unwrap());
        }
        let vs = match field.velocity_batch(&xs, &vec![t; live.len()], &vec![c; live.len()]) {
            Ok(v) => v,
            Err(e) => {
                let msg = e.to_string();
                for &j in &live {
                    lanes[j].failed = Some(Error::Divergence(msg.clone()));
                }
                break;
            }
        };
        for (slot, &j) in live.iter().enumerate() {
            let lane = &mut lanes[j];
            let x = lane.states.last().unwrap().clone();
            match sde_transition(&x, &vs[slot * d..(slot + 1) * d], t, dt, s, drift, &mut lane.rng)
            {
                Ok(step) => {
                    lane.states.push(step.x_next);
                    lane.means.push(step.mean);
                    lane.logprobs.push(step.logprob);
                }
                Err(e) => lane.failed = Some(e),
            }
        }
    }
    lanes
        .into_iter()
        .map(|lane| {
            let res = match lane.failed {
                Some(e) => Err(e),
                None => Ok(Trajectory {
                    condition: c,
                    states: lane.states,
                    means: lane.means,
                    logprobs: lane.logprobs,
                    grid: grid.clone(),
                    schedule: *schedule,
                }),
            };
            (lane.index, res)
        })
        .collect()
}

/// `n` SDE rollouts under condition `c`, each from its own initial noise.
///
/// The schedule is fitted to the grid with [`NoiseSchedule::for_grid`].
/// Divergent trajectories come back as `Err` entries; the others are unaffected.
pub fn rollout_sde<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    c: usize,
    rng: &mut Rng,
) -> Vec<Result<Trajectory>> {
    rollout_sde_with(field, n, grid, schedule, Drift::Corrected, c, rng)
}

pub fn rollout_sde_with<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    drift: Drift,
    c: usize,
    rng: &mut Rng,
) -> Vec<Result<Trajectory>> {
    let key = rng.next_key();
    let fitted = schedule.for_grid(grid);
    let indices: Vec<usize> = (0..n).collect();
    let mut out: Vec<(usize, Result<Trajectory>)> = indices
        .par_chunks(ROLLOUT_CHUNK)
        .flat_map_iter(|chunk| rollout_chunk(field, chunk, key, grid, &fitted, drift, c))
        .collect();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Terminal samples of SDE rollouts; fails if any trajectory diverged.
pub fn sample_sde<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    drift: Drift,
    c: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    rollout_sde_with(field, n, grid, schedule, drift, c, rng)
        .into_iter()
        .map(|r| r.map(|traj| traj.states.into_iter().last().unwrap()))
        .collect()
}

fn ode_chunk<F: VelocityField + ?Sized>(
    field: &F,
    indices: &[usize],
    key: u64,
    grid: &TimeGrid,
    c: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = field.dim();
    let dt = grid.dt();
    let mut xs = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        xs.extend(initial_noise(d, &mut Rng::substream(key, i as u64)));
    }
    let n = indices.len();
    for k in 0..grid.steps() {
        let t = grid.times()[k];
        let vs = field.velocity_batch(&xs, &vec![t; n], &vec![c; n])?;
        for (x, v) in xs.iter_mut().zip(&vs) {
            *x += v * dt;
        }
    }
    let out: Vec<Vec<f64>> = xs.chunks(d).map(<[f64]>::to_vec).collect();
    for x in &out {
        check_state(x)?;
    }
    Ok(out)
}

/// Euler integration of `dx = v dt` from `N(0, I)` at `t = 1` down to `t = 0`.
///
/// Draws the same initial noise as [`rollout_sde`] given the same `rng` state.
pub fn sample_ode<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    grid: &TimeGrid,
    c: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let key = rng.next_key();
    let indices: Vec<usize> = (0..n).collect();
    let chunks: Vec<Result<Vec<Vec<f64>>>> = indices
        .par_chunks(ROLLOUT_CHUNK)
        .map(|chunk| ode_chunk(field, chunk, key, grid, c))
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `∇ log p_t(x) = -x/t - ((1 - t)/t) · v` for rectified flow.
pub fn score_from_velocity(v: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "score identity needs t in (0, 1], got {t}"
        )));
    }
    let k = (1.0 - t) / t;
    Ok(x.iter().zip(v).map(|(xi, vi)| -xi / t - k * vi).collect())
}

/// Debug dump: `traj_id,step,t,x0,x1,mu0,mu1,logprob` for two-dimensional rollouts.
///
/// The last row of each trajectory carries the terminal state with empty
/// mean and log-probability fields.
pub fn write_trajectory_csv<W: Write>(mut w: W, trajectories: &[Trajectory]) -> io::Result<()> {
    writeln!(w, "traj_id,step,t,x0,x1,mu0,mu1,logprob")?;
    for (id, traj) in trajectories.iter().enumerate() {
        for (k, x) in traj.states.iter().enumerate() {
            let t = traj.grid.times()[k];
            write!(w, "{id},{k},{t},{},{}", x[0], x.get(1).copied().unwrap_or(0.0))?;
            match (traj.means.get(k), traj.logprobs.get(k)) {
                (Some(mu), Some(lp)) => {
                    let lp = lp.map(|v| v.to_string()).unwrap_or_default();
                    writeln!(w, ",{},{},{lp}", mu[0], mu.get(1).copied().unwrap_or(0.0))?;
                }
                _ => writeln!(w, ",,,")?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Constant velocity field for scripted cases.
    struct Constant(Vec<f64>);

    impl VelocityField for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn velocity_batch(&self, _xs: &[f64], ts: &[f64], _cs: &[usize]) -> Result<Vec<f64>> {
            Ok(ts.iter().flat_map(|_| self.0.iter().copied()).collect())
        }
    }

    #[test]
    fn grid_endpoints() {
        for steps in [1, 3, 10, 40] {
            let g = TimeGrid::uniform(steps).unwrap();
            assert_eq!(g.times()[0], 1.0);
            assert_eq!(*g.times().last().unwrap(), 0.0);
            assert_eq!(g.times().len(), steps + 1);
            assert_eq!(g.dt(), -1.0 / steps as f64);
            assert!(g.times().windows(2).all(|w| w[0] > w[1]));
        }
        assert!(TimeGrid::uniform(0).is_err());
    }

    #[test]
    fn sigma_values() {
        let s = NoiseSchedule::new(0.7);
        assert!((s.sigma(0.5) - 0.7).abs() < 1e-15);
        assert_eq!(NoiseSchedule::new(0.0).sigma(0.3), 0.0);
        let expected = 0.7 * (0.999f64 / 0.001).sqrt();
        assert!((s.sigma(1.0) - expected).abs() < 1e-12);
        assert!((s.sigma(1.0) - 22.12).abs() < 0.01);
    }

    #[test]
    fn fitted_schedule_clamps_at_first_interior_point() {
        let grid = TimeGrid::uniform(10).unwrap();
        let s = NoiseSchedule::new(0.7).for_grid(&grid);
        assert_eq!(s.sigma(1.0), s.sigma(0.9));
        assert!((s.sigma(0.9) - 2.1).abs() < 1e-12);
        assert_eq!(s.sigma(0.5), NoiseSchedule::new(0.7).sigma(0.5));
    }

    #[test]
    fn ode_step_cases() {
        assert_eq!(ode_step(&[0.0, 0.0], &[1.0, 2.0], -0.1), vec![1.0, 2.0]);
        let x = ode_step(&[-1.0, 0.0], &[1.0, 1.0], -0.1);
        assert!((x[0] - 1.1).abs() < 1e-15 && x[1] == 1.0);
        let mut x = vec![0.5, -0.5];
        for _ in 0..7 {
            x = ode_step(&[0.2, 0.0], &x, 0.1);
        }
        assert!((x[0] - (0.5 + 0.2 * 7.0 * 0.1)).abs() < 1e-14);
    }

    #[test]
    fn scripted_one_dimensional_mean() {
        let field = Constant(vec![-1.0]);
        let mut schedule = NoiseSchedule::new(0.7);
        assert!((schedule.sigma(0.5) - 0.7).abs() < 1e-15);
        schedule.t_clamp_hi = 0.999;
        let out = sde_step(&field, &[1.0], 0.5, -0.1, &schedule, 0, &mut Rng::seed(0)).unwrap();
        assert!((out.mean[0] - 1.0755).abs() < 1e-12, "{}", out.mean[0]);
        let at_mean = transition_logprob(&out.mean, &out.mean, 0.7, -0.1).unwrap();
        let expected = -0.5 * (2.0 * PI * 0.49 * 0.1).ln();
        assert!((at_mean - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_reduces_to_euler() {
        let field = Constant(vec![0.3, -0.8]);
        let s = NoiseSchedule::new(0.0);
        let x = [0.4, 1.2];
        let out = sde_step(&field, &x, 0.6, -0.25, &s, 0, &mut Rng::seed(1)).unwrap();
        assert_eq!(out.x_next, ode_step(&[0.3, -0.8], &x, -0.25));
        assert_eq!(out.mean, out.x_next);
        assert_eq!(out.logprob, None);
    }

    #[test]
    fn logprob_cases() {
        let lp = transition_logprob(&[0.0, 0.0], &[0.0, 0.0], 1.0, -1.0).unwrap();
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-14);
        let a = transition_logprob(&[0.1, 0.2], &[0.5, -0.3], 0.8, -0.1).unwrap();
        let b = transition_logprob(&[3.1, -1.8], &[3.5, -2.3], 0.8, -0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
        // Doubling the offset quadruples the quadratic form: a drop of 3·q.
        let (sig, dt) = (0.6, -0.2);
        let var: f64 = sig * sig * 0.2;
        let off = [0.3, -0.4];
        let q = (0.09 + 0.16) / (2.0 * var);
        let l1 = transition_logprob(&[0.0, 0.0], &off, sig, dt).unwrap();
        let l2 = transition_logprob(&[0.0, 0.0], &[0.6, -0.8], sig, dt).unwrap();
        assert!((l1 - l2 - 3.0 * q).abs() < 1e-12);
        assert!(transition_logprob(&[0.0], &[0.0], 0.0, -0.1).is_err());
        assert!(transition_logprob(&[0.0], &[0.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn score_identity_endpoints() {
        let s = score_from_velocity(&[5.0, -7.0], &[0.3, 0.4], 1.0).unwrap();
        assert_eq!(s, vec![-0.3, -0.4]);
        assert!(score_from_velocity(&[0.0], &[1.0], 0.0).is_err());
        let (x, t, alpha) = ([0.2, -1.0], 0.35, 0.3);
        let (v1, v2) = ([1.0, 2.0], [-0.5, 0.25]);
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let lhs = score_from_velocity(&mix, &x, t).unwrap();
        let s1 = score_from_velocity(&v1, &x, t).unwrap();
        let s2 = score_from_velocity(&v2, &x, t).unwrap();
        for i in 0..2 {
            assert!((lhs[i] - (alpha * s1[i] + (1.0 - alpha) * s2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field_ode_returns_initial_noise() {
        let field = Constant(vec![0.0, 0.0]);
        let grid = TimeGrid::uniform(5).unwrap();
        let samples = sample_ode(&field, 3, &grid, 0, &mut Rng::seed(9)).unwrap();
        let key = Rng::seed(9).next_key();
        for (i, s) in samples.iter().enumerate() {
            let x0 = initial_noise(2, &mut Rng::substream(key, i as u64));
            assert_eq!(s, &x0);
        }
    }

    #[test]
    fn divergence_is_reported_per_trajectory() {
        let field = Constant(vec![1e9, 0.0]);
        let grid = TimeGrid::uniform(4).unwrap();
        let outs = rollout_sde(&field, 3, &grid, &NoiseSchedule::new(0.7), 0, &mut Rng::seed(0));
        assert_eq!(outs.len(), 3);
        assert!(outs.iter().all(|r| matches!(r, Err(Error::Divergence(_)))));
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let field = Constant(vec![0.1, 0.1]);
        let grid = TimeGrid::uniform(3).unwrap();
        let trajs: Vec<Trajectory> =
            rollout_sde(&field, 2, &grid, &NoiseSchedule::new(0.7), 0, &mut Rng::seed(0))
                .into_iter()
                .map(|r| r.unwrap())
                .collect();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &trajs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "traj_id,step,t,x0,x1,mu0,mu1,logprob");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 8));
    }
}
