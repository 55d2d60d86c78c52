//! Distribution distances, diversity, the analytic Gaussian velocity oracle
//! and the ODE/SDE marginal-equivalence harness.

use crate::error::{Error, Result};
use crate::model::{VelocityField, VelocityNet};
use crate::numerics::Rng;
use crate::sampler::{sample_ode, sample_sde, Drift, NoiseSchedule, TimeGrid};

/// Outcome of one statistical check, serialisable as a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub null_value: f64,
    pub ratio: f64,
    pub n: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,value,null_value,ratio,n,pass";

    /// A plain measurement with no null comparison; passes iff finite.
    pub fn scalar(name: &str, value: f64, n: usize) -> Self {
        Self {
            name: name.to_string(),
            value,
            null_value: f64::NAN,
            ratio: f64::NAN,
            n,
            tolerance: f64::NAN,
            pass: value.is_finite(),
        }
    }

    /// Non-finite null and ratio fields are written empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
        format!(
            "{},{},{},{},{},{}",
            self.name,
            self.value,
            opt(self.null_value),
            opt(self.ratio),
            self.n,
            self.pass
        )
    }
}

/// Exact 2-Wasserstein distance between two 1-D empirical distributions with
/// uniform weights. Both inputs must be sorted ascending.
pub fn wasserstein2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / n as f64).sqrt();
    }
    // Walk the merged quantile breakpoints i/n and j/m.
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.sqrt()
}

/// Draws `n` directions uniformly on the unit sphere in `dim` dimensions.
pub fn random_directions(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Mean over random unit directions of the 1-D 2-Wasserstein distance between
/// the projected sample sets.
pub fn sliced_wasserstein(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_projections: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() || n_projections == 0 {
        return Err(Error::InvalidArgument("sliced Wasserstein needs samples and projections".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != dim) {
        return Err(Error::Shape("sample sets have different dimensions".into()));
    }
    let dirs = random_directions(n_projections, dim, rng);
    Ok(sliced_wasserstein_with(a, b, &dirs))
}

pub fn sliced_wasserstein_with(a: &[Vec<f64>], b: &[Vec<f64>], dirs: &[Vec<f64>]) -> f64 {
    let project = |set: &[Vec<f64>], d: &[f64]| {
        let mut p: Vec<f64> = set
            .iter()
            .map(|x| x.iter().zip(d).map(|(u, v)| u * v).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let total: f64 = dirs
        .iter()
        .map(|d| wasserstein2_sorted(&project(a, d), &project(b, d)))
        .sum();
    total / dirs.len() as f64
}

/// Mean pairwise Euclidean distance within each group, averaged over groups.
pub fn diversity_score(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.is_empty() || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InvalidArgument("diversity needs at least two samples per group".into()));
    }
    let per_group: Vec<f64> = groups
        .iter()
        .map(|g| {
            let mut s = 0.0;
            let mut pairs = 0usize;
            for i in 0..g.len() {
                for j in 0..i {
                    s += crate::numerics::dist_sq(&g[i], &g[j]).sqrt();
                    pairs += 1;
                }
            }
            s / pairs as f64
        })
        .collect();
    Ok(per_group.iter().sum::<f64>() / per_group.len() as f64)
}

/// Sample mean and (unbiased) covariance matrix.
pub fn mean_and_cov(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for x in samples {
        for i in 0..d {
            mean[i] += x[i];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for x in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row {
            *v /= n - 1.0;
        }
    }
    (mean, cov)
}

/// Exact rectified-flow velocity for isotropic Gaussian data
/// `x_0 ~ N(μ, s² I)` and noise `x_1 ~ N(0, I)`:
///
/// `v(x, t) = -μ + (t - (1 - t) s²) / ((1 - t)² s² + t²) · (x - (1 - t) μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianField {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl AnalyticGaussianField {
    pub fn new(mean: Vec<f64>, std: f64) -> Self {
        Self { mean, std }
    }

    /// Variance of each coordinate of the marginal at time `t`.
    pub fn marginal_variance(&self, t: f64) -> f64 {
        let s2 = self.std * self.std;
        (1.0 - t).powi(2) * s2 + t * t
    }

    pub fn marginal_mean(&self, t: f64) -> Vec<f64> {
        self.mean.iter().map(|m| (1.0 - t) * m).collect()
    }

    /// `∇ log p_t(x)` of the Gaussian marginal.
    pub fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let var = self.marginal_variance(t);
        x.iter()
            .zip(self.marginal_mean(t))
            .map(|(xi, mi)| -(xi - mi) / var)
            .collect()
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        analytic_gaussian_velocity(x, t, &self.mean, self.std)
    }
}

pub fn analytic_gaussian_velocity(x: &[f64], t: f64, mean: &[f64], std: f64) -> Vec<f64> {
    let s2 = std * std;
    let var = (1.0 - t).powi(2) * s2 + t * t;
    let gain = (t - (1.0 - t) * s2) / var;
    x.iter()
        .zip(mean)
        .map(|(xi, mi)| -mi + gain * (xi - (1.0 - t) * mi))
        .collect()
}

impl VelocityField for AnalyticGaussianField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity_batch(&self, xs: &[f64], ts: &[f64], _cs: &[usize]) -> Result<Vec<f64>> {
        let d = self.mean.len();
        if xs.len() != ts.len() * d {
            return Err(Error::Shape("batch size mismatch".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        for (x, &t) in xs.chunks(d).zip(ts) {
            out.extend(self.velocity(x, t));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceConfig {
    pub n_projections: usize,
    /// Pass iff `SW(ODE, SDE) / SW(ODE, ODE') <= threshold`.
    pub threshold: f64,
    pub drift: Drift,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            n_projections: 128,
            threshold: 1.5,
            drift: Drift::Corrected,
        }
    }
}

/// Samples of `n` points split round-robin over `conditions`.
fn split_counts(n: usize, conditions: usize) -> Vec<usize> {
    (0..conditions)
        .map(|c| n / conditions + usize::from(c < n % conditions))
        .collect()
}

/// ODE samples pooled across conditions.
pub fn pooled_ode<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    conditions: usize,
    grid: &TimeGrid,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n);
    for (c, m) in split_counts(n, conditions).into_iter().enumerate() {
        if m > 0 {
            out.extend(sample_ode(field, m, grid, c, rng)?);
        }
    }
    Ok(out)
}

pub fn pooled_sde<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    conditions: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    drift: Drift,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n);
    for (c, m) in split_counts(n, conditions).into_iter().enumerate() {
        if m > 0 {
            out.extend(sample_sde(field, m, grid, schedule, drift, c, rng)?);
        }
    }
    Ok(out)
}

/// Compares `n` SDE samples with `n` ODE samples against the distance
/// between two independent ODE sample sets.
pub fn marginal_equivalence_test<F: VelocityField + ?Sized>(
    field: &F,
    conditions: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    n: usize,
    config: &EquivalenceConfig,
    rng: &mut Rng,
) -> Result<MetricReport> {
    let ode_a = pooled_ode(field, n, conditions, grid, rng)?;
    let ode_b = pooled_ode(field, n, conditions, grid, rng)?;
    let sde = pooled_sde(field, n, conditions, grid, schedule, config.drift, rng)?;
    let dirs = random_directions(config.n_projections, field.dim(), rng);
    let value = sliced_wasserstein_with(&ode_a, &sde, &dirs);
    let null_value = sliced_wasserstein_with(&ode_a, &ode_b, &dirs);
    let ratio = value / null_value;
    let name = match config.drift {
        Drift::Corrected => "marginal_equivalence",
        Drift::Uncorrected => "marginal_equivalence_uncorrected",
    };
    Ok(MetricReport {
        name: name.to_string(),
        value,
        null_value,
        ratio,
        n,
        tolerance: config.threshold,
        pass: ratio.is_finite() && ratio <= config.threshold,
    })
}

/// Periodic policy evaluation: per-condition samples on the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvalConfig {
    pub steps: usize,
    pub samples_per_condition: usize,
    /// `Some(a)` samples with the SDE at noise level `a` instead of the ODE.
    pub sde_noise: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub reward: f64,
    pub diversity: f64,
    pub samples: Vec<Vec<Vec<f64>>>,
}

/// Mean reward and diversity over every condition of `net`.
///
/// The sampling noise depends only on `config.seed`, so successive
/// evaluations of a changing network use common random numbers.
pub fn evaluate_policy<R>(net: &VelocityNet, reward: &R, config: &PolicyEvalConfig) -> Result<PolicyEval>
where
    R: Fn(&[f64], usize) -> f64 + Sync,
{
    let grid = TimeGrid::uniform(config.steps)?;
    let mut rng = Rng::substream(config.seed, 20);
    let mut samples = Vec::with_capacity(net.conditions());
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..net.conditions() {
        let xs = match config.sde_noise {
            None => sample_ode(net, config.samples_per_condition, &grid, c, &mut rng)?,
            Some(a) => sample_sde(
                net,
                config.samples_per_condition,
                &grid,
                &NoiseSchedule::new(a),
                Drift::Corrected,
                c,
                &mut rng,
            )?,
        };
        total += xs.iter().map(|x| reward(x, c)).sum::<f64>();
        count += xs.len();
        samples.push(xs);
    }
    let diversity = diversity_score(&samples)?;
    Ok(PolicyEval {
        reward: total / count as f64,
        diversity,
        samples,
    })
}
