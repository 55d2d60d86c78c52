//! Synthetic datasets, the rectified-flow interpolation and the flow-matching
//! pretraining loop.

use std::f64::consts::{FRAC_PI_4, PI};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{ForwardTape, VelocityNet};
use crate::numerics::{adam_step, AdamState, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// Isotropic Gaussian modes; condition `k` labels `centers[k]`.
    GaussianMixture { centers: Vec<Vec<f64>>, std: f64 },
    /// Uniform over the dark squares of a `cells × cells` board centred at 0.
    Checkerboard { cells: usize, cell_size: f64 },
    /// Concentric rings with Gaussian radial jitter.
    Rings { radii: Vec<f64>, width: f64 },
    SingleGaussian { mean: Vec<f64>, std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Probability that an emitted label is replaced by a uniformly random wrong label.
    pub label_noise: f64,
}

/// One training example: a data point and its (possibly noisy) condition label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub c: usize,
}

/// `K` mode centres: the four corners `(±s, ±s)` for `K = 4`, otherwise
/// evenly spaced on the circle of radius `s·√2` starting at angle π/4.
pub fn mixture_centers(conditions: usize, spread: f64) -> Vec<Vec<f64>> {
    if conditions == 4 {
        return vec![
            vec![spread, spread],
            vec![-spread, spread],
            vec![-spread, -spread],
            vec![spread, -spread],
        ];
    }
    let r = spread * 2f64.sqrt();
    (0..conditions)
        .map(|k| {
            let a = FRAC_PI_4 + 2.0 * PI * k as f64 / conditions as f64;
            vec![r * a.cos(), r * a.sin()]
        })
        .collect()
}

impl DatasetSpec {
    pub fn gaussian_mixture(conditions: usize, spread: f64, std: f64, label_noise: f64) -> Self {
        Self {
            kind: DatasetKind::GaussianMixture {
                centers: mixture_centers(conditions, spread),
                std,
            },
            label_noise,
        }
    }

    pub fn single_gaussian(mean: Vec<f64>, std: f64) -> Self {
        Self {
            kind: DatasetKind::SingleGaussian { mean, std },
            label_noise: 0.0,
        }
    }

    /// Builds a dataset from its textual kind name.
    pub fn by_name(
        kind: &str,
        conditions: usize,
        spread: f64,
        std: f64,
        label_noise: f64,
    ) -> Result<Self> {
        let spec = match kind {
            "gaussian_mixture" => Self::gaussian_mixture(conditions, spread, std, label_noise),
            "single_gaussian" => Self::single_gaussian(vec![0.0, 0.0], std),
            "checkerboard" => Self {
                kind: DatasetKind::Checkerboard {
                    cells: 4,
                    cell_size: spread,
                },
                label_noise: 0.0,
            },
            "rings" => Self {
                kind: DatasetKind::Rings {
                    radii: vec![spread / 3.0, 2.0 * spread / 3.0, spread],
                    width: std,
                },
                label_noise: 0.0,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown dataset kind `{other}`"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn conditions(&self) -> usize {
        match &self.kind {
            DatasetKind::GaussianMixture { centers, .. } => centers.len(),
            _ => 1,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::GaussianMixture { centers, .. } => centers[0].len(),
            DatasetKind::SingleGaussian { mean, .. } => mean.len(),
            DatasetKind::Checkerboard { .. } | DatasetKind::Rings { .. } => 2,
        }
    }

    /// Mode centres, for datasets that have them.
    pub fn centers(&self) -> Option<&[Vec<f64>]> {
        match &self.kind {
            DatasetKind::GaussianMixture { centers, .. } => Some(centers),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::InvalidArgument(format!(
                "label noise {} outside [0, 1)",
                self.label_noise
            )));
        }
        match &self.kind {
            DatasetKind::GaussianMixture { centers, std } => {
                if centers.is_empty() {
                    return Err(Error::InvalidArgument("mixture needs a centre".into()));
                }
                let d = centers[0].len();
                if d == 0 || centers.iter().any(|c| c.len() != d) {
                    return Err(Error::InvalidArgument("inconsistent centre dimensions".into()));
                }
                for i in 0..centers.len() {
                    for j in 0..i {
                        if centers[i] == centers[j] {
                            return Err(Error::InvalidArgument("duplicate mixture centres".into()));
                        }
                    }
                }
                if *std <= 0.0 {
                    return Err(Error::InvalidArgument("mixture std must be positive".into()));
                }
            }
            DatasetKind::SingleGaussian { mean, std } => {
                if mean.is_empty() || *std <= 0.0 {
                    return Err(Error::InvalidArgument("invalid single gaussian".into()));
                }
            }
            DatasetKind::Checkerboard { cells, cell_size } => {
                if *cells == 0 || *cell_size <= 0.0 {
                    return Err(Error::InvalidArgument("invalid checkerboard".into()));
                }
            }
            DatasetKind::Rings { radii, width } => {
                if radii.is_empty() || *width < 0.0 {
                    return Err(Error::InvalidArgument("invalid rings".into()));
                }
            }
        }
        if self.label_noise > 0.0 && self.conditions() < 2 {
            return Err(Error::InvalidArgument(
                "label noise needs at least two conditions".into(),
            ));
        }
        Ok(())
    }
}

pub fn sample_dataset(spec: &DatasetSpec, n: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    spec.validate()?;
    let k = spec.conditions();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, true_c) = match &spec.kind {
            DatasetKind::GaussianMixture { centers, std } => {
                let c = rng.below(k);
                let x = centers[c].iter().map(|m| m + std * rng.standard_normal()).collect();
                (x, c)
            }
            DatasetKind::SingleGaussian { mean, std } => {
                let x = mean.iter().map(|m| m + std * rng.standard_normal()).collect();
                (x, 0)
            }
            DatasetKind::Checkerboard { cells, cell_size } => {
                let half = *cells as f64 * cell_size / 2.0;
                loop {
                    let i = rng.below(*cells);
                    let j = rng.below(*cells);
                    if (i + j) % 2 == 0 {
                        let x = -half + (i as f64 + rng.uniform()) * cell_size;
                        let y = -half + (j as f64 + rng.uniform()) * cell_size;
                        break (vec![x, y], 0);
                    }
                }
            }
            DatasetKind::Rings { radii, width } => {
                let r = radii[rng.below(radii.len())] + width * rng.standard_normal();
                let a = 2.0 * PI * rng.uniform();
                (vec![r * a.cos(), r * a.sin()], 0)
            }
        };
        let c = if spec.label_noise > 0.0 && rng.uniform() < spec.label_noise {
            // Uniform over the K-1 wrong labels.
            let shift = 1 + rng.below(k - 1);
            (true_c + shift) % k
        } else {
            true_c
        };
        out.push(Sample { x, c });
    }
    Ok(out)
}

/// `x_t = (1 - t) x_0 + t x_1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect()
}

/// A sampled interpolation time and its Gaussian endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FmDraw {
    pub t: f64,
    pub noise: Vec<f64>,
}

pub fn fm_draws(n: usize, dim: usize, rng: &mut Rng) -> Vec<FmDraw> {
    (0..n)
        .map(|_| {
            let t = rng.uniform_open();
            let noise = (0..dim).map(|_| rng.standard_normal()).collect();
            FmDraw { t, noise }
        })
        .collect()
}

/// Per-sample flow-matching errors `‖(x_1 - x_0) - v(x_t, t, c)‖²` for a
/// fixed set of draws, with enough state to differentiate any weighted sum.
pub struct FmEval {
    pub errors: Vec<f64>,
    residuals: Vec<f64>,
    tape: ForwardTape,
    dim: usize,
}

impl FmEval {
    /// Gradient of `sum_j weights[j] * errors[j]`.
    pub fn weighted_grads(&self, net: &VelocityNet, weights: &[f64]) -> Result<Vec<Tensor>> {
        let mut grads = net.zero_grads();
        self.accumulate_weighted(net, weights, &mut grads)?;
        Ok(grads)
    }

    pub fn accumulate_weighted(
        &self,
        net: &VelocityNet,
        weights: &[f64],
        grads: &mut [Tensor],
    ) -> Result<()> {
        if weights.len() != self.errors.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} samples",
                weights.len(),
                self.errors.len()
            )));
        }
        let d = self.dim;
        let mut upstream = vec![0.0; self.residuals.len()];
        for (j, w) in weights.iter().enumerate() {
            for i in 0..d {
                upstream[j * d + i] = -2.0 * w * self.residuals[j * d + i];
            }
        }
        net.backward_accumulate(&self.tape, &upstream, grads)?;
        Ok(())
    }
}

/// Evaluates flow-matching errors of `x0s[j]` under condition `cs[j]` and draw `draws[j]`.
pub fn fm_evaluate(
    net: &VelocityNet,
    x0s: &[&[f64]],
    cs: &[usize],
    draws: &[FmDraw],
) -> Result<FmEval> {
    let n = x0s.len();
    if n == 0 || cs.len() != n || draws.len() != n {
        return Err(Error::Shape(format!(
            "{n} samples, {} conditions, {} draws",
            cs.len(),
            draws.len()
        )));
    }
    let d = x0s[0].len();
    let mut xs = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    for (x0, draw) in x0s.iter().zip(draws) {
        if x0.len() != d || draw.noise.len() != d {
            return Err(Error::Shape("inconsistent sample dimensions".into()));
        }
        xs.extend(interpolate(x0, &draw.noise, draw.t));
        targets.extend(draw.noise.iter().zip(x0.iter()).map(|(x1, x0)| x1 - x0));
        ts.push(draw.t);
    }
    let (v, tape) = net.forward_batch(&xs, &ts, cs)?;
    let residuals: Vec<f64> = targets.iter().zip(&v).map(|(a, b)| a - b).collect();
    let errors = residuals
        .chunks(d)
        .map(|r| r.iter().map(|e| e * e).sum())
        .collect();
    Ok(FmEval {
        errors,
        residuals,
        tape,
        dim: d,
    })
}

/// Mean flow-matching loss over `batch` with fresh `(t, x_1)` draws, and its gradient.
pub fn fm_loss_and_grads(
    net: &VelocityNet,
    batch: &[Sample],
    rng: &mut Rng,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = batch[0].x.len();
    let draws = fm_draws(batch.len(), d, rng);
    fm_loss_and_grads_with(net, batch, &draws)
}

/// [`fm_loss_and_grads`] with caller-supplied draws.
pub fn fm_loss_and_grads_with(
    net: &VelocityNet,
    batch: &[Sample],
    draws: &[FmDraw],
) -> Result<(f64, Vec<Tensor>)> {
    let x0s: Vec<&[f64]> = batch.iter().map(|s| s.x.as_slice()).collect();
    let cs: Vec<usize> = batch.iter().map(|s| s.c).collect();
    let eval = fm_evaluate(net, &x0s, &cs, draws)?;
    let w = 1.0 / batch.len() as f64;
    let loss = eval.errors.iter().sum::<f64>() * w;
    let grads = eval.weighted_grads(net, &vec![w; batch.len()])?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay); 1 keeps it constant.
    pub lr_final_fraction: f64,
    pub log_interval: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            dataset,
            hidden: VelocityNet::default_hidden(),
            batch_size: 256,
            steps: 4000,
            lr: 2e-3,
            lr_final_fraction: 0.05,
            log_interval: 50,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::InvalidArgument("batch size and log interval must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::InvalidArgument("lr_final_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub initial: VelocityNet,
    pub net: VelocityNet,
    pub log: Vec<PretrainLogRow>,
}

/// Cosine decay from `lr` to `lr * final_fraction` over `steps`.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr;
    }
    let p = step as f64 / (steps - 1) as f64;
    let lo = lr * final_fraction;
    lo + 0.5 * (lr - lo) * (1.0 + (PI * p).cos())
}

/// Trains a fresh network on the flow-matching objective.
pub fn pretrain(config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let dim = config.dataset.dim();
    let k = config.dataset.conditions();
    let initial = VelocityNet::new(dim, k, &config.hidden, &mut Rng::substream(config.seed, 0))?;
    let mut net = initial.clone();
    let mut data_rng = Rng::substream(config.seed, 1);
    let mut adam = AdamState::new(net.params(), config.lr);
    let mut log = Vec::new();
    let start = Instant::now();
    for step in 0..config.steps {
        let batch = sample_dataset(&config.dataset, config.batch_size, &mut data_rng)?;
        let (loss, grads) = fm_loss_and_grads(&net, &batch, &mut data_rng)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {step}")));
        }
        if step % config.log_interval == 0 || step + 1 == config.steps {
            log.push(PretrainLogRow {
                step,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        adam.lr = cosine_lr(config.lr, config.lr_final_fraction, step, config.steps);
        adam_step(net.params_mut(), &grads, &mut adam)?;
    }
    Ok(PretrainOutcome { initial, net, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = [0.0, 0.0];
        let x1 = [2.0, 4.0];
        assert_eq!(interpolate(&x0, &x1, 0.0), x0.to_vec());
        assert_eq!(interpolate(&x0, &x1, 1.0), x1.to_vec());
        assert_eq!(interpolate(&x0, &x1, 0.25), vec![0.5, 1.0]);
        let x = [1.5, -0.25];
        for t in [0.0, 0.3, 0.77, 1.0] {
            for (a, b) in interpolate(&x, &x, t).iter().zip(&x) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn zero_net_loss_is_target_norm() {
        let net = VelocityNet::zeros(2, 1, &[8]).unwrap();
        let batch = [Sample {
            x: vec![1.0, 0.0],
            c: 0,
        }];
        let draws = [FmDraw {
            t: 0.37,
            noise: vec![0.0, 0.0],
        }];
        let (loss, _) = fm_loss_and_grads_with(&net, &batch, &draws).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn unknown_dataset_kind() {
        assert!(DatasetSpec::by_name("spiral", 4, 3.0, 0.3, 0.0).is_err());
    }

    #[test]
    fn label_noise_must_be_below_one() {
        let spec = DatasetSpec::gaussian_mixture(4, 3.0, 0.3, 1.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut cfg = PretrainConfig::new(DatasetSpec::gaussian_mixture(4, 3.0, 0.3, 0.3));
        cfg.steps = 0;
        cfg.hidden = vec![8, 8];
        let out = pretrain(&cfg).unwrap();
        assert_eq!(out.net, out.initial);
        assert!(out.log.is_empty());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 11), 1.0);
        assert!((cosine_lr(1.0, 0.1, 10, 11) - 0.1).abs() < 1e-15);
    }
}
