//! Condition-aware velocity MLP with a hand-written backward pass.
//!
//! Input layout per point is `[x (d), time embedding (16), one-hot condition (K)]`.
//! Hidden layers use SiLU; the output layer is linear with width `d`.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const TIME_FREQUENCIES: usize = 8;
pub const TIME_EMBED_WIDTH: usize = 2 * TIME_FREQUENCIES;

/// Angular frequency of the `k`-th sinusoidal time feature.
pub fn time_frequency(k: usize) -> f64 {
    (k + 1) as f64 * FRAC_PI_2
}

/// Interleaved `[sin(w_0 t), cos(w_0 t), sin(w_1 t), ...]`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_WIDTH] {
    let mut out = [0.0; TIME_EMBED_WIDTH];
    for k in 0..TIME_FREQUENCIES {
        let (s, c) = (time_frequency(k) * t).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    out
}

/// Lipschitz constant of [`time_embedding`] in the Euclidean norm.
pub fn time_embedding_lipschitz() -> f64 {
    (0..TIME_FREQUENCIES)
        .map(|k| time_frequency(k).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Anything that maps a batch of `(x, t, c)` to velocities.
///
/// `xs` is row-major `n × dim`; the result has the same layout.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn velocity_batch(&self, xs: &[f64], ts: &[f64], cs: &[usize]) -> Result<Vec<f64>>;
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    dim: usize,
    conditions: usize,
    hidden: Vec<usize>,
    /// `[w_0, b_0, w_1, b_1, ...]`, weights shaped `[out, in]`.
    params: Vec<Tensor>,
}

/// Per-layer values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    batch: usize,
    widths: Vec<usize>,
    /// `acts[l]` is the input to layer `l` (`acts[0]` is the network input).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardTape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl VelocityNet {
    pub fn default_hidden() -> Vec<usize> {
        vec![64, 64, 64]
    }

    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(dim: usize, conditions: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(dim, conditions, hidden)?;
        for l in 0..net.num_layers() {
            let w = &mut net.params[2 * l];
            let fan_in = w.shape()[1] as f64;
            let scale = 1.0 / fan_in.sqrt();
            for v in w.data_mut() {
                *v = scale * rng.standard_normal();
            }
        }
        Ok(net)
    }

    pub fn zeros(dim: usize, conditions: usize, hidden: &[usize]) -> Result<Self> {
        if dim == 0 || conditions == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(format!(
                "invalid architecture d={dim} K={conditions} hidden={hidden:?}"
            )));
        }
        let widths = Self::layer_widths(dim, conditions, hidden);
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for pair in widths.windows(2) {
            params.push(Tensor::zeros(&[pair[1], pair[0]]));
            params.push(Tensor::zeros(&[pair[1]]));
        }
        Ok(Self {
            dim,
            conditions,
            hidden: hidden.to_vec(),
            params,
        })
    }

    fn layer_widths(dim: usize, conditions: usize, hidden: &[usize]) -> Vec<usize> {
        let mut w = vec![dim + TIME_EMBED_WIDTH + conditions];
        w.extend_from_slice(hidden);
        w.push(dim);
        w
    }

    fn widths(&self) -> Vec<usize> {
        Self::layer_widths(self.dim, self.conditions, &self.hidden)
    }

    pub fn input_width(&self) -> usize {
        self.dim + TIME_EMBED_WIDTH + self.conditions
    }

    pub fn conditions(&self) -> usize {
        self.conditions
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// All parameters flattened in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        crate::numerics::flatten(&self.params)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn build_input(&self, xs: &[f64], ts: &[f64], cs: &[usize]) -> Result<Vec<f64>> {
        let n = ts.len();
        if xs.len() != n * self.dim || cs.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} times needs {} coordinates and {n} conditions, got {} and {}",
                n * self.dim,
                xs.len(),
                cs.len()
            )));
        }
        let width = self.input_width();
        let mut input = vec![0.0; n * width];
        for b in 0..n {
            let t = ts[b];
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
            }
            let c = cs[b];
            if c >= self.conditions {
                return Err(Error::InvalidArgument(format!(
                    "condition {c} out of range for K={}",
                    self.conditions
                )));
            }
            let row = &mut input[b * width..(b + 1) * width];
            row[..self.dim].copy_from_slice(&xs[b * self.dim..(b + 1) * self.dim]);
            row[self.dim..self.dim + TIME_EMBED_WIDTH].copy_from_slice(&time_embedding(t));
            row[self.dim + TIME_EMBED_WIDTH + c] = 1.0;
        }
        Ok(input)
    }

    /// Batched forward pass; returns velocities (`n × d`) and the tape.
    pub fn forward_batch(
        &self,
        xs: &[f64],
        ts: &[f64],
        cs: &[usize],
    ) -> Result<(Vec<f64>, ForwardTape)> {
        let n = ts.len();
        let widths = self.widths();
        let layers = self.num_layers();
        let mut acts = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut a = self.build_input(xs, ts, cs)?;
        for l in 0..layers {
            let (din, dout) = (widths[l], widths[l + 1]);
            let w = self.params[2 * l].data();
            let bias = self.params[2 * l + 1].data();
            let mut z = vec![0.0; n * dout];
            for b in 0..n {
                let arow = &a[b * din..(b + 1) * din];
                let zrow = &mut z[b * dout..(b + 1) * dout];
                for o in 0..dout {
                    let wrow = &w[o * din..(o + 1) * din];
                    let mut s = bias[o];
                    for i in 0..din {
                        s += wrow[i] * arow[i];
                    }
                    zrow[o] = s;
                }
            }
            let next = if l + 1 < layers {
                z.iter().map(|&v| silu(v)).collect()
            } else {
                z.clone()
            };
            acts.push(a);
            pre.push(z);
            a = next;
        }
        let tape = ForwardTape {
            batch: n,
            widths,
            acts,
            pre,
        };
        Ok((a, tape))
    }

    /// Velocity and tape for a single point.
    pub fn forward(&self, x: &[f64], t: f64, c: usize) -> Result<(Vec<f64>, ForwardTape)> {
        self.forward_batch(x, &[t], &[c])
    }

    /// Gradients of `sum_b <upstream_b, v_b>` with respect to the parameters
    /// and to the `x` part of every input row (`n × d`).
    pub fn backward_batch(
        &self,
        tape: &ForwardTape,
        upstream: &[f64],
    ) -> Result<(Vec<Tensor>, Vec<f64>)> {
        let mut grads = self.zero_grads();
        let input_grad = self.backward_accumulate(tape, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`backward_batch`](Self::backward_batch) but adds into `grads`.
    pub fn backward_accumulate(
        &self,
        tape: &ForwardTape,
        upstream: &[f64],
        grads: &mut [Tensor],
    ) -> Result<Vec<f64>> {
        let widths = self.widths();
        if tape.widths != widths || tape.acts.len() != self.num_layers() {
            return Err(Error::Shape(format!(
                "tape recorded widths {:?}, network has {:?}",
                tape.widths, widths
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }
        let n = tape.batch;
        if upstream.len() != n * self.dim {
            return Err(Error::Shape(format!(
                "upstream has {} entries, expected {}",
                upstream.len(),
                n * self.dim
            )));
        }
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (din, dout) = (widths[l], widths[l + 1]);
            let a = &tape.acts[l];
            let w = self.params[2 * l].data();
            {
                let (gw_part, gb_part) = grads[2 * l..2 * l + 2].split_at_mut(1);
                let gw = gw_part[0].data_mut();
                let gb = gb_part[0].data_mut();
                for b in 0..n {
                    let drow = &delta[b * dout..(b + 1) * dout];
                    let arow = &a[b * din..(b + 1) * din];
                    for o in 0..dout {
                        let d = drow[o];
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        let grow = &mut gw[o * din..(o + 1) * din];
                        for i in 0..din {
                            grow[i] += d * arow[i];
                        }
                    }
                }
            }
            let mut prev = vec![0.0; n * din];
            for b in 0..n {
                let drow = &delta[b * dout..(b + 1) * dout];
                let prow = &mut prev[b * din..(b + 1) * din];
                for o in 0..dout {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &w[o * din..(o + 1) * din];
                    for i in 0..din {
                        prow[i] += d * wrow[i];
                    }
                }
            }
            if l > 0 {
                let z = &tape.pre[l - 1];
                for (p, &zv) in prev.iter_mut().zip(z) {
                    *p *= silu_grad(zv);
                }
            }
            delta = prev;
        }
        let width = widths[0];
        let mut input_grad = vec![0.0; n * self.dim];
        for b in 0..n {
            input_grad[b * self.dim..(b + 1) * self.dim]
                .copy_from_slice(&delta[b * width..b * width + self.dim]);
        }
        Ok(input_grad)
    }

    pub fn backward(&self, tape: &ForwardTape, upstream: &[f64]) -> Result<(Vec<Tensor>, Vec<f64>)> {
        self.backward_batch(tape, upstream)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes();
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.conditions as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden.len() as u32).to_le_bytes());
        for &h in &self.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointVersion("bad magic header".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let dim = r.u32("d")? as usize;
        let conditions = r.u32("K")? as usize;
        let depth = r.u32("hidden count")? as usize;
        if depth > 64 {
            return Err(Error::CheckpointShape(format!("{depth} hidden layers")));
        }
        let mut hidden = Vec::with_capacity(depth);
        for _ in 0..depth {
            hidden.push(r.u32("hidden width")? as usize);
        }
        let mut net = Self::zeros(dim, conditions, &hidden)
            .map_err(|e| Error::CheckpointShape(e.to_string()))?;
        let expected = net.num_params();
        let remaining = bytes.len() - r.pos;
        if remaining < expected * 8 {
            return Err(Error::CheckpointTruncated(format!(
                "{remaining} parameter bytes, expected {}",
                expected * 8
            )));
        }
        if remaining > expected * 8 {
            return Err(Error::CheckpointShape(format!(
                "{remaining} parameter bytes, expected {}",
                expected * 8
            )));
        }
        for p in &mut net.params {
            for v in p.data_mut() {
                let raw = r.take(8, "parameter")?;
                *v = f64::from_le_bytes(raw.try_into().expect("8 bytes"));
            }
        }
        Ok(net)
    }
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity_batch(&self, xs: &[f64], ts: &[f64], cs: &[usize]) -> Result<Vec<f64>> {
        self.forward_batch(xs, ts, cs).map(|(v, _)| v)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FGRPOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!("file ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64) -> VelocityNet {
        VelocityNet::new(2, 3, &[8, 8, 8], &mut Rng::seed(seed)).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = VelocityNet::zeros(2, 4, &[64, 64, 64]).unwrap();
        let (v, _) = net.forward(&[1.3, -0.2], 0.4, 2).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = small_net(1);
        let (a, _) = net.forward(&[0.5, 0.1], 0.3, 1).unwrap();
        let (b, _) = net.forward(&[0.5, 0.1], 0.3, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let net = small_net(2);
        let xs = [0.1, 0.2, -1.0, 0.5, 2.0, -2.0];
        let ts = [0.0, 0.5, 1.0];
        let cs = [0, 1, 2];
        let (vb, _) = net.forward_batch(&xs, &ts, &cs).unwrap();
        for b in 0..3 {
            let (v, _) = net.forward(&xs[2 * b..2 * b + 2], ts[b], cs[b]).unwrap();
            assert_eq!(&vb[2 * b..2 * b + 2], &v[..]);
        }
    }

    #[test]
    fn rejects_bad_condition_and_time() {
        let net = small_net(3);
        assert!(net.forward(&[0.0, 0.0], 0.5, 3).is_err());
        assert!(net.forward(&[0.0, 0.0], 1.5, 0).is_err());
    }

    #[test]
    fn first_layer_width() {
        let net = VelocityNet::zeros(2, 4, &VelocityNet::default_hidden()).unwrap();
        assert_eq!(net.params()[0].shape(), &[64, 2 + 16 + 4]);
        assert_eq!(net.params().last().unwrap().shape(), &[2]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = small_net(4);
        let (_, tape) = net.forward(&[0.3, 0.3], 0.7, 0).unwrap();
        let (g, gx) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(gx, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let net = small_net(5);
        let (_, tape) = net.forward(&[0.3, -0.3], 0.2, 2).unwrap();
        let (g1, x1) = net.backward(&tape, &[1.0, 0.0]).unwrap();
        let (g2, x2) = net.backward(&tape, &[0.0, 1.0]).unwrap();
        let (g12, x12) = net.backward(&tape, &[1.0, 1.0]).unwrap();
        for ((a, b), c) in g1.iter().zip(&g2).zip(&g12) {
            for ((u, v), w) in a.data().iter().zip(b.data()).zip(c.data()) {
                assert!((u + v - w).abs() < 1e-12);
            }
        }
        for i in 0..2 {
            assert!((x1[i] + x2[i] - x12[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_mismatch_is_rejected() {
        let a = small_net(6);
        let b = VelocityNet::new(2, 3, &[8, 4], &mut Rng::seed(6)).unwrap();
        let (_, tape) = a.forward(&[0.0, 0.0], 0.5, 0).unwrap();
        assert!(b.backward(&tape, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0.0);
        for k in 0..TIME_FREQUENCIES {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
        assert_eq!(time_embedding(0.37), time_embedding(0.37));
    }

    #[test]
    fn time_embedding_is_lipschitz() {
        let lip = time_embedding_lipschitz();
        let n = 2000;
        for i in 0..n {
            let t0 = i as f64 / n as f64;
            let t1 = (i + 1) as f64 / n as f64;
            let (a, b) = (time_embedding(t0), time_embedding(t1));
            let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d <= lip * (t1 - t0) + 1e-15);
        }
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let net = small_net(7);
        let mut bytes = net.to_checkpoint_bytes();
        let ok = VelocityNet::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(ok, net);

        let truncated = &bytes[..bytes.len() - 12];
        assert!(matches!(
            VelocityNet::from_checkpoint_bytes(truncated),
            Err(Error::CheckpointTruncated(_))
        ));

        bytes[0] = b'X';
        assert!(matches!(
            VelocityNet::from_checkpoint_bytes(&bytes),
            Err(Error::CheckpointVersion(_))
        ));
    }

    #[test]
    fn checkpoint_wrong_version_and_extra_bytes() {
        let net = small_net(8);
        let mut bytes = net.to_checkpoint_bytes();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            VelocityNet::from_checkpoint_bytes(&bytes),
            Err(Error::CheckpointVersion(_))
        ));
        let mut bytes = net.to_checkpoint_bytes();
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            VelocityNet::from_checkpoint_bytes(&bytes),
            Err(Error::CheckpointShape(_))
        ));
    }
}
