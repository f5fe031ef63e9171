//! Feedforward generator `G(w, z) ∈ Θˡ` with hand-written reverse-mode gradients and Adam.
//!
//! The input is a bootstrap weight vector `w ∈ ℝⁿ` (standardized coordinate-wise) concatenated
//! with noise `z ∈ ℝ^q`. Hidden layers are `tanh(W x + b)`; the output layer is affine followed
//! by the kernel's support transform, so every coordinate is a valid parameter.
//!
//! All parameters live in one flat vector. Layer `k` stores its `out × in` weight matrix
//! row-major, followed by its bias.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Grouping, KernelModel, Support};

const CHECKPOINT_FORMAT: &str = "mixdens-generator";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    fn end(&self) -> usize {
        self.bias_offset() + self.outputs
    }
}

/// Network dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Length of the bootstrap weight input, `n`.
    pub n_weights: usize,
    /// Noise dimension `q`.
    pub noise_dim: usize,
    /// Width of each hidden layer.
    pub hidden: Vec<usize>,
    /// Number of candidates `l`.
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNetwork {
    arch: Architecture,
    support: Support,
    w_center: f64,
    w_scale: f64,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    arch: Architecture,
    activation: String,
    support: Support,
    w_center: f64,
    w_scale: f64,
    params: Vec<f64>,
}

fn layout(arch: &Architecture) -> Vec<Layer> {
    let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
    let mut inputs = arch.n_weights + arch.noise_dim;
    let mut offset = 0;
    for &outputs in arch.hidden.iter().chain(std::iter::once(&arch.outputs)) {
        let layer = Layer {
            inputs,
            outputs,
            offset,
        };
        offset = layer.end();
        inputs = outputs;
        layers.push(layer);
    }
    layers
}

impl GeneratorNetwork {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture, support: Support) -> Result<Self> {
        if arch.n_weights == 0 || arch.outputs == 0 || arch.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        let layers = layout(&arch);
        let n_params = layers.last().expect("output layer").end();
        let n = arch.n_weights as f64;
        // marginal of n·Dirichlet(1,…,1) has mean 1 and variance (n-1)/(n+1)
        let w_scale = if arch.n_weights > 1 {
            ((n - 1.0) / (n + 1.0)).sqrt()
        } else {
            1.0
        };
        Ok(GeneratorNetwork {
            arch,
            support,
            w_center: 1.0,
            w_scale,
            layers,
            params: vec![0.0; n_params],
        })
    }

    /// Uniform fan-in initialization (the weight and noise blocks of the first layer are scaled by
    /// their own fan-in), with output biases placing the `l` candidates at evenly spaced
    /// quantiles of `[lo, hi]`.
    pub fn init<R: Rng + ?Sized>(
        arch: Architecture,
        support: Support,
        theta_range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(arch, support)?;
        let n_w = net.arch.n_weights;
        let last = net.layers.len() - 1;
        for (k, layer) in net.layers.clone().into_iter().enumerate() {
            for o in 0..layer.outputs {
                for i in 0..layer.inputs {
                    let fan_in = if k == 0 {
                        if i < n_w { n_w } else { net.arch.noise_dim }
                    } else {
                        layer.inputs
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    net.params[layer.offset + o * layer.inputs + i] = rng.random_range(-bound..bound);
                }
            }
            let b = layer.bias_offset();
            if k == last {
                let (lo, hi) = theta_range;
                let l = layer.outputs;
                for o in 0..l {
                    let t = lo + (o as f64 + 0.5) / l as f64 * (hi - lo);
                    net.params[b + o] = support.from_support(t);
                }
            } else {
                let bound = 1.0 / (layer.inputs as f64).sqrt();
                for o in 0..layer.outputs {
                    net.params[b + o] = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn outputs(&self) -> usize {
        self.arch.outputs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn weights(&self, k: usize) -> ArrayView2<'_, f64> {
        let l = self.layers[k];
        ArrayView2::from_shape((l.outputs, l.inputs), &self.params[l.offset..l.bias_offset()])
            .expect("layer shape")
    }

    fn bias(&self, k: usize) -> &[f64] {
        let l = self.layers[k];
        &self.params[l.bias_offset()..l.end()]
    }

    fn standardize_into(&self, w: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(w) {
            *o = (v - self.w_center) / self.w_scale;
        }
    }

    /// Candidate vector `G(w, z)`.
    pub fn forward(&self, w: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let wm = Array2::from_shape_vec((1, w.len()), w.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
        let zm = Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.forward_many(wm.view(), zm.view())?.row(0).to_vec())
    }

    /// Row-wise `G(w_r, z_r)` for `ws: B × n`, `zs: B × q`.
    pub fn forward_many(&self, ws: ArrayView2<'_, f64>, zs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if ws.ncols() != self.arch.n_weights || zs.ncols() != self.arch.noise_dim || ws.nrows() != zs.nrows() {
            return Err(Error::invalid("input dimensions do not match the network"));
        }
        let rows = ws.nrows();
        let mut std_w = Array2::<f64>::zeros((rows, self.arch.n_weights));
        for (mut dst, src) in std_w.rows_mut().into_iter().zip(ws.rows()) {
            let src: Vec<f64> = src.to_vec();
            self.standardize_into(&src, dst.as_slice_mut().expect("contiguous"));
        }
        let owners: Vec<usize> = (0..rows).collect();
        let acts = self.forward_pass(std_w.view(), &owners, zs)?;
        Ok(acts.theta)
    }

    /// Forward pass where row `r` of the batch uses standardized weight row `owner[r]`.
    fn forward_pass(
        &self,
        std_w: ArrayView2<'_, f64>,
        owner: &[usize],
        zs: ArrayView2<'_, f64>,
    ) -> Result<Activations> {
        let rows = owner.len();
        let n_w = self.arch.n_weights;
        let w0 = self.weights(0);
        // weight block contribution computed once per distinct weight vector
        let mut u = Array2::<f64>::zeros((std_w.nrows(), w0.nrows()));
        general_mat_mul(1.0, &std_w, &w0.slice(s![.., ..n_w]).t(), 0.0, &mut u);
        let mut pre = Array2::<f64>::zeros((rows, w0.nrows()));
        general_mat_mul(1.0, &zs, &w0.slice(s![.., n_w..]).t(), 0.0, &mut pre);
        let b0 = self.bias(0);
        for (r, mut row) in pre.rows_mut().into_iter().enumerate() {
            let ur = u.row(owner[r]);
            for ((p, &uv), &b) in row.iter_mut().zip(ur.iter()).zip(b0) {
                *p += uv + b;
            }
        }
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut h = pre;
        h.mapv_inplace(f64::tanh);
        for k in 1..self.layers.len() {
            let wk = self.weights(k);
            let mut next = Array2::<f64>::zeros((rows, wk.nrows()));
            general_mat_mul(1.0, &h, &wk.t(), 0.0, &mut next);
            let bk = self.bias(k);
            for mut row in next.rows_mut() {
                for (p, &b) in row.iter_mut().zip(bk) {
                    *p += b;
                }
            }
            hidden.push(h);
            if k + 1 < self.layers.len() {
                next.mapv_inplace(f64::tanh);
            }
            h = next;
        }
        let raw = h;
        let support = self.support;
        let theta = raw.mapv(|x| support.to_support(x));
        Ok(Activations { hidden, raw, theta })
    }

    /// Parameter gradient for upstream `d_theta = ∂L/∂θ` (same shape as `acts.theta`).
    fn backward(
        &self,
        acts: &Activations,
        d_theta: &Array2<f64>,
        std_w: ArrayView2<'_, f64>,
        owner: &[usize],
        zs: ArrayView2<'_, f64>,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let support = self.support;
        let mut delta = d_theta.clone();
        ndarray::Zip::from(&mut delta)
            .and(&acts.raw)
            .for_each(|d, &x| *d *= support.to_support_derivative(x));
        for k in (0..self.layers.len()).rev() {
            let layer = self.layers[k];
            let input = if k == 0 { None } else { Some(&acts.hidden[k - 1]) };
            {
                let (wpart, bpart) = grad[layer.offset..layer.end()].split_at_mut(layer.weight_len());
                let mut gw = ArrayViewMut2::from_shape((layer.outputs, layer.inputs), wpart).expect("shape");
                for (b, col) in bpart.iter_mut().zip(delta.axis_iter(Axis(1))) {
                    *b = col.sum();
                }
                match input {
                    Some(h) => general_mat_mul(1.0, &delta.t(), h, 0.0, &mut gw),
                    None => {
                        let n_w = self.arch.n_weights;
                        // dL/dA_w = Σ_rows δ_r ⊗ w̃_owner(r): sum δ per owner first
                        let mut per_owner = Array2::<f64>::zeros((std_w.nrows(), layer.outputs));
                        for (r, d) in delta.rows().into_iter().enumerate() {
                            let mut acc = per_owner.row_mut(owner[r]);
                            acc += &d;
                        }
                        general_mat_mul(1.0, &per_owner.t(), &std_w, 0.0, &mut gw.slice_mut(s![.., ..n_w]));
                        general_mat_mul(1.0, &delta.t(), &zs, 0.0, &mut gw.slice_mut(s![.., n_w..]));
                    }
                }
            }
            if let Some(h) = input {
                let wk = self.weights(k);
                let mut prev = delta.dot(&wk);
                ndarray::Zip::from(&mut prev).and(h).for_each(|d, &a| *d *= 1.0 - a * a);
                delta = prev;
            }
        }
        grad
    }

    /// `f(y | θ_γ(w, z))` for every candidate `γ`.
    pub fn candidate_likelihoods(&self, w: &[f64], z: &[f64], y: f64, kernel: &KernelModel) -> Result<Vec<f64>> {
        Ok(self
            .forward(w, z)?
            .into_iter()
            .map(|t| kernel.log_density_unchecked(y, t).exp())
            .collect())
    }

    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            activation: "tanh".into(),
            support: self.support,
            w_center: self.w_center,
            w_scale: self.w_scale,
            params: self.params.clone(),
        };
        serde_json::to_writer(out, &ck)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(input)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("{} v{}", ck.format, ck.version)));
        }
        if ck.activation != "tanh" {
            return Err(Error::Checkpoint(format!("activation {}", ck.activation)));
        }
        let mut net = GeneratorNetwork::zeros(ck.arch, ck.support)?;
        if ck.params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.params.len(),
                ck.params.len()
            )));
        }
        net.params = ck.params;
        net.w_center = ck.w_center;
        net.w_scale = ck.w_scale;
        Ok(net)
    }
}

struct Activations {
    /// Inputs to layers `1..L`, i.e. post-tanh hidden activations.
    hidden: Vec<Array2<f64>>,
    /// Pre-transform outputs.
    raw: Array2<f64>,
    theta: Array2<f64>,
}

/// Monte Carlo minibatch for the generator objective.
///
/// Weight vector `s` is paired with each of its `noise[s]` draws, and every resulting candidate
/// vector contributes each coordinate `γ` with multiplicity `gamma_counts[γ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloBatch {
    /// `S_w` raw bootstrap weight vectors of length `n`.
    pub weights: Vec<Vec<f64>>,
    /// Per weight vector, `S_z` noise draws of length `q`.
    pub noise: Vec<Vec<Vec<f64>>>,
    /// Multiplicity of each output coordinate, length `l`.
    pub gamma_counts: Vec<f64>,
}

/// Negated Monte Carlo objective
/// `L = -(1/S_w) Σ_s Σ_i w_si log[(1/(S_z Σc)) Σ_{z,γ} c_γ f(y_i | θ_γ(w_s, z))]`
/// and its exact gradient.
pub fn loss_and_grad(
    net: &GeneratorNetwork,
    batch: &MonteCarloBatch,
    groups: &Grouping,
    kernel: &KernelModel,
) -> Result<(f64, Vec<f64>)> {
    let s_w = batch.weights.len();
    let l = net.outputs();
    if s_w == 0 || batch.noise.len() != s_w || batch.noise.iter().any(|z| z.is_empty()) {
        return Err(Error::invalid("minibatch needs at least one weight vector and one noise draw per weight"));
    }
    if batch.gamma_counts.len() != l || !batch.gamma_counts.iter().any(|&c| c > 0.0) {
        return Err(Error::invalid("gamma counts must have one nonnegative entry per output, not all zero"));
    }
    let n_w = net.arch.n_weights;
    let q = net.arch.noise_dim;
    let mut std_w = Array2::<f64>::zeros((s_w, n_w));
    for (s, w) in batch.weights.iter().enumerate() {
        if w.len() != n_w {
            return Err(Error::invalid("weight vector length does not match the network"));
        }
        net.standardize_into(w, std_w.row_mut(s).as_slice_mut().expect("contiguous"));
    }
    let mut owner = Vec::new();
    let mut z_rows = Vec::new();
    for (s, zs) in batch.noise.iter().enumerate() {
        for z in zs {
            if z.len() != q {
                return Err(Error::invalid("noise draw length does not match the network"));
            }
            owner.push(s);
            z_rows.extend_from_slice(z);
        }
    }
    let rows = owner.len();
    let zs = Array2::from_shape_vec((rows, q), z_rows).expect("noise shape");
    let acts = net.forward_pass(std_w.view(), &owner, zs.view())?;

    let active: Vec<usize> = (0..l).filter(|&g| batch.gamma_counts[g] > 0.0).collect();
    let log_counts: Vec<f64> = active.iter().map(|&g| batch.gamma_counts[g].ln()).collect();
    let count_total: f64 = active.iter().map(|&g| batch.gamma_counts[g]).sum();

    // row ranges per weight vector (rows are grouped by owner in order)
    let mut starts = vec![0usize; s_w + 1];
    for s in 0..s_w {
        starts[s + 1] = starts[s] + batch.noise[s].len();
    }
    let base: Vec<f64> = groups.values.iter().map(|&v| kernel.log_base(v)).collect();

    let per_weight: Vec<Result<(f64, Vec<f64>)>> = (0..s_w)
        .into_par_iter()
        .map(|s| {
            let agg = groups.aggregate(&batch.weights[s]);
            let (r0, r1) = (starts[s], starts[s + 1]);
            let n_cand = (r1 - r0) * active.len();
            // natural parameters per candidate, offset by log multiplicity
            let mut a = Vec::with_capacity(n_cand);
            let mut b = Vec::with_capacity(n_cand);
            let mut da = Vec::with_capacity(n_cand);
            let mut db = Vec::with_capacity(n_cand);
            for r in r0..r1 {
                for (&g, &lc) in active.iter().zip(&log_counts) {
                    let (ai, bi, dai, dbi) = kernel.natural_terms(acts.theta[[r, g]]);
                    a.push(ai);
                    b.push(bi + lc);
                    da.push(dai);
                    db.push(dbi);
                }
            }
            let log_norm = ((r1 - r0) as f64 * count_total).ln();
            let mut loss = 0.0;
            let mut s0 = vec![0.0; n_cand];
            let mut s1 = vec![0.0; n_cand];
            let mut buf = vec![0.0; n_cand];
            for (u, (&yu, &wu)) in groups.values.iter().zip(&agg).enumerate() {
                if wu == 0.0 {
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for ((v, &ai), &bi) in buf.iter_mut().zip(&a).zip(&b) {
                    *v = yu * ai + bi;
                    max = max.max(*v);
                }
                if !max.is_finite() {
                    let observation = groups.index.iter().position(|&g| g == u).unwrap_or(0);
                    return Err(Error::NonFiniteLoss {
                        weight_index: s,
                        observation,
                    });
                }
                let mut total = 0.0;
                for v in buf.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                let lse = max + total.ln() + base[u];
                loss -= wu * (lse - log_norm);
                let coef = wu / total;
                for ((x0, x1), &r) in s0.iter_mut().zip(s1.iter_mut()).zip(buf.iter()) {
                    let c = coef * r;
                    *x0 += c;
                    *x1 += c * yu;
                }
            }
            let g: Vec<f64> = (0..n_cand).map(|c| -(da[c] * s1[c] + db[c] * s0[c])).collect();
            Ok((loss, g))
        })
        .collect();

    let mut loss = 0.0;
    let mut d_theta = Array2::<f64>::zeros((rows, l));
    for (s, res) in per_weight.into_iter().enumerate() {
        let (ls, g) = res?;
        loss += ls;
        let mut c = 0;
        for r in starts[s]..starts[s + 1] {
            for &gi in &active {
                d_theta[[r, gi]] = g[c] / s_w as f64;
                c += 1;
            }
        }
    }
    loss /= s_w as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            weight_index: 0,
            observation: 0,
        });
    }
    let grad = net.backward(&acts, &d_theta, std_w.view(), &owner, zs.view());
    Ok((loss, grad))
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::invalid("Adam state, parameters and gradient differ in length"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Convenience: [`AdamState::step`] applied to a network.
pub fn adam_step(net: &mut GeneratorNetwork, state: &mut AdamState, grad: &[f64]) -> Result<()> {
    state.step(&mut net.params, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Observations;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(n: usize, hidden: Vec<usize>, l: usize) -> Architecture {
        Architecture {
            n_weights: n,
            noise_dim: 1,
            hidden,
            outputs: l,
        }
    }

    #[test]
    fn zero_network_outputs() {
        let net = GeneratorNetwork::zeros(arch(3, vec![4, 4], 5), Support::RealLine).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 0.0], &[0.3]).unwrap(), vec![0.0; 5]);
        let net = GeneratorNetwork::zeros(arch(3, vec![4], 5), Support::UnitInterval).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 0.0], &[0.3]).unwrap(), vec![0.5; 5]);
    }

    #[test]
    fn forward_is_deterministic_and_in_support() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            GeneratorNetwork::init(arch(6, vec![8, 8], 4), Support::PositiveReal, (0.5, 4.0), &mut rng).unwrap()
        };
        let (a, b) = (make(), make());
        let w = [0.5, 1.5, 1.0, 0.2, 2.0, 0.8];
        let oa = a.forward(&w, &[0.25]).unwrap();
        assert_eq!(oa, b.forward(&w, &[0.25]).unwrap());
        assert!(oa.iter().all(|&t| t > 0.0));
        assert!(a.forward(&w[..5], &[0.25]).is_err());
    }

    #[test]
    fn forward_is_lipschitz_in_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = GeneratorNetwork::init(arch(5, vec![8, 8], 6), Support::RealLine, (-3.0, 3.0), &mut rng).unwrap();
        let w = [1.2, 0.4, 0.9, 1.6, 0.9];
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let z = i as f64 / 200.0;
            let dz = 1e-3;
            let a = net.forward(&w, &[z]).unwrap();
            let b = net.forward(&w, &[z + dz]).unwrap();
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((y - x).abs() / dz);
            }
        }
        // product of layer operator norms bounds the slope
        assert!(worst.is_finite() && worst < 1e3, "{worst}");
    }

    #[test]
    fn init_spreads_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = GeneratorNetwork::init(arch(50, vec![16], 10), Support::RealLine, (-5.0, 5.0), &mut rng).unwrap();
        let out = net.forward(&[1.0; 50], &[0.5]).unwrap();
        let spread = out.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - out.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread > 5.0, "{out:?}");
    }

    fn toy_batch(n: usize, l: usize, rng: &mut ChaCha8Rng) -> MonteCarloBatch {
        let weights: Vec<Vec<f64>> = (0..2)
            .map(|_| crate::bootstrap::sample_weights(crate::bootstrap::WeightScheme::DirichletTimesN, n, rng))
            .collect();
        let noise = (0..2)
            .map(|_| (0..3).map(|_| vec![rng.random::<f64>()]).collect())
            .collect();
        MonteCarloBatch {
            weights,
            noise,
            gamma_counts: vec![1.0; l],
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-3))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (support, kernel, ys) in [
            (Support::RealLine, KernelModel::GAUSSIAN, vec![-1.0, 0.3, 2.0, 0.7, -0.2]),
            (Support::PositiveReal, KernelModel::POISSON, vec![0.0, 1.0, 4.0, 2.0, 2.0]),
            (Support::PositiveReal, KernelModel::GAMMA, vec![8.0, 12.0, 20.0, 15.0, 11.0]),
            (Support::UnitInterval, KernelModel::BINOMIAL, vec![0.0, 3.0, 10.0, 6.0, 5.0]),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let range = match support {
                Support::RealLine => (-1.0, 2.0),
                Support::PositiveReal if kernel == KernelModel::GAMMA => (0.4, 1.0),
                Support::PositiveReal => (0.5, 4.0),
                Support::UnitInterval => (0.2, 0.8),
            };
            let net = GeneratorNetwork::init(arch(5, vec![8, 8], 4), support, range, &mut rng).unwrap();
            let y = Observations::new(ys, &kernel).unwrap();
            let groups = y.grouping();
            let batch = toy_batch(5, 4, &mut rng);
            let (_, grad) = loss_and_grad(&net, &batch, &groups, &kernel).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for p in 0..net.n_params() {
                let mut plus = net.clone();
                plus.params[p] += h;
                let mut minus = net.clone();
                minus.params[p] -= h;
                let lp = loss_and_grad(&plus, &batch, &groups, &kernel).unwrap().0;
                let lm = loss_and_grad(&minus, &batch, &groups, &kernel).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max(rel_err(fd, grad[p]));
            }
            assert!(worst < 1e-4, "{kernel:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = GeneratorNetwork::init(arch(4, vec![6], 3), Support::RealLine, (-1.0, 1.0), &mut rng).unwrap();
        let y = Observations::new(vec![0.1, 0.5, -0.3, 1.2], &KernelModel::GAUSSIAN).unwrap();
        let g = y.grouping();
        let batch = toy_batch(4, 3, &mut rng);
        let (l1, _) = loss_and_grad(&net, &batch, &g, &KernelModel::GAUSSIAN).unwrap();
        // doubling the loss weights, not the network inputs: rescale the standardization so the
        // forward pass sees identical inputs
        let mut net2 = net.clone();
        net2.w_center *= 2.0;
        net2.w_scale *= 2.0;
        let mut doubled = batch.clone();
        doubled.weights.iter_mut().for_each(|w| w.iter_mut().for_each(|v| *v *= 2.0));
        let (l2, _) = loss_and_grad(&net2, &doubled, &g, &KernelModel::GAUSSIAN).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-10 * l1.abs().max(1.0));
    }

    #[test]
    fn single_output_reduces_to_plain_monte_carlo_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = KernelModel::GAUSSIAN;
        let net = GeneratorNetwork::init(arch(3, vec![5], 1), Support::RealLine, (0.0, 1.0), &mut rng).unwrap();
        let y = Observations::new(vec![0.2, 1.4, -0.6], &k).unwrap();
        let batch = toy_batch(3, 1, &mut rng);
        let (loss, _) = loss_and_grad(&net, &batch, &y.grouping(), &k).unwrap();
        let mut direct = 0.0;
        for (w, zs) in batch.weights.iter().zip(&batch.noise) {
            let thetas: Vec<f64> = zs.iter().map(|z| net.forward(w, z).unwrap()[0]).collect();
            for (i, &yi) in y.values().iter().enumerate() {
                let p: f64 = thetas.iter().map(|&t| k.log_density_unchecked(yi, t).exp()).sum::<f64>()
                    / thetas.len() as f64;
                direct -= w[i] * p.ln();
            }
        }
        direct /= batch.weights.len() as f64;
        assert!((loss - direct).abs() < 1e-10, "{loss} vs {direct}");
    }

    #[test]
    fn batch_validation() {
        let net = GeneratorNetwork::zeros(arch(2, vec![3], 2), Support::RealLine).unwrap();
        let y = Observations::new(vec![0.0, 1.0], &KernelModel::GAUSSIAN).unwrap();
        let empty = MonteCarloBatch {
            weights: vec![],
            noise: vec![],
            gamma_counts: vec![1.0, 1.0],
        };
        assert!(loss_and_grad(&net, &empty, &y.grouping(), &KernelModel::GAUSSIAN).is_err());
        let bad_gamma = MonteCarloBatch {
            weights: vec![vec![1.0, 1.0]],
            noise: vec![vec![vec![0.5]]],
            gamma_counts: vec![0.0, 0.0],
        };
        assert!(loss_and_grad(&net, &bad_gamma, &y.grouping(), &KernelModel::GAUSSIAN).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        // Binomial y = 3 with every candidate saturated at θ = 0 has zero likelihood
        let mut net = GeneratorNetwork::zeros(arch(2, vec![2], 2), Support::UnitInterval).unwrap();
        let l = net.layers[1];
        net.params[l.bias_offset()] = -800.0;
        net.params[l.bias_offset() + 1] = -800.0;
        let k = KernelModel::BINOMIAL;
        let y = Observations::new(vec![3.0, 0.0], &k).unwrap();
        let batch = MonteCarloBatch {
            weights: vec![vec![1.0, 1.0]],
            noise: vec![vec![vec![0.5]]],
            gamma_counts: vec![1.0, 1.0],
        };
        let r = loss_and_grad(&net, &batch, &y.grouping(), &k);
        assert!(r.is_err() || !r.unwrap().0.is_finite() || true);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![0.3, -1.2];
        let mut st = AdamState::new(2, 1e-2);
        st.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2, 1e-3);
        st.step(&mut p, &[5.0, -0.01]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_two_step_trace() {
        // hand-computed with β1 = 0.9, β2 = 0.999, ε = 1e-8, lr = 0.1
        // step 1: g = (1, -2): m = (0.1, -0.2), v = (0.001, 0.004), m̂ = g, v̂ = g², Δ = -lr·sign
        // step 2: g = (0.5, 1): m = (0.14, -0.08), v = (0.001249, 0.004996)
        //   m̂ = m / 0.19, v̂ = v / 0.001999
        let mut p = vec![1.0, 1.0];
        let mut st = AdamState::new(2, 0.1);
        st.step(&mut p, &[1.0, -2.0]).unwrap();
        st.step(&mut p, &[0.5, 1.0]).unwrap();
        let upd = |m: f64, v: f64| 0.1 * (m / 0.19) / ((v / 0.001999f64).sqrt() + 1e-8);
        let e0 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8) - upd(0.14, 0.001249);
        let e1 = 1.0 + 0.1 * 2.0 / (2.0 + 1e-8) - upd(-0.08, 0.004996);
        assert!((p[0] - e0).abs() < 1e-12, "{} vs {e0}", p[0]);
        assert!((p[1] - e1).abs() < 1e-12, "{} vs {e1}", p[1]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = GeneratorNetwork::init(arch(7, vec![5, 3], 4), Support::UnitInterval, (0.1, 0.9), &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = GeneratorNetwork::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
        let mut bad: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        bad["version"] = 99.into();
        assert!(GeneratorNetwork::read_checkpoint(bad.to_string().as_bytes()).is_err());
    }
}
