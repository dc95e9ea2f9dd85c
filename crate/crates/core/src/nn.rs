//! Fully connected ReLU networks with exact reverse-mode gradients and Adam.
//!
//! A network with layer sizes `[n0, n1, ..., nL]` computes
//! `W_L relu(W_{L-1} ... relu(W_1 x + b_1) ... ) + b_L`; the last layer is
//! linear. Weights of layer `k` are stored row-major with shape
//! `(n_{k+1}, n_k)`.
//!
//! The hot path (`forward_tape` / `backward_tape`) works on caller-owned
//! buffers and does not validate shapes; the public `forward` / `backward`
//! wrappers do.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpParamsDoc", into = "MlpParamsDoc")]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// On-disk layout: nested weight matrices.
#[derive(Serialize, Deserialize)]
struct MlpParamsDoc {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<MlpParamsDoc> for MlpParams {
    type Error = Error;

    fn try_from(doc: MlpParamsDoc) -> Result<Self> {
        MlpParams::from_nested(doc.layer_sizes, doc.weights, doc.biases)
    }
}

impl From<MlpParams> for MlpParamsDoc {
    fn from(p: MlpParams) -> Self {
        let weights = p
            .weights
            .iter()
            .enumerate()
            .map(|(k, w)| w.chunks(p.layer_sizes[k]).map(<[f64]>::to_vec).collect())
            .collect();
        MlpParamsDoc {
            layer_sizes: p.layer_sizes,
            weights,
            biases: p.biases,
        }
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least two layer sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidArchitecture(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// He-style uniform initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let mut rng = rng_from_seed(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_sizes(layer_sizes)?;
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Builds parameters from nested `(out, in)` weight matrices.
    pub fn from_nested(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<Vec<f64>>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let n = layer_sizes.len() - 1;
        if weights.len() != n || biases.len() != n {
            return shape_err(format!(
                "expected {n} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            ));
        }
        let mut flat = Vec::with_capacity(n);
        for (k, w) in weights.into_iter().enumerate() {
            let (fan_in, fan_out) = (layer_sizes[k], layer_sizes[k + 1]);
            if w.len() != fan_out || w.iter().any(|row| row.len() != fan_in) {
                return shape_err(format!("layer {k}: weight matrix must be {fan_out}x{fan_in}"));
            }
            if biases[k].len() != fan_out {
                return shape_err(format!("layer {k}: bias must have length {fan_out}"));
            }
            flat.push(w.concat());
        }
        let p = MlpParams {
            layer_sizes,
            weights: flat,
            biases,
        };
        if !p.is_finite() {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Row-major `(out, in)` weights of layer `k`.
    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn weights_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.weights[k]
    }

    pub fn biases(&self, k: usize) -> &[f64] {
        &self.biases[k]
    }

    pub fn biases_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.biases[k]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Flat view of every parameter, layer by layer (weights then biases).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for k in 0..self.n_layers() {
            out.extend_from_slice(&self.weights[k]);
            out.extend_from_slice(&self.biases[k]);
        }
        out
    }

    /// Mutable access to parameter `idx` in [`MlpParams::flat`] order.
    pub fn flat_mut(&mut self, mut idx: usize) -> &mut f64 {
        for k in 0..self.n_layers() {
            let nw = self.weights[k].len();
            if idx < nw {
                return &mut self.weights[k][idx];
            }
            idx -= nw;
            let nb = self.biases[k].len();
            if idx < nb {
                return &mut self.biases[k][idx];
            }
            idx -= nb;
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return shape_err(format!("input length {} != input dim {}", x.len(), self.input_dim()));
        }
        let mut tape = Tape::new(self);
        Ok(self.forward_tape(x, &mut tape).to_vec())
    }

    /// Gradients of `<upstream, forward(x)>` with respect to parameters and `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return shape_err(format!("input length {} != input dim {}", x.len(), self.input_dim()));
        }
        if upstream.len() != self.output_dim() {
            return shape_err(format!(
                "upstream length {} != output dim {}",
                upstream.len(),
                self.output_dim()
            ));
        }
        let mut tape = Tape::new(self);
        self.forward_tape(x, &mut tape);
        let mut grads = MlpGrads::zeros_like(self);
        let mut dx = vec![0.0; x.len()];
        self.backward_tape(&mut tape, upstream, &mut grads, Some(&mut dx));
        Ok((grads, dx))
    }

    /// Forward pass recording activations; returns the output slice.
    pub fn forward_tape<'t>(&self, x: &[f64], tape: &'t mut Tape) -> &'t [f64] {
        tape.acts[0].copy_from_slice(x);
        let last = self.n_layers() - 1;
        for k in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let (before, after) = tape.acts.split_at_mut(k + 1);
            let input = &before[k];
            let out = &mut after[0];
            let w = &self.weights[k];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut z = self.biases[k][o];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    z += wi * xi;
                }
                out[o] = if k < last && z <= 0.0 { 0.0 } else { z };
            }
        }
        &tape.acts[self.n_layers()]
    }

    /// Accumulates parameter gradients into `grads` and, if requested, writes
    /// (not accumulates) the input gradient into `dx`. `tape` must hold the
    /// activations of the matching forward pass.
    pub fn backward_tape(
        &self,
        tape: &mut Tape,
        upstream: &[f64],
        grads: &mut MlpGrads,
        dx: Option<&mut [f64]>,
    ) {
        let nl = self.n_layers();
        let Tape {
            acts,
            delta_a: delta,
            delta_b: prev,
        } = tape;
        delta.clear();
        delta.extend_from_slice(upstream);
        for k in (0..nl).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            if k < nl - 1 {
                // ReLU subgradient: zero where the activation is zero.
                for (d, a) in delta.iter_mut().zip(acts[k + 1].iter()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &acts[k];
            let gw = &mut grads.weights[k];
            let gb = &mut grads.biases[k];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (g, xi) in grow.iter_mut().zip(input.iter()) {
                    *g += d * xi;
                }
            }
            if k == 0 && dx.is_none() {
                break;
            }
            prev.clear();
            prev.resize(fan_in, 0.0);
            let w = &self.weights[k];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (p, wi) in prev.iter_mut().zip(row.iter()) {
                    *p += d * wi;
                }
            }
            std::mem::swap(delta, prev);
        }
        if let Some(dx) = dx {
            dx.copy_from_slice(&delta[..self.input_dim()]);
        }
    }
}

/// Activation buffers for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    delta_a: Vec<f64>,
    delta_b: Vec<f64>,
}

impl Tape {
    pub fn new(params: &MlpParams) -> Self {
        Tape {
            acts: params.layer_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            delta_a: Default::default(),
            delta_b: Default::default(),
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn input_len(&self) -> usize {
        self.acts[0].len()
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn biases(&self, k: usize) -> &[f64] {
        &self.biases[k]
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[k]);
            out.extend_from_slice(&self.biases[k]);
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|&x| x == 0.0))
    }

    fn matches(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.weights.len()
            && self
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(a, b)| a.len() == b.len())
            && self
                .biases
                .iter()
                .zip(&params.biases)
                .all(|(a, b)| a.len() == b.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    m: MlpGrads,
    v: MlpGrads,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        AdamState {
            step: 0,
            config,
            m: MlpGrads::zeros_like(params),
            v: MlpGrads::zeros_like(params),
        }
    }

    /// Pure update: returns the advanced state and the updated parameters.
    pub fn step(&self, params: &MlpParams, grads: &MlpGrads) -> Result<(AdamState, MlpParams)> {
        let mut state = self.clone();
        let mut params = params.clone();
        state.update(&mut params, grads)?;
        Ok((state, params))
    }

    /// In-place update with bias correction.
    pub fn update(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        if !grads.matches(params) || !self.m.matches(params) {
            return shape_err("adam: gradient shape does not match parameters");
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let groups = params
            .weights
            .iter_mut()
            .zip(&grads.weights)
            .zip(self.m.weights.iter_mut().zip(self.v.weights.iter_mut()))
            .chain(
                params
                    .biases
                    .iter_mut()
                    .zip(&grads.biases)
                    .zip(self.m.biases.iter_mut().zip(self.v.biases.iter_mut())),
            );
        for ((p, g), (m, v)) in groups {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Draws a fresh random parameter vector around zero; used by tests that
/// need arbitrary (not He-scaled) networks.
pub fn random_params<R: rand::Rng>(layer_sizes: &[usize], scale: f64, rng: &mut R) -> Result<MlpParams> {
    let mut p = MlpParams::zeros(layer_sizes)?;
    for k in 0..p.n_layers() {
        p.weights[k].iter_mut().for_each(|w| *w = rng.random_range(-scale..scale));
        p.biases[k].iter_mut().for_each(|b| *b = rng.random_range(-scale..scale));
    }
    Ok(p)
}
