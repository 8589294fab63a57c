//! Dense feed-forward networks with tanh hidden layers and a linear head,
//! batched reverse-mode gradients, Adam, and a flat checkpoint format.
//!
//! Checkpoint layout: one line of JSON (terminated by `\n`) describing the
//! networks, followed by every parameter as little-endian `f64`. For each
//! network in header order and each layer in order, the weight matrix
//! (`fan_in × fan_out`, row-major) comes first, then the bias vector.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l] × sizes[l+1]`.
    weights: Vec<Mat>,
    biases: Vec<Vector>,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug)]
pub struct GradTape {
    /// Input of every layer (batch × fan_in); entry 0 is the network input.
    inputs: Vec<Mat>,
    consumed: bool,
}

/// Parameter-shaped gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vector>,
}

impl Mlp {
    /// Uniform Glorot initialization, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for w in &mut net.weights {
            let (fan_in, fan_out) = w.shape();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            // Row-major draw order.
            for i in 0..fan_in {
                for j in 0..fan_out {
                    w[(i, j)] = rng.random_range(-limit..limit);
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| Mat::zeros(w[0], w[1])).collect(),
            biases: sizes[1..].iter().map(|&n| Vector::zeros(n)).collect(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Mat {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Vector {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Mat {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Vector {
        &mut self.biases[layer]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn affine(&self, layer: usize, x: &Mat) -> Mat {
        let mut z = x * &self.weights[layer];
        for (j, b) in self.biases[layer].iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Usage(format!(
                "network expects {} inputs, got {cols}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Batched forward pass (one sample per row), recording a tape.
    pub fn forward_batch(&self, x: &Mat) -> Result<(Mat, GradTape)> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut h = x.clone();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let mut z = self.affine(l, &h);
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        Ok((h, GradTape { inputs, consumed: false }))
    }

    /// Batched forward pass without a tape.
    pub fn predict_batch(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x.ncols())?;
        let mut h = x.clone();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            h = self.affine(l, &h);
            if l < last {
                h.apply(|v| *v = v.tanh());
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Mat::from_row_slice(1, x.len(), x);
        Ok(self.predict_batch(&m)?.iter().copied().collect())
    }

    /// Reverse pass: gradients of `Σ d_out ∘ output` with respect to every
    /// parameter. A tape can be consumed only once.
    pub fn backward(&self, tape: &mut GradTape, d_out: &Mat) -> Result<Gradients> {
        if tape.consumed {
            return Err(Error::Usage("gradient tape already consumed".into()));
        }
        if tape.inputs.len() != self.n_layers() {
            return Err(Error::Usage("tape does not match this network".into()));
        }
        let batch = tape.inputs[0].nrows();
        if d_out.shape() != (batch, self.output_dim()) {
            return Err(Error::Usage(format!(
                "upstream gradient must be {batch}x{}, got {}x{}",
                self.output_dim(),
                d_out.nrows(),
                d_out.ncols()
            )));
        }
        tape.consumed = true;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_out.clone();
        for l in (0..self.n_layers()).rev() {
            let input = &tape.inputs[l];
            grads.weights[l] = input.tr_mul(&delta);
            grads.biases[l] = Vector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            if l > 0 {
                let mut back = &delta * self.weights[l].transpose();
                back.zip_apply(input, |d, h| *d *= 1.0 - h * h);
                delta = back;
            }
        }
        Ok(grads)
    }

    /// Parameters in checkpoint order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                out.extend(w.row(i).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Usage(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite parameter".into()));
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = it.next().expect("length checked");
                }
            }
            for v in b.iter_mut() {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Mat::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| Vector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                out.extend(w.row(i).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.amax())
            .chain(self.biases.iter().map(|b| b.amax()))
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.norm_squared())
            .chain(self.biases.iter().map(|b| b.norm_squared()))
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..net.n_layers() {
            let w = &mut net.weights[l];
            let (gm, mm, vm) = (&grads.weights[l], &mut self.m.weights[l], &mut self.v.weights[l]);
            for idx in 0..w.len() {
                update(&mut w[idx], gm[idx], &mut mm[idx], &mut vm[idx]);
            }
            let b = &mut net.biases[l];
            let (gb, mb, vb) = (&grads.biases[l], &mut self.m.biases[l], &mut self.v.biases[l]);
            for idx in 0..b.len() {
                update(&mut b[idx], gb[idx], &mut mb[idx], &mut vb[idx]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub networks: Vec<NetworkEntry>,
    /// Free-form metadata owned by the caller.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "sensorsched-mlp-f64le";

pub fn write_checkpoint<W: Write>(mut out: W, seed: u64, nets: &[(&str, &Mlp)], meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        seed,
        networks: nets
            .iter()
            .map(|(name, net)| NetworkEntry {
                name: (*name).into(),
                layers: net.sizes().to_vec(),
            })
            .collect(),
        meta,
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    for (_, net) in nets {
        for v in net.params_flat() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(CheckpointHeader, Vec<(String, Mlp)>)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Parse(format!(
            "unsupported checkpoint format {} v{}",
            header.format, header.version
        )));
    }
    let mut nets = Vec::with_capacity(header.networks.len());
    for entry in &header.networks {
        let mut net = Mlp::zeros(&entry.layers)?;
        let mut bytes = vec![0u8; net.n_params() * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|_| Error::Parse(format!("checkpoint truncated in network {}", entry.name)))?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.set_params_flat(&flat)?;
        nets.push((entry.name.clone(), net));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Parse("trailing bytes after checkpoint payload".into()));
    }
    Ok((header, nets))
}
