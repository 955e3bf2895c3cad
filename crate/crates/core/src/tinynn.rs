//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Every network in the crate (sampler scoring nets, Q-networks, actors and
//! critics) is an [`Mlp`]. Rows of an input [`Matrix`] are evaluated
//! independently and with an identical operation order, so permuting the
//! input rows permutes the output rows bit-for-bit.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PARAMS_MAGIC: &[u8; 4] = b"NRMP";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Softplus => sigmoid(pre),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
            Activation::Sigmoid => 3,
            Activation::Softplus => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Identity,
            3 => Activation::Sigmoid,
            4 => Activation::Softplus,
            other => return Err(Error::Domain(format!("unknown activation code {other}"))),
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-major dense matrix; one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Stack equal-length rows. An empty slice yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Shape {
                    expected: format!("row of width {cols}"),
                    got: format!("row {i} of width {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// Single column as a vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Concatenate columns: `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                expected: format!("{} rows", self.rows),
                got: format!("{} rows", other.rows),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Split columns at `at`: `([.., ..at], [.., at..])`.
    pub fn split_cols(&self, at: usize) -> (Matrix, Matrix) {
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One affine layer followed by an element-wise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    /// `inputs x outputs`, row-major by input.
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Dense {
    fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        // He-uniform for relu, Xavier-uniform otherwise.
        let limit = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            _ => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Pre-activations for every row of `input`.
    fn affine(&self, input: &Matrix) -> Matrix {
        let mut pre = Matrix::zeros(input.rows, self.outputs);
        for r in 0..input.rows {
            let x = input.row(r);
            let out = pre.row_mut(r);
            out.copy_from_slice(&self.bias);
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let w = &self.weights[k * self.outputs..(k + 1) * self.outputs];
                for (o, &wkj) in out.iter_mut().zip(w) {
                    *o += xk * wkj;
                }
            }
        }
        pre
    }
}

/// Gradients with the same layout as an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Flattened in the same order as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&g| g == 0.0)
    }
}

/// Scale a group of gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut Gradients], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(factor);
        }
    }
    norm
}

/// Activations retained by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Matrix,
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("cache holds at least one layer")
    }

    fn layer_input(&self, layer: usize) -> &Matrix {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }
}

/// Multi-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    /// Bumped on every parameter mutation; caches from older versions are stale.
    version: u64,
}

impl Mlp {
    /// `dims = [in, h1, .., out]`; `hidden` applies to every layer but the last.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Domain("an MLP needs at least input and output dims".into()));
        }
        let mut activations = vec![hidden; dims.len() - 2];
        activations.push(output);
        Self::with_activations(dims, &activations, rng)
    }

    pub fn with_activations<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Domain(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(pair, &act)| Dense::new(pair[0], pair[1], act, rng))
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable layer access; counts as a parameter mutation.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols != self.input_dim() {
            return Err(Error::Shape {
                expected: format!("input width {}", self.input_dim()),
                got: format!("width {}", input.cols),
            });
        }
        Ok(())
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = layer.affine(&x);
            let act = layer.activation;
            z.data.iter_mut().for_each(|v| *v = act.apply(*v));
            x = z;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut outputs: Vec<Matrix> = Vec::with_capacity(n);
        for layer in &self.layers {
            let x = outputs.last().unwrap_or(input);
            let z = layer.affine(x);
            let act = layer.activation;
            let a = Matrix {
                rows: z.rows,
                cols: z.cols,
                data: z.data.iter().map(|&v| act.apply(v)).collect(),
            };
            pre.push(z);
            outputs.push(a);
        }
        let out = outputs.last().cloned().expect("at least one layer");
        Ok((
            out,
            ForwardCache {
                version: self.version,
                input: input.clone(),
                pre,
                outputs,
            },
        ))
    }

    /// Reverse-mode gradients of `sum(output_gradient * output)`.
    ///
    /// Returns the parameter gradients and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_gradient: &Matrix,
    ) -> Result<(Gradients, Matrix)> {
        if cache.version != self.version || cache.pre.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let out = cache.output();
        if output_gradient.rows != out.rows || output_gradient.cols != out.cols {
            return Err(Error::Shape {
                expected: format!("{}x{}", out.rows, out.cols),
                got: format!("{}x{}", output_gradient.rows, output_gradient.cols),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = output_gradient.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = cache.layer_input(li);
            let z = &cache.pre[li];
            let a = &cache.outputs[li];
            let act = layer.activation;
            let mut delta = upstream;
            for ((d, &p), &o) in delta.data.iter_mut().zip(&z.data).zip(&a.data) {
                *d *= act.derivative(p, o);
            }
            let g = &mut grads.layers[li];
            let outputs = layer.outputs;
            for r in 0..x.rows {
                let xr = x.row(r);
                let dr = delta.row(r);
                for (b, &d) in g.bias.iter_mut().zip(dr) {
                    *b += d;
                }
                for (k, &xk) in xr.iter().enumerate() {
                    if xk == 0.0 {
                        continue;
                    }
                    let gw = &mut g.weights[k * outputs..(k + 1) * outputs];
                    for (w, &d) in gw.iter_mut().zip(dr) {
                        *w += xk * d;
                    }
                }
            }
            let mut down = Matrix::zeros(x.rows, layer.inputs);
            for r in 0..x.rows {
                let dr = delta.row(r);
                let dst = down.row_mut(r);
                for (k, slot) in dst.iter_mut().enumerate() {
                    let w = &layer.weights[k * outputs..(k + 1) * outputs];
                    *slot = w.iter().zip(dr).map(|(a, b)| a * b).sum();
                }
            }
            upstream = down;
        }
        Ok((grads, upstream))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters layer by layer, weights before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.param_count()),
                got: format!("{}", values.len()),
            });
        }
        let mut it = values.iter();
        for layer in &mut self.layers {
            for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *p = *it.next().expect("length checked");
            }
        }
        self.version += 1;
        Ok(())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    /// Polyak averaging: `self = tau * online + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Domain(format!("tau must be in (0, 1], got {tau}")));
        }
        if !self.same_shape(online) {
            return Err(Error::Shape {
                expected: format!("{:?}", online.layer_dims()),
                got: format!("{:?}", self.layer_dims()),
            });
        }
        let online_params = online.params_flat();
        for (t, &o) in self.params_mut().zip(&online_params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        self.version += 1;
        Ok(())
    }

    /// Flat little-endian blob: shape header, then packed parameters.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(PARAMS_MAGIC)?;
        out.write_u32::<LittleEndian>(PARAMS_VERSION)?;
        out.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for layer in &self.layers {
            out.write_u64::<LittleEndian>(layer.inputs as u64)?;
            out.write_u64::<LittleEndian>(layer.outputs as u64)?;
            out.write_u8(layer.activation.code())?;
        }
        for layer in &self.layers {
            for &v in layer.weights.iter().chain(&layer.bias) {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Domain("not a parameter blob (bad magic)".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != PARAMS_VERSION {
            return Err(Error::Domain(format!("unsupported parameter blob version {version}")));
        }
        let count = input.read_u32::<LittleEndian>()? as usize;
        if count == 0 {
            return Err(Error::Domain("parameter blob has no layers".into()));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let inputs = input.read_u64::<LittleEndian>()? as usize;
            let outputs = input.read_u64::<LittleEndian>()? as usize;
            let activation = Activation::from_code(input.read_u8()?)?;
            shapes.push((inputs, outputs, activation));
        }
        for pair in shapes.windows(2) {
            if pair[0].1 != pair[1].0 {
                return Err(Error::Shape {
                    expected: format!("layer input {}", pair[0].1),
                    got: format!("{}", pair[1].0),
                });
            }
        }
        let mut layers = Vec::with_capacity(count);
        for (inputs, outputs, activation) in shapes {
            let mut weights = vec![0.0; inputs * outputs];
            input.read_f64_into::<LittleEndian>(&mut weights)?;
            let mut bias = vec![0.0; outputs];
            input.read_f64_into::<LittleEndian>(&mut bias)?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
                activation,
            });
        }
        Ok(Self { layers, version: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let n = net.param_count();
        Self {
            config,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One descent step `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// An all-zero gradient only decays the moments; parameters stay put.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if net.param_count() != self.first_moment.len() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.first_moment.len()),
                got: format!("{}", net.param_count()),
            });
        }
        let g: Vec<f64> = grads.flat();
        if g.len() != self.first_moment.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient entries", self.first_moment.len()),
                got: format!("{}", g.len()),
            });
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradient passed to Adam".into()));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let moves = g.iter().any(|&v| v != 0.0);
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let mut params = net.params_flat();
        for (i, &gi) in g.iter().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            if moves {
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        if moves {
            if !params.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("parameters after Adam step".into()));
            }
            net.set_params_flat(&params)?;
        }
        Ok(())
    }
}
