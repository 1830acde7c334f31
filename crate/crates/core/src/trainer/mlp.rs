//! Fully connected network with hand-written reverse mode.
//!
//! Every layer but the last applies the activation; the output of the last
//! hidden layer is the feature vector `z` and the final linear layer is the
//! classification head.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::write_atomic;
use crate::error::{check_dim, Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"MGM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::InvalidParams(format!("unknown activation code {other}"))),
        }
    }
}

/// `y = x Wᵀ + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn affine(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediate values kept for [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    pub cache: ForwardCache,
}

/// Parameter gradients, laid out like [`MlpModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidParams(
                "need at least one hidden layer and a head".into(),
            ));
        }
        for pair in layers.windows(2) {
            check_dim("consecutive layer sizes", pair[0].outputs(), pair[1].inputs())?;
        }
        for l in &layers {
            check_dim("bias length", l.outputs(), l.bias.len())?;
            if let Some(i) = l.weight.iter().chain(l.bias.iter()).position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(i));
            }
        }
        Ok(Self { layers, activation })
    }

    /// He (relu) or Glorot (tanh) normal initialization with zero biases.
    /// `sizes` lists every width from input to class count.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 3 || sizes.contains(&0) {
            return Err(Error::InvalidParams(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let var = match activation {
                    Activation::Relu => 2.0 / fan_in as f64,
                    Activation::Tanh => 2.0 / (fan_in + fan_out) as f64,
                };
                let normal = Normal::new(0.0, var.sqrt()).expect("positive std");
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.head().inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.head().outputs()
    }

    fn head(&self) -> &Layer {
        self.layers.last().expect("at least two layers")
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        check_dim("input dimension vs first layer", self.input_dim(), inputs.ncols())?;
        let hidden = &self.layers[..self.layers.len() - 1];
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(hidden.len()),
        };
        let mut x = inputs.to_owned();
        for layer in hidden {
            let pre = layer.affine(x.view());
            let act = self.activation;
            let out = pre.mapv(|v| act.apply(v));
            cache.inputs.push(x);
            cache.pre_activations.push(pre);
            x = out;
        }
        let logits = self.head().affine(x.view());
        cache.inputs.push(x.clone());
        Ok(ForwardPass {
            features: x,
            logits,
            cache,
        })
    }

    /// Reverse pass. `grad_features`, when given, is added to the gradient
    /// flowing back from the head at the feature layer.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: ArrayView2<'_, f64>,
        grad_features: Option<ArrayView2<'_, f64>>,
    ) -> Result<Gradients> {
        let n_layers = self.layers.len();
        if cache.inputs.len() != n_layers || cache.pre_activations.len() != n_layers - 1 {
            return Err(Error::InvalidParams("cache does not match model".into()));
        }
        let features = &cache.inputs[n_layers - 1];
        check_dim("grad_logits rows", features.nrows(), grad_logits.nrows())?;
        check_dim("grad_logits columns", self.num_classes(), grad_logits.ncols())?;
        if let Some(g) = grad_features {
            check_dim("grad_features rows", features.nrows(), g.nrows())?;
            check_dim("grad_features columns", self.feature_dim(), g.ncols())?;
        }

        let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
        let head = self.head();
        grads.push(Layer {
            weight: grad_logits.t().dot(features),
            bias: grad_logits.sum_axis(Axis(0)),
        });
        let mut upstream = grad_logits.dot(&head.weight);
        if let Some(g) = grad_features {
            upstream += &g;
        }
        for idx in (0..n_layers - 1).rev() {
            let act = self.activation;
            let pre = &cache.pre_activations[idx];
            let mut delta = upstream;
            delta.zip_mut_with(pre, |d, &p| *d *= act.derivative(p));
            let input = &cache.inputs[idx];
            grads.push(Layer {
                weight: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            upstream = delta.dot(&self.layers[idx].weight);
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in the same order as [`Gradients::flatten`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("flat parameter count", self.param_count(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// `p ← p − lr · step` for every parameter.
    pub fn apply_update(&mut self, step: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&step.layers) {
            l.weight.scaled_add(-lr, &g.weight);
            l.bias.scaled_add(-lr, &g.bias);
        }
    }

    /// Checkpoint bytes: magic "MGM1", `u8` activation, `u32` layer count,
    /// then per layer `u32` out, `u32` in, `out·in` weights (row-major) and
    /// `out` biases, all little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 8 * (self.param_count() + self.layers.len()));
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(self.activation.code());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
            out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
            for v in l.weight.iter().chain(l.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let end = pos + len;
            if end > bytes.len() {
                return Err(Error::TruncatedFile {
                    expected: end,
                    actual: bytes.len(),
                });
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let magic = take(4)?;
        if magic != MODEL_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found,
            });
        }
        let activation = Activation::from_code(take(1)?[0])?;
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let count = read_u32(take(4)?);
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let out = read_u32(take(4)?);
            let inp = read_u32(take(4)?);
            let raw = take(8 * (out * inp + out))?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let weight = Array2::from_shape_vec((out, inp), vals[..out * inp].to_vec())
                .map_err(|e| Error::InvalidParams(e.to_string()))?;
            let bias = Array1::from_vec(vals[out * inp..].to_vec());
            layers.push(Layer { weight, bias });
        }
        if pos != bytes.len() {
            return Err(Error::TruncatedFile {
                expected: pos,
                actual: bytes.len(),
            });
        }
        Self::new(layers, activation)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SGD with classical momentum: `v ← μ v + g + λ p`, `p ← p − lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay: 0.0,
            velocity: None,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step(&mut self, model: &mut MlpModel, mut grads: Gradients) {
        if self.weight_decay != 0.0 {
            for (g, p) in grads.layers.iter_mut().zip(&model.layers) {
                g.weight.scaled_add(self.weight_decay, &p.weight);
                g.bias.scaled_add(self.weight_decay, &p.bias);
            }
        }
        let velocity = match self.velocity.take() {
            None => grads,
            Some(mut v) => {
                for (vl, gl) in v.layers.iter_mut().zip(&grads.layers) {
                    vl.weight.zip_mut_with(&gl.weight, |a, &b| *a = self.momentum * *a + b);
                    vl.bias.zip_mut_with(&gl.bias, |a, &b| *a = self.momentum * *a + b);
                }
                v
            }
        };
        model.apply_update(&velocity, self.learning_rate);
        self.velocity = Some(velocity);
    }
}
