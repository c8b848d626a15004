use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{next_tag, MaskSampler, Matrix, Network, OutputHead};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output rows",
                bias.len(),
                weights.rows
            )));
        }
        Ok(DenseLayer { weights, bias, activation })
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols
    }

    pub fn output_width(&self) -> usize {
        self.weights.rows
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        let mut pre = self.bias.clone();
        self.weights.matvec_add(x, &mut pre);
        pre
    }
}

/// Feed-forward regressor: hidden dense layers followed by a scalar head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub head: OutputHead,
    #[serde(skip, default = "next_tag")]
    tag: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.head == other.head
    }
}

/// Intermediate values of one MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    tag: u64,
    /// Input to each hidden layer; `inputs[0]` is the example.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    /// Input to the head (last hidden activation after dropout).
    head_input: Vec<f64>,
    pub output: f64,
}

impl MlpCache {
    pub fn hidden_activation(&self, layer: usize) -> &[f64] {
        if layer + 1 < self.inputs.len() {
            &self.inputs[layer + 1]
        } else {
            &self.head_input
        }
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>, head: OutputHead) -> Result<Self> {
        let mlp = Mlp {
            layers,
            head,
            tag: next_tag(),
        };
        mlp.check_shapes()?;
        Ok(mlp)
    }

    /// Xavier-initialized ReLU network; biases start at zero.
    pub fn random<R: Rng>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for &h in hidden {
            layers.push(DenseLayer {
                weights: Matrix::xavier(h, width, width, h, rng),
                bias: vec![0.0; h],
                activation: Activation::Relu,
            });
            width = h;
        }
        Mlp {
            layers,
            head: OutputHead::xavier(width, rng),
            tag: next_tag(),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let mut width = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weights.rows || l.weights.data.len() != l.weights.rows * l.weights.cols {
                return Err(Error::Shape(format!("layer {i} is malformed")));
            }
            if let Some(w) = width {
                if l.input_width() != w {
                    return Err(Error::Shape(format!(
                        "layer {i} expects {} inputs, previous layer gives {w}",
                        l.input_width()
                    )));
                }
            }
            width = Some(l.output_width());
        }
        let last = width.unwrap_or(0);
        if self.layers.is_empty() || self.head.weights.len() != last {
            return Err(Error::Shape(format!(
                "head has {} weights for a {last}-wide last layer",
                self.head.weights.len()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_width)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::output_width).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }
}

impl Network for Mlp {
    type Input = [f64];
    type Cache = MlpCache;

    fn forward(&self, x: &[f64], mut dropout: Option<&mut MaskSampler>) -> Result<(f64, MlpCache)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_all = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut current = x.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&current);
            let mut act: Vec<f64> = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            let mask = dropout.as_deref_mut().map(|s| s.sample(act.len()));
            if let Some(m) = &mask {
                act.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
            }
            inputs.push(std::mem::replace(&mut current, act));
            pre_all.push(pre);
            masks.push(mask);
        }
        let output = self.head.apply(&current);
        Ok((
            output,
            MlpCache {
                tag: self.tag,
                inputs,
                pre: pre_all,
                masks,
                head_input: current,
                output,
            },
        ))
    }

    fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        for layer in &self.layers {
            let mut pre = layer.pre_activation(&current);
            pre.iter_mut().for_each(|p| *p = layer.activation.apply(*p));
            current = pre;
        }
        Ok(self.head.apply(&current))
    }

    fn backward(&self, cache: &MlpCache, d_out: f64, grads: &mut Mlp) -> Result<()> {
        if cache.tag != self.tag || cache.pre.len() != self.layers.len() {
            return Err(Error::CacheMismatch);
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }
        for (g, h) in grads.head.weights.iter_mut().zip(&cache.head_input) {
            *g += d_out * h;
        }
        grads.head.bias += d_out;
        let mut d: Vec<f64> = self.head.weights.iter().map(|w| w * d_out).collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(m) = &cache.masks[l] {
                d.iter_mut().zip(m).for_each(|(di, k)| *di *= k);
            }
            for (di, &p) in d.iter_mut().zip(&cache.pre[l]) {
                *di *= layer.activation.derivative(p);
            }
            let g = &mut grads.layers[l];
            g.weights.add_outer(&d, &cache.inputs[l]);
            g.bias.iter_mut().zip(&d).for_each(|(b, di)| *b += di);
            if l > 0 {
                let mut below = vec![0.0; layer.input_width()];
                layer.weights.t_matvec_add(&d, &mut below);
                d = below;
            }
        }
        Ok(())
    }

    fn cache_output(cache: &MlpCache) -> f64 {
        cache.output
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: Matrix::zeros(l.weights.rows, l.weights.cols),
                    bias: vec![0.0; l.bias.len()],
                    activation: l.activation,
                })
                .collect(),
            head: OutputHead {
                weights: vec![0.0; self.head.weights.len()],
                bias: 0.0,
            },
            tag: next_tag(),
        }
    }

    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weights"), l.weights.data.as_slice()));
            out.push((format!("layer{i}.bias"), l.bias.as_slice()));
        }
        out.push(("head.weights".into(), self.head.weights.as_slice()));
        out.push(("head.bias".into(), std::slice::from_ref(&self.head.bias)));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.tag = next_tag();
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weights.data.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.head.weights.as_mut_slice());
        out.push(std::slice::from_mut(&mut self.head.bias));
        out
    }
}
