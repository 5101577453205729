//! Multilayer perceptrons with tanh hidden layers and a linear output layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{dense_forward, tanh_jet_forward, JetLayout, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// One affine layer; `weight` is `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Activation after each hidden layer (`layers.len() - 1` entries).
    pub activations: Vec<Activation>,
}

/// Value and coordinate derivatives of the network output at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordDerivs {
    pub value: Vec<f64>,
    /// `firsts[i]` is the derivative with respect to `coord_indices[i]`.
    pub firsts: Vec<Vec<f64>>,
    pub second: Option<Vec<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases, reproducible per seed.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect();
                Dense {
                    weight: Tensor::new(fan_in, fan_out, data),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect::<Vec<_>>();
        let activations = vec![activation; layers.len() - 1];
        Ok(Mlp {
            layers,
            activations,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.cols));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter buffers in a fixed order: weight then bias per layer.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(&mut l.weight.data);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(&l.weight.data);
            out.push(&l.bias);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        if self.activations.len() + 1 != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.rows * l.weight.cols != l.weight.data.len() || l.bias.len() != l.weight.cols {
                return Err(Error::Shape(format!("layer {i} has inconsistent buffers")));
            }
            if i > 0 && self.layers[i - 1].weight.cols != l.weight.rows {
                return Err(Error::Shape(format!("layer {i} does not chain with layer {}", i - 1)));
            }
            if l.weight.data.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("layer {i} holds non-finite values")));
            }
        }
        Ok(())
    }

    /// Evaluates a stacked jet (see [`JetLayout`]).
    pub fn forward_jet(&self, x: &Tensor, layout: &JetLayout) -> Result<Tensor> {
        if x.cols != self.input_dim() || x.rows != layout.rows() {
            return Err(Error::Shape(format!(
                "input {}x{} does not fit a {}-input network with {} jet rows",
                x.rows,
                x.cols,
                self.input_dim(),
                layout.rows()
            )));
        }
        let mut h = dense_forward(x, &self.layers[0].weight, &self.layers[0].bias, layout.points);
        for (l, act) in self.layers[1..].iter().zip(&self.activations) {
            if *act == Activation::Tanh {
                h = tanh_jet_forward(&h, layout);
            }
            h = dense_forward(&h, &l.weight, &l.bias, layout.points);
        }
        Ok(h)
    }

    /// Batch evaluation; `x` is `points × input_dim`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_jet(x, &JetLayout::plain(x.rows))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Tensor::new(1, x.len(), x.to_vec()))?.data)
    }

    /// Value, first derivatives with respect to the inputs in
    /// `coord_indices`, and the second derivative along `second` (which must
    /// be one of `coord_indices`).
    pub fn forward_with_coord_derivs(
        &self,
        x: &[f64],
        coord_indices: &[usize],
        second: Option<usize>,
    ) -> Result<CoordDerivs> {
        let dim = self.input_dim();
        if x.len() != dim || coord_indices.iter().any(|&c| c >= dim) {
            return Err(Error::Shape(format!(
                "input of length {} or coordinates {coord_indices:?} do not fit a {dim}-input network",
                x.len()
            )));
        }
        let second_of = match second {
            Some(s) => Some(
                coord_indices
                    .iter()
                    .position(|&c| c == s)
                    .ok_or_else(|| Error::Shape(format!("second-derivative coordinate {s} not among {coord_indices:?}")))?
                    + 1,
            ),
            None => None,
        };
        let (input, layout) = JetLayout::seed(x, dim, coord_indices, second_of);
        let out = self.forward_jet(&input, &layout)?;
        let row = |c: usize| out.row(c).to_vec();
        Ok(CoordDerivs {
            value: row(0),
            firsts: (1..=coord_indices.len()).map(row).collect(),
            second: layout.second_channel().map(row),
        })
    }
}
