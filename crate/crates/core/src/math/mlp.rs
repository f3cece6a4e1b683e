//! Small fully connected networks.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{HvpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`, applied as `x @ w + b`.
    pub w: Tensor,
    /// `[1, fan_out]`.
    pub b: Tensor,
}

/// Multilayer perceptron with SiLU on hidden layers and an identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    name: String,
    widths: Vec<usize>,
    layers: Vec<Layer>,
    hidden_activation: Activation,
}

impl Mlp {
    /// Random normal init scaled by `1/sqrt(fan_in)`.
    pub fn new(name: &str, widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(HvpError::Parameter(format!(
                "network `{name}` needs at least two positive widths, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>();
                Layer {
                    w: Tensor::from_rows(fan_in, fan_out, data),
                    b: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Mlp {
            name: name.to_string(),
            widths: widths.to_vec(),
            layers,
            hidden_activation: Activation::Silu,
        })
    }

    /// Same as [`Mlp::new`] with the output layer zeroed, so the network
    /// starts out as the zero map.
    pub fn zero_output(name: &str, widths: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::new(name, widths, seed)?;
        let last = net.layers.last_mut().expect("at least one layer");
        last.w = last.w.zeros_like();
        last.b = last.b.zeros_like();
        Ok(net)
    }

    pub fn from_layers(name: &str, layers: Vec<Layer>) -> Result<Self> {
        let mut widths = Vec::with_capacity(layers.len() + 1);
        for (i, l) in layers.iter().enumerate() {
            if l.b.rows() != 1 || l.b.cols() != l.w.cols() {
                return Err(HvpError::Dimension(format!("layer {i} bias shape")));
            }
            if i == 0 {
                widths.push(l.w.rows());
            } else if widths[i] != l.w.rows() {
                return Err(HvpError::Dimension(format!("layer {i} fan-in")));
            }
            widths.push(l.w.cols());
        }
        if layers.is_empty() {
            return Err(HvpError::Parameter("network without layers".into()));
        }
        Ok(Mlp {
            name: name.to_string(),
            widths,
            layers,
            hidden_activation: Activation::Silu,
        })
    }

    pub fn with_hidden_activation(mut self, act: Activation) -> Self {
        self.hidden_activation = act;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access; widths must be preserved.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn param_name(&self, layer: usize, kind: &str) -> String {
        format!("{}.{}.{}", self.name, layer, kind)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((self.param_name(i, "w"), &l.w));
            out.push((self.param_name(i, "b"), &l.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<(String, String)> = (0..self.layers.len())
            .map(|i| (self.param_name(i, "w"), self.param_name(i, "b")))
            .collect();
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, (wn, bn)) in self.layers.iter_mut().zip(names) {
            out.push((wn, &mut l.w));
            out.push((bn, &mut l.b));
        }
        out
    }

    /// Records the forward pass. With `trainable` the weights are bound as
    /// named parameters, otherwise as frozen leaves.
    pub fn forward(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<Var> {
        if tape.value(input).cols() != self.input_width() {
            return Err(HvpError::Dimension(format!(
                "network `{}` expects width {}, got {}",
                self.name,
                self.input_width(),
                tape.value(input).cols()
            )));
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = if trainable {
                (
                    tape.param(&self.param_name(i, "w"), &layer.w),
                    tape.param(&self.param_name(i, "b"), &layer.b),
                )
            } else {
                (
                    tape.frozen(&self.param_name(i, "w"), &layer.w),
                    tape.frozen(&self.param_name(i, "b"), &layer.b),
                )
            };
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i < last && self.hidden_activation == Activation::Silu {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    /// Jacobian of the output of one input row with respect to the input
    /// columns in `cols`, as `out_width x cols.len()` row-major.
    pub fn input_jacobian(&self, input: &[f64], cols: Range<usize>) -> Result<Vec<f64>> {
        if input.len() != self.input_width() || cols.end > input.len() {
            return Err(HvpError::Dimension("jacobian input".into()));
        }
        let k = cols.len();
        // Tangents are stored as `width x k`.
        let mut h = input.to_vec();
        let mut tan = vec![0.0; input.len() * k];
        for (j, c) in cols.enumerate() {
            tan[c * k + j] = 1.0;
        }
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (fi, fo) = (layer.w.rows(), layer.w.cols());
            let mut z = layer.b.data().to_vec();
            let mut zt = vec![0.0; fo * k];
            for p in 0..fi {
                let wrow = layer.w.row_slice(p);
                for o in 0..fo {
                    z[o] += h[p] * wrow[o];
                    for j in 0..k {
                        zt[o * k + j] += wrow[o] * tan[p * k + j];
                    }
                }
            }
            if li < last && self.hidden_activation == Activation::Silu {
                for o in 0..fo {
                    let x = z[o];
                    let s = 1.0 / (1.0 + (-x).exp());
                    let dz = s + x * s * (1.0 - s);
                    z[o] = x * s;
                    for j in 0..k {
                        zt[o * k + j] *= dz;
                    }
                }
            }
            h = z;
            tan = zt;
        }
        Ok(tan)
    }
}

/// Evaluates `net` on `input`, recording on `tape` when one is supplied.
pub fn mlp_forward(net: &Mlp, input: &Tensor, tape: Option<&mut Tape>) -> Result<Tensor> {
    match tape {
        Some(t) => {
            let x = t.constant(input.clone());
            let y = net.forward(t, x, true)?;
            Ok(t.value(y).clone())
        }
        None => {
            let mut t = Tape::new();
            let x = t.constant(input.clone());
            let y = net.forward(&mut t, x, false)?;
            Ok(t.value(y).clone())
        }
    }
}
