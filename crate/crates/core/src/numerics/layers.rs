//! Parameterised building blocks shared by the master and student models.
//!
//! Layers own their [`Tensor`]s. A forward pass first binds the parameters
//! to a tape (`Tape::params`) and then threads the returned vars through the
//! `forward` functions, which consume them in `parameters()` order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::tensor::rectify;
use crate::numerics::{Tape, Tensor, Var};

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense
/// and convolutional layers.
fn fan_in_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: fan_in_uniform(rng, vec![inputs, outputs], inputs),
            bias: fan_in_uniform(rng, vec![outputs], inputs),
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            weight.values_mut()[i * dim + i] = 1.0;
        }
        Dense {
            weight,
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(tape: &Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[0])?;
        tape.add_bias(h, vars[1])
    }

    /// Plain evaluation of a row batch without a tape.
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (i, o) = (self.inputs(), self.outputs());
        let w = self.weight.values();
        let mut out = Vec::with_capacity(rows * o);
        for r in 0..rows {
            out.extend_from_slice(self.bias.values());
            let row = &mut out[r * o..];
            for (k, &xv) in x[r * i..(r + 1) * i].iter().enumerate() {
                if xv != 0.0 {
                    row.iter_mut().zip(&w[k * o..(k + 1) * o]).for_each(|(a, &wv)| *a += xv * wv);
                }
            }
        }
        out
    }
}

/// Stack of dense layers with rectifiers between them. When
/// `relu_output` is set the last layer is rectified too.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_output: bool,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng>(rng: &mut R, dims: &[usize], relu_output: bool) -> Self {
        let layers = dims.windows(2).map(|w| Dense::new(rng, w[0], w[1])).collect();
        Mlp { layers, relu_output }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs()];
        d.extend(self.layers.iter().map(Dense::outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").outputs()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn forward(&self, tape: &Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, pair) in vars.chunks(2).enumerate().take(self.layers.len()) {
            h = Dense::forward(tape, pair, h)?;
            if i < last || self.relu_output {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Tape-free forward over `rows` row-major inputs.
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(&h, rows);
            if i < last || self.relu_output {
                h.iter_mut().for_each(|v| *v = rectify(*v));
            }
        }
        h
    }
}

/// Square-kernel, stride-1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_ch, in_ch * k * k]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: fan_in_uniform(rng, vec![out_ch, fan_in], fan_in),
            bias: fan_in_uniform(rng, vec![out_ch], fan_in),
            kernel,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] / (self.kernel * self.kernel)
    }

    pub fn forward(&self, tape: &Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[0], vars[1], self.kernel, self.padding)
    }
}

/// Layout of an image-shaped input vector (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}
