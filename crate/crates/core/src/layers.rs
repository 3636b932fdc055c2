//! Dense layers with hand-written adjoints: affine maps, layer norm and SiLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};

/// Affine map `y = x·Wᵀ + b` over the last axis, with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: DenseArray,
    pub bias: DenseArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: DenseArray,
    pub bias: DenseArray,
}

impl LinearGrads {
    pub fn zeros_like(layer: &Linear) -> Self {
        Self {
            weight: DenseArray::zeros(layer.weight.shape()),
            bias: DenseArray::zeros(layer.bias.shape()),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight
            .data()
            .iter()
            .chain(self.bias.data())
            .all(|v| *v == 0.0)
    }
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DenseArray::zeros(&[outputs, inputs]),
            bias: DenseArray::zeros(&[outputs]),
        }
    }

    /// Weights uniform in `±1/√fan_in`, bias zero.
    pub fn fan_in_uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = DenseArray::from_fn(&[outputs, inputs], |_| rng.random_range(-bound..=bound));
        Self {
            weight,
            bias: DenseArray::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn rows(&self, x: &DenseArray) -> Result<usize> {
        let last = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("linear input is a scalar"))?;
        if last != self.inputs() {
            return Err(Error::shape(format!(
                "linear expects last extent {}, got shape {:?}",
                self.inputs(),
                x.shape()
            )));
        }
        Ok(x.len() / last.max(1))
    }

    pub fn forward(&self, x: &DenseArray) -> Result<DenseArray> {
        let rows = self.rows(x)?;
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = Vec::with_capacity(rows * n_out);
        for row in x.data().chunks_exact(n_in.max(1)).take(rows) {
            for o in 0..n_out {
                let wr = &w[o * n_in..(o + 1) * n_in];
                out.push(b[o] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank checked") = n_out;
        DenseArray::new(shape, out)
    }

    /// Returns parameter gradients and the input gradient for upstream `dy`.
    pub fn backward(&self, x: &DenseArray, dy: &DenseArray) -> Result<(LinearGrads, DenseArray)> {
        let rows = self.rows(x)?;
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if dy.len() != rows * n_out {
            return Err(Error::shape(format!(
                "linear upstream has {} elements, expected {}",
                dy.len(),
                rows * n_out
            )));
        }
        let w = self.weight.data();
        let mut gw = vec![0.0; n_out * n_in];
        let mut gb = vec![0.0; n_out];
        let mut dx = vec![0.0; rows * n_in];
        for r in 0..rows {
            let xr = &x.data()[r * n_in..(r + 1) * n_in];
            let gr = &dy.data()[r * n_out..(r + 1) * n_out];
            let dxr = &mut dx[r * n_in..(r + 1) * n_in];
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let gwr = &mut gw[o * n_in..(o + 1) * n_in];
                let wr = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    gwr[i] += g * xr[i];
                    dxr[i] += g * wr[i];
                }
            }
        }
        Ok((
            LinearGrads {
                weight: DenseArray::new(vec![n_out, n_in], gw)?,
                bias: DenseArray::new(vec![n_out], gb)?,
            },
            DenseArray::new(x.shape().to_vec(), dx)?,
        ))
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: DenseArray,
    pub beta: DenseArray,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub gamma: DenseArray,
    pub beta: DenseArray,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: DenseArray::full(&[dim], 1.0),
            beta: DenseArray::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &DenseArray) -> Result<DenseArray> {
        let d = self.dim();
        if x.shape().last() != Some(&d) {
            return Err(Error::shape(format!(
                "layer norm over {d}, got {:?}",
                x.shape()
            )));
        }
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(d) {
            let (mean, inv) = moments(row, self.eps);
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) * inv * g[i] + b[i]),
            );
        }
        DenseArray::new(x.shape().to_vec(), out)
    }

    pub fn backward(
        &self,
        x: &DenseArray,
        dy: &DenseArray,
    ) -> Result<(LayerNormGrads, DenseArray)> {
        let d = self.dim();
        dy.expect_shape(x.shape(), "layer norm upstream")?;
        let g = self.gamma.data();
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let mut dx = Vec::with_capacity(x.len());
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for (row, up) in x.data().chunks_exact(d).zip(dy.data().chunks_exact(d)) {
            let (mean, inv) = moments(row, self.eps);
            for i in 0..d {
                xhat[i] = (row[i] - mean) * inv;
                dg[i] += up[i] * xhat[i];
                db[i] += up[i];
                dxhat[i] = up[i] * g[i];
            }
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat =
                dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            dx.extend((0..d).map(|i| inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat)));
        }
        Ok((
            LayerNormGrads {
                gamma: DenseArray::new(vec![d], dg)?,
                beta: DenseArray::new(vec![d], db)?,
            },
            DenseArray::new(x.shape().to_vec(), dx)?,
        ))
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn silu(x: &DenseArray) -> DenseArray {
    DenseArray::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v * sigmoid(v)).collect(),
    )
    .expect("same shape")
}

pub fn silu_backward(x: &DenseArray, dy: &DenseArray) -> Result<DenseArray> {
    dy.expect_shape(x.shape(), "silu upstream")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    DenseArray::new(x.shape().to_vec(), data)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Numerically stable softmax of `logits`, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
