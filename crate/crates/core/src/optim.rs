//! AdamW with decoupled weight decay and per-tensor learning rates.

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates and step counts, one slot per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<DenseArray>,
    v: Vec<DenseArray>,
    steps: Vec<u64>,
}

impl AdamWState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a DenseArray>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (DenseArray::zeros(p.shape()), DenseArray::zeros(p.shape())))
            .unzip();
        let steps = vec![0; m.len()];
        Self {
            config,
            m,
            v,
            steps,
        }
    }

    pub fn steps(&self, index: usize) -> u64 {
        self.steps[index]
    }

    /// Updates every tensor whose `frozen` flag is false:
    /// `p ← p·(1 − lr·wd) − lr·m̂ / (√v̂ + eps)`.
    /// Frozen tensors and their moments are left untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut DenseArray],
        grads: &[DenseArray],
        lrs: &[f64],
        frozen: &[bool],
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || lrs.len() != n || frozen.len() != n {
            return Err(Error::shape(format!(
                "optimizer tracks {n} tensors; got {} params, {} grads, {} rates, {} flags",
                params.len(),
                grads.len(),
                lrs.len(),
                frozen.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            g.expect_shape(p.shape(), "gradient")?;
        }
        let c = self.config;
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let lr = lrs[i];
            let decay = 1.0 - lr * c.weight_decay;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in params[i]
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m)
                .zip(v)
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
