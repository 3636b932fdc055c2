//! Exponential moving average of model weights:
//! `shadow ← decay·shadow + (1 − decay)·param` after every optimizer step.

use crate::array::DenseArray;
use crate::error::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.9999;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<DenseArray>,
    pub decay: f64,
    pub updates: u64,
}

impl EmaState {
    /// Starts the shadow as a copy of `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a DenseArray>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay {decay} outside (0, 1)"
            )));
        }
        Ok(Self {
            shadow: params.into_iter().cloned().collect(),
            decay,
            updates: 0,
        })
    }

    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a DenseArray>) -> Result<()> {
        let params: Vec<&DenseArray> = params.into_iter().collect();
        if params.len() != self.shadow.len() {
            return Err(Error::shape(format!(
                "EMA tracks {} tensors, got {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for (s, p) in self.shadow.iter().zip(&params) {
            p.expect_shape(s.shape(), "EMA parameter")?;
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        self.updates += 1;
        Ok(())
    }
}

pub fn ema_update<'a>(
    mut state: EmaState,
    params: impl IntoIterator<Item = &'a DenseArray>,
) -> Result<EmaState> {
    state.update(params)?;
    Ok(state)
}
