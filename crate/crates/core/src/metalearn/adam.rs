//! Outer-loop optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam with bias correction; moments cover the concatenation of every
/// parameter segment passed to [`AdamState::step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One descent step along `grads`; moments are allocated on first use.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        check_segments(params, grads)?;
        if self.m.is_empty() && self.step == 0 {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        }
        if self.m.len() != total {
            return Err(Error::LayoutMismatch(format!(
                "optimizer moments cover {} parameters, got {total}",
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut i = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                let g = gv.to_f64_lossy();
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                *pv -= T::of(self.lr * mhat / (vhat.sqrt() + self.eps));
                i += 1;
            }
        }
        Ok(())
    }
}

fn check_segments<T: Scalar>(params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::LayoutMismatch(
            "gradient segments do not match parameters".into(),
        ));
    }
    if grads.iter().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("meta-gradient".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OuterOptimizer {
    Adam(AdamState),
    /// `θ ← θ − lr · g`.
    Sgd {
        lr: f64,
    },
}

impl Default for OuterOptimizer {
    fn default() -> Self {
        OuterOptimizer::Adam(AdamState::default())
    }
}

impl OuterOptimizer {
    pub fn adam(lr: f64) -> Self {
        OuterOptimizer::Adam(AdamState::new(lr))
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        match self {
            OuterOptimizer::Adam(a) => a.step(params, grads),
            OuterOptimizer::Sgd { lr } => {
                check_segments(params, grads)?;
                let lr = T::of(*lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    crate::scalar::axpy_slice(-lr, g, p);
                }
                Ok(())
            }
        }
    }
}
