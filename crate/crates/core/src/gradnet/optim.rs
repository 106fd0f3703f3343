use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer with per-parameter moment buffers mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub(crate) steps: u64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect::<Vec<_>>();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Self { kind, lr, steps: 0, m, v }
    }

    pub fn sgd(lr: f64, params: &ParamStore<T>) -> Self {
        Self::new(OptimizerKind::Sgd, lr, params)
    }

    pub fn adam(lr: f64, params: &ParamStore<T>) -> Self {
        Self::new(OptimizerKind::adam(), lr, params)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. Non-finite gradients abort before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if grads.tensors.len() != params.len() {
            return Err(Error::Shape("gradient count does not match parameters".into()));
        }
        for (p, g) in params.iter().zip(&grads.tensors) {
            if p.value.len() != g.len() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{}`", p.name)));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
            }
        }
        self.steps += 1;
        let lr = T::of(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads.tensors) {
                    for (w, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = T::of(1.0 / (1.0 - beta1.powi(t)));
                let c2 = T::of(1.0 / (1.0 - beta2.powi(t)));
                let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                for (((p, g), m), v) in
                    params.iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v)
                {
                    for (((w, &gv), mv), vv) in
                        p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + one_b1 * gv;
                        *vv = b2 * *vv + one_b2 * gv * gv;
                        *w -= lr * (*mv * c1) / ((*vv * c2).sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}
