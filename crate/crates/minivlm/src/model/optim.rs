//! Adam optimizer over a list of parameter tensors.

use crate::error::{Error, Result};
use crate::scalar::{fp, Scalar};
use crate::tensor::Tensor;

/// Adam moment decay rates and stabilizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    hyper: AdamHyper,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Fresh state with zeroed moments for tensors of the given sizes.
    pub fn new(sizes: &[usize]) -> Self {
        Self::with_hyper(sizes, AdamHyper::default())
    }

    pub fn with_hyper(sizes: &[usize], hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// Rebuilds state from persisted parts (train-state sidecar loading).
    pub fn from_parts(hyper: AdamHyper, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Self {
        Self { hyper, step, m, v }
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// One Adam update: moments decay toward the gradient and its square,
    /// and each parameter moves by −lr · m̂ / (√v̂ + ε) with bias-corrected
    /// moments. A zero learning rate leaves parameters bitwise unchanged
    /// (moments still advance).
    pub fn apply(&mut self, tensors: &mut [Tensor<S>], grads: &[Vec<S>], lr: S) -> Result<()> {
        let mut refs: Vec<&mut Tensor<S>> = tensors.iter_mut().collect();
        self.apply_to_refs(&mut refs, grads, lr)
    }

    /// Like [`apply`](Self::apply), for parameter tensors that live in
    /// different owners (e.g. a model plus a detached head).
    pub fn apply_to_refs(
        &mut self,
        tensors: &mut [&mut Tensor<S>],
        grads: &[Vec<S>],
        lr: S,
    ) -> Result<()> {
        if tensors.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer state covers {} tensors, got {} tensors and {} gradients",
                self.m.len(),
                tensors.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let b1 = fp::<S>(self.hyper.beta1);
        let b2 = fp::<S>(self.hyper.beta2);
        let eps = fp::<S>(self.hyper.eps);
        let one = S::one();
        // Bias corrections computed in f64: β^step underflows gracefully.
        let bc1 = fp::<S>(1.0 - self.hyper.beta1.powi(self.step as i32));
        let bc2 = fp::<S>(1.0 - self.hyper.beta2.powi(self.step as i32));
        for ((tensor, grad), (m, v)) in tensors
            .iter_mut()
            .map(|t| &mut **t)
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if tensor.numel() != grad.len() || grad.len() != m.len() {
                return Err(Error::Config(format!(
                    "gradient length {} does not match tensor of {} values",
                    grad.len(),
                    tensor.numel()
                )));
            }
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
