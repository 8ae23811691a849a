//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use crate::nn::Params;
use crate::tensor::Tape;
use crate::{Error, Result, Scalar};

/// Bias-corrected Adam. Moment buffers are keyed by parameter name so
/// state survives checkpointing and model rebuilds.
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, moments: BTreeMap::new() }
    }

    /// Applies one update from the gradients accumulated on `tape`.
    /// Parameters absent from the tape count as zero-gradient: their
    /// moments decay and, from rest, the parameter does not move.
    pub fn step<M: Params<T>>(&mut self, model: &mut M, tape: &Tape<T>) -> Result<()> {
        self.steps += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.steps as i32));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.steps as i32));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);

        for p in model.params_mut() {
            let grad = tape.param_grad(&p.name);
            if grad.is_none() && !self.moments.contains_key(&p.name) {
                continue;
            }
            let numel = p.numel();
            if let Some(g) = grad {
                if g.len() != numel {
                    return Err(Error::shape(
                        "adam",
                        format!("{}: gradient len {} vs parameter {}", p.name, g.len(), numel),
                    ));
                }
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); numel], vec![T::zero(); numel]));
            if m.len() != numel {
                return Err(Error::shape(
                    "adam",
                    format!("{}: moment len {} vs parameter {}", p.name, m.len(), numel),
                ));
            }
            let data = p.value.data_mut();
            for i in 0..numel {
                let g = grad.map_or_else(T::zero, |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    /// Moment buffers in name order, `(name, first, second)`.
    pub fn moment_entries(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Replaces the optimizer state wholesale (checkpoint restore).
    pub fn restore_state(
        &mut self,
        steps: u64,
        moments: impl IntoIterator<Item = (String, Vec<T>, Vec<T>)>,
    ) {
        self.steps = steps;
        self.moments = moments.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}
