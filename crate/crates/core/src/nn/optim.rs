//! RMSprop: per-parameter mean-square gradient accumulator `v` with update
//! `v ← ρ·v + (1−ρ)·g²; p ← p − lr·g/(√v + ε)`.

use std::collections::HashMap;

use super::params::ParamStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Rmsprop<S> {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accum: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Rmsprop<S> {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        Rmsprop {
            learning_rate,
            decay,
            epsilon,
            accum: HashMap::new(),
        }
    }

    /// Apply one update. `grads` holds (name, gradient) pairs; parameters
    /// without a gradient this step are left untouched, as are their
    /// accumulators.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[(&str, &[S])]) -> Result<()> {
        let lr = S::from_f64(self.learning_rate);
        let rho = S::from_f64(self.decay);
        let one_m_rho = S::from_f64(1.0 - self.decay);
        let eps = S::from_f64(self.epsilon);
        for &(name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::data(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.numel() {
                return Err(Error::data(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite_s()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let v = self
                .accum
                .entry(name.to_string())
                .or_insert_with(|| vec![S::ZERO; g.len()]);
            for ((pv, &gv), vv) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = rho * *vv + one_m_rho * gv * gv;
                *pv -= lr * gv / (vv.sqrt_s() + eps);
            }
        }
        Ok(())
    }

    /// Accumulator contents in name order, for checkpointing.
    pub fn export(&self) -> Vec<(String, Vec<S>)> {
        let mut out: Vec<_> = self
            .accum
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn restore(&mut self, entries: Vec<(String, Vec<S>)>) {
        self.accum = entries.into_iter().collect();
    }
}
