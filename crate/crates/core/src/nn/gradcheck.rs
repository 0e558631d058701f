//! Finite-difference verification of the tape's analytic gradients, in double
//! precision. Central differences with h = 1e-5 against a scalar loss built
//! by a caller-supplied closure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per named input, `|analytic − numeric| /
    /// max(1, |analytic|, |numeric|)` maximized over elements.
    pub per_input: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Check the gradient of `build`'s scalar output with respect to every listed
/// input. Inputs are drawn from a seeded normal distribution; `build` must be
/// a pure function of the leaf values it is handed.
pub fn grad_check<F>(inputs: &[(&str, Vec<usize>)], seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_impl(inputs, seed, build, |_, _| {})
}

/// Same check, but with a hook that may corrupt the analytic gradients before
/// comparison. Exists so tests can prove the checker catches wrong gradients
/// rather than vacuously passing.
pub fn grad_check_tampered<F, T>(
    inputs: &[(&str, Vec<usize>)],
    seed: u64,
    build: F,
    tamper: T,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    T: Fn(&str, &mut [f64]),
{
    grad_check_impl(inputs, seed, build, tamper)
}

fn grad_check_impl<F, T>(
    inputs: &[(&str, Vec<usize>)],
    seed: u64,
    build: F,
    tamper: T,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    T: Fn(&str, &mut [f64]),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(_, shape)| Tensor::truncated_normal(shape.clone(), 0.5, &mut rng))
        .collect();

    // Analytic pass.
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = base.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::usage("grad_check target must be scalar"));
        }
        g.backward(loss)?;
        for (i, id) in ids.iter().enumerate() {
            let grad = g
                .grad(*id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; base[i].numel()]);
            analytic.push(grad);
        }
    }
    for (i, (name, _)) in inputs.iter().enumerate() {
        tamper(name, &mut analytic[i]);
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    let mut work = base.clone();
    for (i, (name, _)) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..base[i].numel() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        per_input.push((name.to_string(), worst));
        max_rel = max_rel.max(worst);
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_err: max_rel,
    })
}
