//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::{Error, Result};

/// Softmax of `logits / temperature`.
pub fn softmax_row(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidLogits);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidTemperature(temperature));
    }
    let inv = 1.0 / temperature;
    let mut row: Vec<f64> = logits.iter().map(|&z| inv * z).collect();
    kernels::softmax_in_place(&mut row);
    Ok(row)
}

/// Entropy node `-sum(p * log p)` for a probability row and its log.
pub fn entropy_node(graph: &mut Graph, probs: Var, log_probs: Var) -> Var {
    let plogp = graph.mul(probs, log_probs);
    let s = graph.sum(plogp);
    graph.scale(s, -1.0)
}

/// Central-difference gradient of a plain scalar function.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `build` at `point` against central
/// differences of the same forward computation.
///
/// `build` receives a fresh graph and the leaf holding the point and must
/// return a scalar node.
pub fn finite_diff_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut graph = Graph::new();
    let x = graph.leaf(point.clone());
    let out = build(&mut graph, x);
    graph.backward(out)?;
    let analytic = graph.grad(x).expect("leaf gradient").to_vec();

    let forward = |data: &[f64]| {
        let mut g = Graph::new();
        let t = Tensor::new(point.shape().to_vec(), data.to_vec()).unwrap();
        let x = g.constant(t);
        let out = build(&mut g, x);
        g.value(out).item()
    };
    let numeric = numeric_gradient(forward, point.data(), step);
    Ok(max_relative_error(&analytic, &numeric))
}
