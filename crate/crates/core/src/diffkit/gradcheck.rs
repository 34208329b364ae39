//! Central-difference gradient checking against the tape.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences of step `h` on every coordinate of every input.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_at(inputs, &all, h, f)
}

/// Like [`grad_check`] but only at the listed coordinates of each input.
pub fn grad_check_at<T, F>(inputs: &[Tensor<T>], coords: &[Vec<usize>], h: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    if coords.len() != inputs.len() {
        return Err(Error::Shape("one coordinate list per input".into()));
    }
    let eval = |ins: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).sum().to_f64_lossy())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out);
    let analytic: Vec<Tensor<T>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (j, list) in coords.iter().enumerate() {
        for &c in list {
            let orig = work[j].data()[c];
            work[j].data_mut()[c] = orig + T::lit(h);
            let plus = eval(&work)?;
            work[j].data_mut()[c] = orig - T::lit(h);
            let minus = eval(&work)?;
            work[j].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j].data()[c].to_f64_lossy();
            let rel = rel_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (j, c);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
