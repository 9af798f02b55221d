//! Central-difference verification of reverse-mode gradients.

use super::graph::{Bindings, Graph, NodeId, Params};
use crate::error::{Error, Result};

/// Compare the analytic gradient of `output` with respect to `leaf` against
/// central differences with step `h`.
///
/// Returns the maximum over leaf entries of
/// `|analytic - (f(x+h) - f(x-h)) / 2h| / max(1, |analytic|)`.
/// The leaf may be a parameter or an input.
pub fn finite_difference_check(
    graph: &Graph,
    params: &Params,
    inputs: &Bindings,
    output: NodeId,
    leaf: &str,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "perturbation must be positive, got {h}"
        )));
    }
    graph
        .leaf(leaf)
        .ok_or_else(|| Error::UnknownLeaf(leaf.to_string()))?;

    let eval = graph.forward(params, inputs, &[output])?;
    let grads = eval.backward(output)?;
    let analytic = grads
        .get(leaf)
        .ok_or_else(|| Error::UnknownLeaf(leaf.to_string()))?
        .clone();

    let is_param = params.get(leaf).is_some();
    let n = analytic.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        let f = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let mut b = inputs.clone();
            if is_param {
                p.get_mut(leaf).expect("checked").data_mut()[i] += delta;
            } else {
                let mut t = b.get(leaf).expect("bound input").clone();
                t.data_mut()[i] += delta;
                b.bind(leaf, t);
            }
            graph.forward(&p, &b, &[output])?.scalar(output)
        };
        let numeric = (f(h)? - f(-h)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
