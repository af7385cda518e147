use rand::Rng;

use super::{Graph, GraphError, Tensor, Var};

const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Leaf name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest `|a − b|` over all coordinates.
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar `output` against central
/// finite differences, coordinate by coordinate, for every leaf in `point`.
///
/// `point` values are bound before checking; the graph is restored to them
/// afterwards. Relative error is `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn check_gradient(
    graph: &mut Graph,
    output: Var,
    point: &[(&str, Tensor)],
    epsilon: f64,
) -> Result<GradCheckReport, GraphError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    graph.forward(point)?;
    let grads = graph.backward_scalar(output)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, max_abs_error: 0.0, coordinates: 0 };

    for (name, base) in point {
        let analytic = grads.wrt(name).ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))?;
        let mut probe = base.clone();
        for i in 0..base.len() {
            let x0 = base.data()[i];
            probe.data_mut()[i] = x0 + epsilon;
            graph.set_leaf(name, probe.clone())?;
            graph.replay()?;
            let f_plus = graph.value(output).item();
            probe.data_mut()[i] = x0 - epsilon;
            graph.set_leaf(name, probe.clone())?;
            graph.replay()?;
            let f_minus = graph.value(output).item();
            probe.data_mut()[i] = x0;

            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        graph.set_leaf(name, base.clone())?;
    }
    graph.replay()?;
    Ok(report)
}

/// Reduces a non-scalar node to a scalar through a fixed random weighting,
/// `Σ r ⊙ x` with `r ~ U(-1, 1)`, so every output coordinate contributes.
pub fn random_projection<R: Rng>(graph: &mut Graph, x: Var, rng: &mut R) -> Result<Var, GraphError> {
    let shape = graph.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let r = graph.constant(r);
    let prod = graph.mul(x, r)?;
    graph.sum(prod)
}
