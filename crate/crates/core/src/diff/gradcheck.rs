use super::{DiffError, Graph, NodeId, Tensor};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative deviation over the coordinates that were compared.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink).
    pub non_differentiable: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks `∂f/∂point` from [`Graph::backward`] against central differences
/// with step `h`. `build` receives a fresh graph and the parameter node for
/// `point` and must return a `1×1` node.
///
/// A coordinate whose forward and backward one-sided slopes differ by more
/// than `tol` (relative) is treated as a non-differentiable point and left
/// out of the comparison.
pub fn grad_check<F>(build: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, DiffError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |p: &Tensor| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = build(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = build(&mut g, x)?;
    let f0 = g.value(y).item();
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.len()],
    };

    // Coordinates with near-zero gradient are compared on an absolute scale
    // tied to the largest gradient, where finite-difference noise dominates.
    let floor = 1e-6 * analytic.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut numeric = Vec::with_capacity(point.len());
    let mut max_rel_error: f64 = 0.0;
    let mut non_differentiable = Vec::new();
    let mut checked = 0;
    for k in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[k] += h;
        let mut minus = point.clone();
        minus.data_mut()[k] -= h;
        let fp = eval(&plus)?;
        let fm = eval(&minus)?;
        let central = (fp - fm) / (2.0 * h);
        numeric.push(central);

        let right = (fp - f0) / h;
        let left = (f0 - fm) / h;
        let slope_scale = right.abs().max(left.abs()).max(1.0);
        // One-sided slopes of a smooth function differ by O(h·f''); a kink
        // makes them differ by O(1).
        if (right - left).abs() / slope_scale > tol.max(1e3 * h) {
            non_differentiable.push(k);
            continue;
        }
        checked += 1;
        let a = analytic[k];
        let denom = a.abs().max(central.abs()).max(floor);
        max_rel_error = max_rel_error.max((a - central).abs() / denom);
    }

    Ok(GradCheckReport { max_rel_error, checked, non_differentiable, analytic, numeric })
}
