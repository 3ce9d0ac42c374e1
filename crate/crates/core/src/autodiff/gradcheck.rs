use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

fn eval_scalar<F>(f: &F, xs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf_ref(x, false)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Checks `f` with respect to every coordinate of every tensor in `xs`.
///
/// `stride` > 1 checks only every `stride`-th coordinate of each tensor.
pub fn grad_check_many<F>(
    f: F,
    xs: &[Tensor],
    h: f64,
    stride: usize,
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf_ref(x, true)).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        vars.iter()
            .map(|&v| g.grad(v).expect("leaf tracked").to_vec())
            .collect()
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for coord in (0..grad.len()).step_by(stride.max(1)) {
            let orig = work[ti].data()[coord];
            work[ti].data_mut()[coord] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work[ti].data_mut()[coord] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work[ti].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad[coord], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_infinite() {
                report.max_rel_error = err;
                report.worst = (ti, coord);
            }
        }
    }
    Ok(report)
}

/// Single-input gradient check; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var, TensorError>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, 1)?;
    Ok(report.max_rel_error)
}
