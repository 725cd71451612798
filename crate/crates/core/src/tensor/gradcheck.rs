use super::{Graph, Result, Tensor, TensorError, Var};

/// Magnitudes below this are treated as this value when forming relative
/// errors, so gradients that are zero on both sides compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences with step `h`. `f` must be deterministic: any sampled choice
/// has to be fixed outside the closure.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "grad_check" })
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[e];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}
