use super::{DiffError, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over the entries of each parameter.
    pub max_relative_error: Vec<f64>,
    /// Largest absolute difference over the entries of each parameter.
    pub max_absolute_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_relative_error.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var), DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok((tape, vars, root))
}

fn probe<F>(f: &F, params: &[Tensor], which: usize) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let (tape, _, root) = evaluate(f, params)?;
    let v = tape.value(root).item();
    if !v.is_finite() {
        return Err(DiffError::NonFiniteLoss { param: which });
    }
    Ok(v)
}

/// Finite-difference stencil used by [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+ε) − f(θ−ε)) / 2ε`
    Central,
    /// `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`, fourth-order accurate.
    FivePoint,
}

/// Checks the reverse-mode gradient of `loss` with respect to every entry of
/// every parameter using `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `loss` receives a fresh tape with each parameter registered as a leaf, in
/// order, and must return a scalar node.
pub fn grad_check<F>(
    loss: F,
    params: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    grad_check_with(loss, params, epsilon, tolerance, Stencil::Central)
}

/// [`grad_check`] with a selectable stencil.
pub fn grad_check_with<F>(
    loss: F,
    params: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    stencil: Stencil,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(DiffError::InvalidEpsilon(epsilon));
    }
    let (tape, vars, root) = evaluate(&loss, params)?;
    if !tape.value(root).item().is_finite() {
        return Err(DiffError::NonFiniteLoss { param: 0 });
    }
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = Vec::with_capacity(params.len());
    let mut max_abs = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut worst_rel = 0.0f64;
        let mut worst_abs = 0.0f64;
        for k in 0..params[pi].numel() {
            let original = params[pi].data()[k];
            let mut at = |offset: f64| -> Result<f64, DiffError> {
                work[pi].data_mut()[k] = original + offset;
                let v = probe(&loss, &work, pi);
                work[pi].data_mut()[k] = original;
                v
            };
            let numeric = match stencil {
                Stencil::Central => (at(epsilon)? - at(-epsilon)?) / (2.0 * epsilon),
                Stencil::FivePoint => {
                    let near = at(epsilon)? - at(-epsilon)?;
                    let far = at(2.0 * epsilon)? - at(-2.0 * epsilon)?;
                    (8.0 * near - far) / (12.0 * epsilon)
                }
            };
            let a = analytic.data()[k];
            worst_rel = worst_rel.max(relative_error(a, numeric));
            worst_abs = worst_abs.max((a - numeric).abs());
        }
        max_rel.push(worst_rel);
        max_abs.push(worst_abs);
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        max_absolute_error: max_abs,
        tolerance,
    })
}
