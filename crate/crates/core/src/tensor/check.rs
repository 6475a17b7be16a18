//! Central finite-difference gradient checking.

use super::{Graph, Result, Tensor, TensorError, Var};

/// Magnitudes below this are treated as this when forming relative errors,
/// so two gradients that are both numerically zero compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Whether either probe left the base point's smooth piece.
    pub crossed_kink: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Coordinates whose probes straddled a ReLU or max-pool kink. Their
    /// numeric estimate is not a derivative, so a report with any of these
    /// says nothing either way about the analytic gradient there.
    pub fn kink_crossings(&self) -> usize {
        self.coordinates.iter().filter(|c| c.crossed_kink).count()
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Value and [`Graph::kink_pattern`] of `f` at `inputs`.
fn evaluate<F>(f: &mut F, inputs: &[Tensor]) -> Result<(f64, Vec<usize>)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalar(v.shape().to_vec()));
    }
    Ok((v.item(), g.kink_pattern()))
}

/// Compares the recorded gradient of a scalar function against
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate, over every input.
///
/// `f` is called once with all inputs recorded as trainable leaves, then
/// twice per coordinate on perturbed copies.
pub fn grad_check<F>(mut f: F, at: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let (analytic, pattern): (Vec<Tensor>, Vec<usize>) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = at.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let analytic = vars
            .iter()
            .zip(at)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (analytic, g.kink_pattern())
    };

    let mut work: Vec<Tensor> = at.to_vec();
    let mut coordinates = Vec::new();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..grad.numel() {
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + h;
            let (plus, plus_pattern) = evaluate(&mut f, &work)?;
            work[input].data_mut()[index] = orig - h;
            let (minus, minus_pattern) = evaluate(&mut f, &work)?;
            work[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[index];
            coordinates.push(CoordinateCheck {
                input,
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
                crossed_kink: plus_pattern != pattern || minus_pattern != pattern,
            });
        }
    }
    let max_rel_error = coordinates.iter().fold(0.0, |m: f64, c| m.max(c.rel_error));
    Ok(GradCheckReport {
        passed: coordinates.iter().all(|c| c.rel_error < tol),
        coordinates,
        max_rel_error,
        tolerance: tol,
    })
}
