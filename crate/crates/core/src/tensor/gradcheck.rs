use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the maximum relative error.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-8)` where
/// `a` is the analytic and `n` the numerical derivative.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_difference_check`] over several inputs at once; every entry of
/// every input is perturbed.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!("finite-difference eps {eps} not in (0, 1e-2]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Outcome of [`gradient_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the compared entries.
    pub max_rel_error: f64,
    /// Entries compared against central differences.
    pub checked: usize,
    /// Entries whose `±eps` stencil crossed a relu kink or changed a
    /// max-pool winner, where a central difference is not a derivative.
    pub straddled: usize,
    /// `(input, entry, analytic, numeric)` of the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// `(analytic, numeric)` of every compared entry.
    pub compared: Vec<(f64, f64)>,
    /// Value of `f` at the unperturbed inputs.
    pub value: f64,
    pub eps: f64,
}

impl GradCheckReport {
    /// Absolute error a central difference can show on an exact gradient
    /// from rounding `f` alone: `ulps * EPSILON * |f| / (2 * eps)`.
    pub fn rounding_floor(&self, ulps: f64) -> f64 {
        ulps * f64::EPSILON * self.value.abs().max(f64::MIN_POSITIVE) / (2.0 * self.eps)
    }

    /// Compared entries whose error exceeds both `tol` (relative) and the
    /// rounding floor of `ulps` units in the last place of `f`.
    pub fn beyond_rounding(&self, tol: f64, ulps: f64) -> usize {
        let floor = self.rounding_floor(ulps);
        self.compared
            .iter()
            .filter(|(a, n)| {
                let err = (a - n).abs();
                err > tol * a.abs().max(n.abs()).max(1e-8) && err > floor
            })
            .count()
    }
}

/// [`finite_difference_check_many`] that only compares entries whose
/// perturbed evaluations take the same relu/max-pool branches as the
/// unperturbed one (see [`Tape::branch_pattern`]). Straddling entries are
/// counted, not compared.
pub fn gradient_check_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!("finite-difference eps {eps} not in (0, 1e-2]")));
    }
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.branch_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let pattern = tape.branch_pattern();
    let value = tape.value(loss).item();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        straddled: 0,
        worst: None,
        compared: Vec::new(),
        value,
        eps,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let (plus, plus_pattern) = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let (minus, minus_pattern) = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            if plus_pattern != pattern || minus_pattern != pattern {
                report.straddled += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((k, i, a, numeric));
            }
            report.checked += 1;
            report.compared.push((a, numeric));
        }
    }
    Ok(report)
}
