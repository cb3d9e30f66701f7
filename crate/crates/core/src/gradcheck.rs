//! Central finite-difference verification of backward rules.
//!
//! Always runs in `f64`. Per coordinate the step is `h * max(1, |x|)` and the
//! relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.

use crate::tape::{Buf, Result, Tape, Tensor};

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval(
    f: impl Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
    inputs: &[Buf<f64>],
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    tape.set_grad_enabled(false);
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|b| tape.leaf(b.shape.clone(), b.data.clone(), false))
        .collect::<Result<_>>()?;
    let y = f(&mut tape, &leaves)?;
    Ok(tape.item(y))
}

/// Compare analytic gradients of `f_analytic` against central differences of
/// `f_numeric` on every coordinate of every input.
///
/// Exposed with two function arguments so a deliberately broken pairing can be
/// used as a negative control; [`finite_diff_check`] passes the same function
/// twice.
pub fn finite_diff_compare(
    f_analytic: impl Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
    f_numeric: impl Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
    inputs: &[Buf<f64>],
    h: f64,
    tol: f64,
) -> Result<GradReport> {
    // analytic side
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|b| tape.leaf(b.shape.clone(), b.data.clone(), true))
        .collect::<Result<_>>()?;
    let y = f_analytic(&mut tape, &leaves)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&t| {
            tape.grad(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.val(t).numel()])
        })
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
        tol,
    };
    let mut work: Vec<Buf<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for ci in 0..input.data.len() {
            let x0 = input.data[ci];
            let step = h * x0.abs().max(1.0);
            work[ii].data[ci] = x0 + step;
            let fp = eval(&f_numeric, &work)?;
            work[ii].data[ci] = x0 - step;
            let fm = eval(&f_numeric, &work)?;
            work[ii].data[ci] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let err = rel_err(analytic[ii][ci], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ii, ci);
                report.worst_analytic = analytic[ii][ci];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Check the tape's backward pass for `f` against central differences on
/// every coordinate of every input.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor> + Copy,
    inputs: &[Buf<f64>],
    h: f64,
    tol: f64,
) -> Result<GradReport> {
    finite_diff_compare(f, f, inputs, h, tol)
}
