use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

use super::tape::{Tape, Var};

/// Registers `params` as leaves, evaluates `loss_fn` and returns the loss with
/// one gradient per parameter (zeros for parameters the loss ignores).
pub fn grad<F>(loss_fn: F, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let value = scalar(&tape, loss)?;
    let mut grads = tape.backward(loss)?;
    let g = vars.iter().map(|v| grads.take(*v)).collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let m = tape.value(v)?;
    ensure!(m.shape() == (1, 1), "loss must be a 1x1 value, got {:?}", m.shape());
    Ok(m.data()[0])
}

fn eval<F>(loss_fn: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    scalar(&tape, loss)
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares reverse-mode gradients entry by entry with the fourth-order
/// central difference `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Relative error is
/// `|a - n| / max(|a| + |n|, floor)` with `floor = max(1e-8, 1e-6 * max|a|)`: entries
/// six orders below the largest gradient sit at the rounding level of the difference quotient.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Matrix], step: f64, tolerance: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    ensure!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = grad(&loss_fn, params)?;
    let gmax = analytic
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-6 * gmax).max(1e-8);
    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst: Option<(usize, usize, f64, f64)> = None;
    let mut max_rel: f64 = 0.0;
    for p in 0..params.len() {
        let mut pmax: f64 = 0.0;
        for i in 0..params[p].data().len() {
            let orig = params[p].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work[p].data_mut()[i] = orig + offset;
                eval(&loss_fn, &work)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            work[p].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            if !numeric.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite finite difference for parameter {p} entry {i}"
                )));
            }
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            pmax = pmax.max(rel);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((p, i, a, numeric));
            }
        }
        per_param.push(pmax);
    }
    Ok(FdReport {
        per_param,
        max_rel_error: max_rel,
        worst,
        tolerance,
        pass: max_rel < tolerance,
    })
}
