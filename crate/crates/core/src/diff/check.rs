//! Central finite-difference gradient checker.

use super::{DualArray, Tape};
use crate::error::{Error, Result};

/// Finite-difference stencil used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central,
    /// Five-point central difference, `O(h^4)` truncation.
    CentralFourthOrder,
    /// Ridders' extrapolation of central differences, shrinking the step by
    /// 1.4 until its error estimate stops improving. Runs from `step` and
    /// six smaller starting steps (factors of sqrt(10)) and keeps the
    /// estimate with the smallest truncation-plus-roundoff estimate, so the
    /// step is chosen per coordinate without reference to the analytic value.
    Ridders,
}

/// Returns the estimate, its truncation-error estimate and the smallest step
/// it used.
fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, step: f64) -> Result<(f64, f64, f64)> {
    const SHRINK: f64 = 1.4;
    const DEPTH: usize = 10;
    const SAFE: f64 = 2.0;
    let mut table = [[0.0f64; DEPTH]; DEPTH];
    let mut h = step;
    table[0][0] = central(h)?;
    let mut best = table[0][0];
    let mut best_h = h;
    let mut err = f64::INFINITY;
    for i in 1..DEPTH {
        h /= SHRINK;
        table[0][i] = central(h)?;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
                best_h = h;
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok((best, err, best_h))
}

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// differences with the given `step`, returning the maximum over coordinates
/// of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &DualArray, step: f64) -> Result<f64>
where
    F: Fn(&DualArray) -> Result<DualArray>,
{
    grad_check_with(f, x, step, Stencil::Central)
}

pub fn grad_check_with<F>(f: F, x: &DualArray, step: f64, stencil: Stencil) -> Result<f64>
where
    F: Fn(&DualArray) -> Result<DualArray>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.detach());
    let y = f(&leaf)?;
    if y.len() != 1 {
        return Err(Error::NonScalarRoot(y.shape().to_vec()));
    }
    if !y.item().is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let analytic = if y.requires_grad() {
        tape.backward(&y)?.get(&leaf).to_vec()
    } else {
        vec![0.0; x.len()]
    };

    // roundoff level of f, amplified by 1/h in a central difference
    let noise = 16.0 * f64::EPSILON * y.item().abs().max(1.0);
    let shape = x.shape().to_vec();
    let base = x.to_vec();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut probe = base.clone();
        probe[i] += delta;
        let v = f(&DualArray::from_parts(shape.clone(), probe))?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { index: i })
        }
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let h = step;
        let numeric = match stencil {
            Stencil::Central => (eval(i, h)? - eval(i, -h)?) / (2.0 * h),
            Stencil::CentralFourthOrder => {
                (8.0 * (eval(i, h)? - eval(i, -h)?) - (eval(i, 2.0 * h)? - eval(i, -2.0 * h)?)) / (12.0 * h)
            }
            Stencil::Ridders => {
                let mut central = |h: f64| Ok((eval(i, h)? - eval(i, -h)?) / (2.0 * h));
                let mut best = (0.0, f64::INFINITY);
                for k in 0..7 {
                    let (d, trunc, h_min) = ridders(&mut central, h / 10f64.sqrt().powi(k))?;
                    let err = trunc + noise / h_min;
                    if err < best.1 {
                        best = (d, err);
                    }
                }
                best.0
            }
        };
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
