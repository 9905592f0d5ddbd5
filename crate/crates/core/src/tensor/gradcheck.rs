//! Finite-difference verification of the backward rules.
//!
//! The check compares the tape gradient against central differences
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` and is kept independent of the
//! backward pass it verifies: the numeric side only ever calls the forward
//! value path.

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub n_checked: usize,
    pub tol: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} at coord {} over {} coords (tol {:.1e})",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_index,
            self.n_checked,
            self.tol
        )
    }
}

/// Check every coordinate of `x`. `f` must build a scalar loss from the
/// given var on the given tape.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_sampled(f, x, h, tol, &coords)
}

/// Check only the listed coordinates of `x`. Used for parameter vectors too
/// large to sweep exhaustively.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::NonFinite {
            op: "grad_check",
            detail: format!("step h must be positive, got {h}"),
        });
    }

    // Analytic gradient through the tape.
    let mut tape = Tape::new();
    let var = tape.param(x);
    let loss = f(&mut tape, var)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NotScalar {
            op: "grad_check",
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    tape.backward(loss)?;
    let analytic = tape.grad_or_zeros(var);

    // Value-only evaluation used by the central differences.
    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let t_x = Tensor::from_vec(x.shape().to_vec(), data.to_vec())?;
        let v = t.input(&t_x);
        let l = f(&mut t, v)?;
        let out = t.value(l).item()?;
        if !out.is_finite() {
            return Err(TensorError::NonFinite {
                op: "grad_check",
                detail: format!("f evaluated to {out}"),
            });
        }
        Ok(out)
    };

    let mut perturbed = x.data().to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for &i in coords {
        let orig = perturbed[i];
        perturbed[i] = orig + h;
        let plus = eval(&perturbed)?;
        perturbed[i] = orig - h;
        let minus = eval(&perturbed)?;
        perturbed[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }

    Ok(GradCheckReport {
        pass: max_rel_err <= tol,
        max_rel_err,
        worst_index,
        n_checked: coords.len(),
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_vec(vec![1, 4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.matmul_nt(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn corrupted_backward_fails() {
        // Negative control: the analytic side sees sum(x^2) but every
        // perturbed numeric evaluation takes a rescaled branch, emulating a
        // wrong backward rule. The mismatch must be flagged.
        let x = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.matmul_nt(v, v)?;
                let base = tape.sum(sq)?;
                if tape.value(v).data()[0] != 1.0 {
                    return tape.scale(base, 1.5);
                }
                Ok(base)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass, "negative control should fail: {report}");
        assert!(report.max_rel_err > 1e-4);
    }

    #[test]
    fn rejects_nonpositive_h() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(|tape, v| tape.sum(v), &x, 0.0, 1e-6).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
