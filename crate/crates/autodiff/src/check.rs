//! Central-difference gradient auditor.

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max_k |ad - fd| / max(1, |ad|, |fd|)`.
    pub max_rel_error: f64,
    /// Distance of the unperturbed forward pass from the nearest kink.
    pub min_kink_distance: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences at
/// `points`, perturbing every coordinate of every input in turn.
///
/// `f` receives fresh parameter leaves (one per entry of `points`) and must
/// return a `1 x 1` node. It is called `1 + 2 * coordinates` times.
pub fn finite_difference_report<F, E>(f: F, points: &[Tensor], eps: f64) -> Result<FdReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let min_kink_distance = tape.min_kink_distance();

    let eval = |pts: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vars)?;
        let v = t.value(out);
        v.item().ok_or_else(|| {
            AutodiffError::NonScalarLoss {
                rows: v.rows(),
                cols: v.cols(),
            }
            .into()
        })
    };

    let mut worst = 0.0_f64;
    let mut coordinates = 0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (p, ad) in analytic.iter().enumerate() {
        for k in 0..points[p].len() {
            let x0 = points[p].data()[k];
            work[p].data_mut()[k] = x0 + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = x0 - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = x0;

            let fd = (plus - minus) / (2.0 * eps);
            let a = ad.data()[k];
            let err = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f64::INFINITY } else { err };
            }
            coordinates += 1;
        }
    }
    Ok(FdReport {
        max_rel_error: worst,
        min_kink_distance,
        coordinates,
    })
}

/// Maximum relative gradient error of `f` at `points`; see
/// [`finite_difference_report`].
pub fn finite_difference_check<F, E>(f: F, points: &[Tensor], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    finite_difference_report(f, points, eps).map(|r| r.max_rel_error)
}
