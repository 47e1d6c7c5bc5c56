use super::{DiffError, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, DiffError>,
{
    if let Some(coord) = point.data().iter().position(|x| !x.is_finite()) {
        return Err(DiffError::NonFinite { coord });
    }
    let eval = |p: &Tensor<f64>| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(DiffError::NonScalarRoot(tape.shape(y).to_vec()));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; point.numel()],
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut worst = (0.0f64, 0usize);
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(&plus)?, eval(&minus)?);
        if !fp.is_finite() || !fm.is_finite() || !analytic[i].is_finite() {
            return Err(DiffError::NonFinite { coord: i });
        }
        let fd = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_coord: worst.1,
        analytic,
        numeric,
    })
}
