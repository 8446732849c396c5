use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Checks every coordinate of `x`. See [`finite_diff_check_with`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, eps, None)
}

/// Max over the chosen coordinates of
/// `|analytic − central| / max(|analytic|, |central|, 1e-8)`, where the central
/// difference at coordinate `i` uses step `eps·max(1, |x_i|)` evaluated in
/// `x`'s precision.
pub fn finite_diff_check_with<F>(f: F, x: &Tensor, eps: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check", "eps must be > 0"));
    }
    if !x.is_finite() {
        return Err(Error::invalid("finite_diff_check", "x must be finite"));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::invalid("finite_diff_check", "f must return a scalar"))
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let base = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::invalid("finite_diff_check", "f must return a scalar"))?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(Tensor::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let again = eval(x)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("f is not deterministic: {base} then {again}"),
        ));
    }

    let p = x.precision();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
    };
    let mut buf = x.to_vec();
    for &i in coords {
        let xi = x.data()[i];
        let h = eps * xi.abs().max(1.0);
        let (hi, lo) = (p.round(xi + h), p.round(xi - h));
        buf[i] = hi;
        let fp = eval(&Tensor::from_raw(x.shape().to_vec(), buf.clone(), p))?;
        buf[i] = lo;
        let fm = eval(&Tensor::from_raw(x.shape().to_vec(), buf.clone(), p))?;
        buf[i] = xi;
        let numeric = (fp - fm) / (hi - lo);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if err > result.max_rel_error || (i == coords[0] && err == 0.0) {
            result.max_rel_error = err;
            result.worst_index = i;
            result.analytic = a;
            result.numeric = numeric;
        }
    }
    Ok(result)
}
