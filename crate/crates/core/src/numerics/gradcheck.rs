use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` records its computation on the tape it is handed, starting from the
/// leaf for `x`, and returns the scalar output node.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get_or_zeros(xv);

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(point)?;
        let o = f(&mut t, v)?;
        Ok(t.value(o).get(0, 0))
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Pushes entries with `|v| < margin` out to `±margin`, keeping finite
/// differences away from the relu kink at zero.
pub fn nudge_from_zero(x: &Tensor, margin: f64) -> Tensor {
    x.map(|v| {
        if v.abs() >= margin {
            v
        } else if v < 0.0 {
            -margin
        } else {
            margin
        }
    })
}
