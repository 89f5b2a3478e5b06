use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Cross-prediction loss with a consistency term:
/// `(MAE(o1, y2) + MAE(o2, y1) + lambda_c * MAE(o1, o2)) / (2 + lambda_c)`.
pub fn ha2ha_loss(tape: &mut Tape, o1: Var, o2: Var, y1: Var, y2: Var, lambda_c: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda_c) {
        return Err(Error::InvalidConfig(format!("lambda_c {lambda_c} outside [0, 1]")));
    }
    let a = tape.mae(o1, y2)?;
    let b = tape.mae(o2, y1)?;
    let cross = tape.add(a, b)?;
    let sum = if lambda_c > 0.0 {
        let c = tape.mae(o1, o2)?;
        let c = tape.scale(c, lambda_c);
        tape.add(cross, c)?
    } else {
        cross
    };
    Ok(tape.scale(sum, 1.0 / (2.0 + lambda_c)))
}

/// Adds `lambda_1 * sum |theta|` over convolution weights and biases.
pub fn total_loss(tape: &mut Tape, store: &ParamStore, ha2ha: Var, lambda_1: f64) -> Result<Var> {
    if !(lambda_1.is_finite() && lambda_1 >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda_1 {lambda_1} must be >= 0")));
    }
    if lambda_1 == 0.0 {
        return Ok(ha2ha);
    }
    let mut reg: Option<Var> = None;
    for id in store.ids().filter(|&id| store.get(id).kind.regularized()) {
        let p = tape.param(store, id);
        let s = tape.abs_sum(p);
        reg = Some(match reg {
            Some(r) => tape.add(r, s)?,
            None => s,
        });
    }
    match reg {
        Some(r) => {
            let r = tape.scale(r, lambda_1);
            tape.add(ha2ha, r)
        }
        None => Ok(ha2ha),
    }
}
