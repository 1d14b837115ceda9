use avm_autodiff::{Tape, Tensor, Var};

use crate::{CoreError, Result};

fn check(r: &[f64], o: &[f64]) -> Result<()> {
    if r.len() != o.len() {
        return Err(CoreError::Contract(format!(
            "poisson loss: {} responses vs {} predictions",
            r.len(),
            o.len()
        )));
    }
    if let Some(k) = o.iter().position(|&v| !(v > 0.0)) {
        return Err(CoreError::Contract(format!("poisson loss: prediction {k} is {} (must be positive)", o[k])));
    }
    Ok(())
}

/// `Σ (o − r·ln(o + eps))` over all elements.
pub fn poisson_loss(r: &Tensor, o: &Tensor, eps: f64) -> Result<f64> {
    if r.shape() != o.shape() {
        return Err(CoreError::Contract(format!(
            "poisson loss: shapes {:?} and {:?} differ",
            r.shape(),
            o.shape()
        )));
    }
    poisson_loss_slice(r.data(), o.data(), eps)
}

pub fn poisson_loss_slice(r: &[f64], o: &[f64], eps: f64) -> Result<f64> {
    check(r, o)?;
    Ok(r.iter().zip(o).map(|(&r, &o)| o - r * (o + eps).ln()).sum())
}

/// `∂/∂o = 1 − r/(o + eps)`.
pub fn poisson_loss_grad(r: &Tensor, o: &Tensor, eps: f64) -> Result<Vec<f64>> {
    poisson_loss(r, o, eps)?;
    Ok(r.data().iter().zip(o.data()).map(|(&r, &o)| 1.0 - r / (o + eps)).collect())
}

/// Differentiable loss of one prediction vector against fixed responses.
pub fn poisson_loss_var(tape: &mut Tape, o: Var, r: &[f64], eps: f64) -> Result<Var> {
    check(r, tape.value(o)?.data())?;
    let shape = tape.shape(o)?.to_vec();
    let r = tape.constant(Tensor::new(&shape, r.to_vec())?);
    let shifted = tape.add_scalar(o, eps)?;
    let log = tape.ln(shifted)?;
    let weighted = tape.mul(r, log)?;
    let diff = tape.sub(o, weighted)?;
    Ok(tape.sum_all(diff)?)
}
