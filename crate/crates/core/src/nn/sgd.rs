use crate::error::{Error, Result};
use crate::nn::{ParameterSet, Scalar};

/// Plain SGD: `value -= lr * grad` for every parameter, then clears the grads.
pub fn sgd_step<T: Scalar>(params: &mut ParameterSet<T>, lr: T) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::validation(format!(
            "learning rate must be positive, got {lr:?}"
        )));
    }
    for p in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data_mut()) {
            *v = *v - lr * *g;
            *g = T::zero();
        }
    }
    Ok(())
}
