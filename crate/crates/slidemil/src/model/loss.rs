//! Masked binary cross-entropy on raw logits.

use ndarray::Array1;

use super::ModelError;
use crate::numeric::Real;

/// Mean binary cross-entropy over the non-NA targets, plus its gradient
/// w.r.t. the logits.
///
/// Per target, the numerically stable form
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))` is used, which neither overflows
/// nor loses the loss to cancellation for large `|z|`. NA targets (label
/// `None`) contribute zero loss and zero gradient; the mean is taken over
/// the non-NA targets only. If every label is NA there is nothing to
/// compute and [`ModelError::MaskedOut`] is returned.
pub fn bce_with_logits<F: Real>(
    logits: &Array1<F>,
    labels: &[Option<u8>],
) -> Result<(F, Array1<F>), ModelError> {
    if logits.len() != labels.len() {
        return Err(ModelError::DimMismatch {
            context: "bce labels".into(),
            expected: logits.len(),
            found: labels.len(),
        });
    }
    let active = labels.iter().filter(|l| l.is_some()).count();
    if active == 0 {
        return Err(ModelError::MaskedOut);
    }
    let inv_active = F::one() / F::from_usize(active).unwrap();

    let mut loss = F::zero();
    let mut grad = Array1::zeros(logits.len());
    for (i, label) in labels.iter().enumerate() {
        let Some(y) = label else { continue };
        if *y > 1 {
            return Err(ModelError::InvalidLabel { value: *y });
        }
        let z = logits[i];
        if !z.is_finite() {
            return Err(ModelError::Numeric {
                context: "bce logits".into(),
            });
        }
        let yf = F::from_u8(*y).unwrap();
        loss += z.max(F::zero()) - z * yf + (-z.abs()).exp().ln_1p();
        grad[i] = (sigmoid(z) - yf) * inv_active;
    }
    loss *= inv_active;
    if !loss.is_finite() {
        return Err(ModelError::Numeric {
            context: "bce loss".into(),
        });
    }
    Ok((loss, grad))
}

/// Overflow-free logistic function.
pub(crate) fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
