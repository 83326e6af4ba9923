//! Elementwise nonlinearity and regularization ops.

use crate::error::{MdError, Result};
use crate::rng::CounterRng;
use crate::tensor::{Scalar, Tensor};

/// Rectified linear unit, elementwise `max(0, x)`.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max_val(S::ZERO))
}

/// Backward of [`relu`]: passes `dy` where the *input* was strictly
/// positive. The subgradient at exactly zero is taken as 0.
pub fn relu_backward<S: Scalar>(dy: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if dy.dims() != x.dims() {
        return Err(MdError::shape(
            "relu_backward",
            format!("cotangent {:?} vs input {:?}", dy.dims(), x.dims()),
        ));
    }
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > S::ZERO { g } else { S::ZERO })
        .collect();
    Tensor::new(x.dims(), data)
}

/// Inverted dropout. Each element is kept with probability `1 - p` and
/// scaled by `1/(1-p)` so eval needs no rescaling; eval mode simply skips
/// the call. Mask draws consume one uniform per element in flat index
/// order. `p == 0` is the identity and consumes no randomness. Returns the
/// output and the keep mask (1 = kept).
pub fn dropout_forward<S: Scalar>(
    x: &Tensor<S>,
    p: f64,
    rng: &mut CounterRng,
) -> Result<(Tensor<S>, Vec<u8>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(MdError::Config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok((x.clone(), vec![1; x.len()]));
    }
    let scale = S::from_f64(1.0 / (1.0 - p));
    let mut mask = vec![0u8; x.len()];
    let mut y = vec![S::ZERO; x.len()];
    for (i, &v) in x.data().iter().enumerate() {
        if rng.uniform() >= p {
            mask[i] = 1;
            y[i] = v * scale;
        }
    }
    Ok((Tensor::new(x.dims(), y)?, mask))
}

/// Backward of [`dropout_forward`] given the keep mask it returned.
pub fn dropout_backward<S: Scalar>(dy: &Tensor<S>, mask: &[u8], p: f64) -> Result<Tensor<S>> {
    if dy.len() != mask.len() {
        return Err(MdError::shape(
            "dropout_backward",
            format!("cotangent len {} vs mask len {}", dy.len(), mask.len()),
        ));
    }
    let scale = if p == 0.0 {
        S::ONE
    } else {
        S::from_f64(1.0 / (1.0 - p))
    };
    let data = dy
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m == 1 { g * scale } else { S::ZERO })
        .collect();
    Tensor::new(dy.dims(), data)
}
