//! Spectral normalization by power iteration.
//!
//! A weight is flattened to `[rows, cols]` (leading dimension times the
//! rest), its top singular value is estimated with a persisted left vector
//! `u`, and the weight is divided by the estimate. No gradient flows through
//! the estimate: it is a per-step constant.

use crate::kernels::dot;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Persisted power-iteration state for one weight.
#[derive(Debug, Clone)]
pub struct SpectralState<T> {
    /// Unit vector of length equal to the weight's leading dimension.
    pub u: Vec<T>,
}

impl<T: Scalar> SpectralState<T> {
    /// Seeded unit-norm start vector.
    pub fn init(rows: usize, rng: &mut SplitMix64) -> Self {
        let mut u: Vec<T> = (0..rows).map(|_| T::of_f64(rng.uniform(-1.0, 1.0))).collect();
        let n = norm(&u);
        if n == T::zero() {
            u = vec![T::one() / T::of_usize(rows).sqrt(); rows];
        } else {
            for v in u.iter_mut() {
                *v = *v / n;
            }
        }
        SpectralState { u }
    }
}

fn norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

/// Power-iteration estimate of the top singular value. Updates `state.u`
/// in place; `state.u` keeps unit norm.
pub fn spectral_sigma<T: Scalar>(weight: &Tensor<T>, state: &mut SpectralState<T>, iters: usize) -> TensorResult<T> {
    let rows = weight.shape()[0];
    let cols: usize = weight.shape()[1..].iter().product();
    assert_eq!(state.u.len(), rows, "spectral state does not match weight");
    let w = weight.data();
    let mut sigma = T::zero();
    let mut v = vec![T::zero(); cols];
    for _ in 0..iters.max(1) {
        // v = normalize(Wᵀ u)
        for x in v.iter_mut() {
            *x = T::zero();
        }
        for (r, &ur) in state.u.iter().enumerate() {
            crate::kernels::axpy(ur, &w[r * cols..(r + 1) * cols], &mut v);
        }
        let nv = norm(&v);
        if !(nv > T::zero()) || !nv.is_finite() {
            return Err(TensorError::ZeroSpectralNorm);
        }
        for x in v.iter_mut() {
            *x = *x / nv;
        }
        // u = normalize(W v); the norm is the sigma estimate.
        for (r, ur) in state.u.iter_mut().enumerate() {
            *ur = dot(&w[r * cols..(r + 1) * cols], &v);
        }
        sigma = norm(&state.u);
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(TensorError::ZeroSpectralNorm);
        }
        for ur in state.u.iter_mut() {
            *ur = *ur / sigma;
        }
    }
    Ok(sigma)
}

/// `weight / sigma_hat` with `sigma_hat` from [`spectral_sigma`].
pub fn spectral_normalize<T: Scalar>(weight: &Tensor<T>, state: &mut SpectralState<T>, iters: usize) -> TensorResult<Tensor<T>> {
    let sigma = spectral_sigma(weight, state, iters)?;
    let mut out = weight.clone();
    for v in out.data_mut() {
        *v = *v / sigma;
    }
    out.requires_grad = false;
    Ok(out)
}

/// Independent oracle: exhaustive power iteration from a fixed start until
/// convergence, used only by tests and the verification suite.
pub fn top_singular_value_oracle<T: Scalar>(weight: &Tensor<T>) -> T {
    let rows = weight.shape()[0];
    let cols: usize = weight.shape()[1..].iter().product();
    let w = weight.data();
    let mut u = vec![T::one() / T::of_usize(rows).sqrt(); rows];
    // Deterministic tie-break component so a start vector orthogonal to the
    // top singular vector cannot stall.
    for (i, x) in u.iter_mut().enumerate() {
        *x = *x + T::of_f64(1e-3 * ((i % 7) as f64 - 3.0));
    }
    let n = norm(&u);
    for x in u.iter_mut() {
        *x = *x / n;
    }
    let mut sigma = T::zero();
    for _ in 0..500 {
        let mut v = vec![T::zero(); cols];
        for (r, &ur) in u.iter().enumerate() {
            crate::kernels::axpy(ur, &w[r * cols..(r + 1) * cols], &mut v);
        }
        let nv = norm(&v);
        if nv == T::zero() {
            return T::zero();
        }
        for x in v.iter_mut() {
            *x = *x / nv;
        }
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = dot(&w[r * cols..(r + 1) * cols], &v);
        }
        let new_sigma = norm(&u);
        for ur in u.iter_mut() {
            *ur = *ur / new_sigma;
        }
        if (new_sigma - sigma).abs() < T::of_f64(1e-12) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}
