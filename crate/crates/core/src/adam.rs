//! Adam with bias correction, keyed by parameter name.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};
use std::collections::BTreeMap;

/// Named parameter store with deterministic iteration order.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;
/// Named gradient buffers aligned with a [`ParamMap`].
pub type GradMap<T> = BTreeMap<String, Vec<T>>;

/// Adam hyperparameters; defaults are the reference values with the
/// training protocol's constant learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment buffers plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One Adam update over every parameter that received a gradient.
/// Rejects NaN gradients before touching any state.
pub fn adam_step<T: Scalar>(
    params: &mut ParamMap<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    hp: &AdamParams,
) -> TensorResult<()> {
    for (name, g) in grads {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NanGradient(name.clone()));
        }
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::InvalidArg { op: "adam_step", msg: format!("unknown parameter {name}") })?;
        if p.len() != g.len() {
            return Err(TensorError::ShapeMismatch { op: "adam_step", lhs: p.shape().to_vec(), rhs: vec![g.len()] });
        }
    }
    state.step += 1;
    let t = state.step;
    let lr = T::of_f64(hp.lr);
    let b1 = T::of_f64(hp.beta1);
    let b2 = T::of_f64(hp.beta2);
    let eps = T::of_f64(hp.eps);
    let bc1 = T::one() - b1.powi(t as i32);
    let bc2 = T::one() - b2.powi(t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let pd = p.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let hp = AdamParams::default();
        assert_eq!(hp.lr, 0.001);
        assert_eq!(hp.beta1, 0.9);
        assert_eq!(hp.beta2, 0.999);
        assert_eq!(hp.eps, 1e-8);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut params: ParamMap<f64> = ParamMap::new();
        params.insert("x".into(), Tensor::scalar(1.0));
        let mut grads: GradMap<f64> = GradMap::new();
        grads.insert("x".into(), vec![0.37]);
        let mut st = AdamState::new();
        adam_step(&mut params, &grads, &mut st, &AdamParams::default()).unwrap();
        let delta = 1.0 - params["x"].item();
        assert!((delta - 0.001).abs() < 1e-7, "delta {delta}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn ten_steps_match_reference_formula() {
        // Straight-line reference: minimize f(x) = x^2 from x = 1.
        let (lr, b1, b2, eps) = (0.001f64, 0.9, 0.999, 1e-8);
        let mut xr = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * xr;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            xr -= lr * mh / (vh.sqrt() + eps);
            reference.push(xr);
        }

        let mut params: ParamMap<f64> = ParamMap::new();
        params.insert("x".into(), Tensor::scalar(1.0));
        let mut st = AdamState::new();
        for t in 0..10 {
            let g = 2.0 * params["x"].item();
            let mut grads = GradMap::new();
            grads.insert("x".to_string(), vec![g]);
            adam_step(&mut params, &grads, &mut st, &AdamParams::default()).unwrap();
            assert!(
                (params["x"].item() - reference[t]).abs() < 1e-12,
                "step {t}: {} vs {}",
                params["x"].item(),
                reference[t]
            );
        }
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut params: ParamMap<f64> = ParamMap::new();
        params.insert("x".into(), Tensor::scalar(1.0));
        let mut grads = GradMap::new();
        grads.insert("x".to_string(), vec![f64::NAN]);
        let mut st = AdamState::new();
        let err = adam_step(&mut params, &grads, &mut st, &AdamParams::default());
        assert!(matches!(err, Err(TensorError::NanGradient(_))));
        assert_eq!(params["x"].item(), 1.0);
        assert_eq!(st.step, 0);
    }
}
