use super::{ParamStore, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            param: name.to_string(),
        });
    }
    state.t += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let one = T::one();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        Adam {
            config,
            states: store
                .iter()
                .map(|p| AdamState::new(p.value.shape()))
                .collect(),
        }
    }

    /// Applies one update from the accumulated gradients. Every gradient
    /// is checked before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(bad) = store
            .iter()
            .find(|p| p.requires_grad && !p.grad.all_finite())
        {
            return Err(Error::NonFinite {
                param: bad.name.clone(),
            });
        }
        for (p, st) in store.iter_mut().zip(&mut self.states) {
            if p.requires_grad {
                adam_step(&p.name, &mut p.value, &p.grad, st, &self.config)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(g: f64, st: &mut AdamState<f64>, p: &mut Tensor<f64>) -> f64 {
        let before = p.data()[0];
        let grad = Tensor::full(&[1], g);
        adam_step("w", p, &grad, st, &AdamConfig::default()).unwrap();
        p.data()[0] - before
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::full(&[1], 0.5);
        let mut st = AdamState::new(&[1]);
        let d = step_once(1.0, &mut st, &mut p);
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((d + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.25]).unwrap();
        let orig = p.clone();
        let mut st = AdamState::new(&[3]);
        adam_step(
            "w",
            &mut p,
            &Tensor::zeros(&[3]),
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn bias_correction_does_not_grow_constant_gradient_steps() {
        let mut p = Tensor::full(&[1], 0.0);
        let mut st = AdamState::new(&[1]);
        let d1 = step_once(0.3, &mut st, &mut p);
        let d2 = step_once(0.3, &mut st, &mut p);
        assert!(d2.abs() <= d1.abs() * (1.0 + 1e-6));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::full(&[2], 0.0);
        let mut st = AdamState::new(&[2]);
        let g = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        match adam_step("readout.W_out", &mut p, &g, &mut st, &AdamConfig::default()) {
            Err(Error::NonFinite { param }) => assert_eq!(param, "readout.W_out"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
