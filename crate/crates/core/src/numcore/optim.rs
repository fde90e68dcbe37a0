use indexmap::IndexMap;

use super::tensor::{ParamSet, Scalar};
use crate::error::{Error, Result};

/// Adam moment buffers for the trainable entries of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    first_moment: IndexMap<String, Vec<T>>,
    second_moment: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for every parameter with `requires_grad`, default betas.
    pub fn new(params: &ParamSet<T>) -> Self {
        Self::with_hyper(params, T::of(0.9), T::of(0.999), T::of(1e-8))
    }

    pub fn with_hyper(params: &ParamSet<T>, beta1: T, beta2: T, epsilon: T) -> Self {
        let zeros: IndexMap<String, Vec<T>> = params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(k, t)| (k.to_string(), vec![T::zero(); t.len()]))
            .collect();
        AdamState {
            step_count: 0,
            beta1,
            beta2,
            epsilon,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.first_moment.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.second_moment.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every trainable parameter. Clears grads.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>, lr: T) -> Result<()> {
    for (name, t) in params.iter() {
        if !t.requires_grad {
            continue;
        }
        if t.grad().is_none() {
            return Err(Error::State(format!("parameter `{name}` has no gradient")));
        }
        match state.first_moment.get(name) {
            Some(m) if m.len() == t.len() => {}
            _ => {
                return Err(Error::State(format!(
                    "optimizer state does not match parameter `{name}`"
                )))
            }
        }
    }
    state.step_count += 1;
    let t_f = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = T::one() - b1.powi(t_f);
    let c2 = T::one() - b2.powi(t_f);
    for (name, t) in params.iter_mut() {
        if !t.requires_grad {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        let m = state.first_moment.get_mut(name).expect("checked above");
        let v = state.second_moment.get_mut(name).expect("checked above");
        for (((x, &g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
        t.clear_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn single(x: f64, g: Option<f64>) -> ParamSet<f64> {
        let mut t = Tensor::from_vec(&[1], vec![x]).unwrap().tracked();
        if let Some(g) = g {
            t.accumulate_grad(&[g]).unwrap();
        }
        let mut p = ParamSet::new();
        p.insert("x", t).unwrap();
        p
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = single(0.0, Some(2.0));
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, 0.01).unwrap();
        // m_hat = g, v_hat = g^2 on the first step
        let expected = -0.01 * 2.0 / (2.0f64.abs() + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
        assert!(p.get("x").unwrap().grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5, Some(0.0));
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, 0.01).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 1.5);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = single(0.0, Some(-3.0));
        let mut s = AdamState::new(&p);
        let mut prev = 0.0;
        for _ in 0..2 {
            adam_step(&mut p, &mut s, 0.01).unwrap();
            let x = p.get("x").unwrap().data()[0];
            assert!(x > prev);
            prev = x;
            p.get_mut("x").unwrap().accumulate_grad(&[-3.0]).unwrap();
        }
        assert!(s.second_moment("x").unwrap()[0] >= 0.0);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = single(0.0, None);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &mut s, 0.01).unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = single(0.0, Some(1.0));
        p.insert("frozen", Tensor::from_vec(&[1], vec![4.0]).unwrap()).unwrap();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, 0.01).unwrap();
        assert_eq!(p.get("frozen").unwrap().data()[0], 4.0);
        assert!(s.first_moment("frozen").is_none());
    }
}
