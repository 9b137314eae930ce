//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
}

impl<F: Real> OptimizerState<F> {
    /// Zeroed moments shaped like `store`, with the usual AdamW defaults.
    pub fn new(store: &ParamStore<F>, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<F>> = store.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            learning_rate,
        }
    }

    fn check_shapes(&self, store: &ParamStore<F>) -> Result<()> {
        if self.first_moment.len() != store.len() || self.second_moment.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                name: "optimizer state".into(),
                expected: vec![store.len()],
                actual: vec![self.first_moment.len()],
            });
        }
        for ((_, p), (m, v)) in store.iter().zip(self.first_moment.iter().zip(&self.second_moment)) {
            if m.len() != p.numel() || v.len() != p.numel() || p.grad.len() != p.numel() {
                return Err(TensorError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    actual: vec![m.len()],
                });
            }
        }
        Ok(())
    }
}

/// One AdamW update of every parameter in `store` from its stored gradient,
/// using `state.learning_rate`.
pub fn adamw_step<F: Real>(store: &mut ParamStore<F>, state: &mut OptimizerState<F>) -> Result<()> {
    state.check_shapes(store)?;
    state.step += 1;
    let t = state.step as f64;
    let lr = state.learning_rate;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let decay = F::lit(1.0 - lr * state.weight_decay);
    let (b1f, b2f) = (F::lit(b1), F::lit(b2));
    let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
    let step_size = F::lit(lr / bc1);
    let inv_bc2_sqrt = F::lit(1.0 / bc2.sqrt());
    let eps = F::lit(state.eps);
    for (p, (m, v)) in store.iter_mut().zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut())) {
        for (((x, &g), mi), vi) in p.data.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1f * *mi + one_b1 * g;
            *vi = b2f * *vi + one_b2 * g * g;
            let denom = vi.sqrt() * inv_bc2_sqrt + eps;
            *x = *x * decay - step_size * *mi / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", &[values.len()], values.to_vec()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.5, -2.0, 3.0]);
        s.iter_mut().for_each(|p| p.grad.fill(1.0));
        let mut st = OptimizerState::new(&s, 1e-3);
        st.weight_decay = 0.0;
        adamw_step(&mut s, &mut st).unwrap();
        let p = s.by_name("w").unwrap();
        for (after, before) in p.data.iter().zip([0.5, -2.0, 3.0]) {
            assert!((after - before + 1e-3).abs() < 1e-9);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = store(&[1.0, -4.0]);
        let mut st = OptimizerState::new(&s, 1e-3);
        st.weight_decay = 0.1;
        adamw_step(&mut s, &mut st).unwrap();
        let p = s.by_name("w").unwrap();
        assert!((p.data[0] - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((p.data[1] + 4.0 * (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut s = store(&[1.0, 2.0]);
        s.iter_mut().for_each(|p| p.grad.fill(0.7));
        let before = s.clone();
        let mut st = OptimizerState::new(&s, 0.0);
        adamw_step(&mut s, &mut st).unwrap();
        assert_eq!(s.by_name("w").unwrap().data, before.by_name("w").unwrap().data);
    }

    #[test]
    fn descends_a_parabola() {
        let mut s = store(&[1.0]);
        let mut st = OptimizerState::new(&s, 1e-2);
        for _ in 0..100 {
            s.iter_mut().for_each(|p| p.grad[0] = 2.0 * p.data[0]);
            adamw_step(&mut s, &mut st).unwrap();
        }
        assert!(s.by_name("w").unwrap().data[0].abs() < 0.5);
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut s = store(&[1.0, 2.0]);
        let mut st = OptimizerState::new(&store(&[1.0]), 1e-3);
        assert!(adamw_step(&mut s, &mut st).is_err());
        assert_eq!(st.step, 0);
    }
}
