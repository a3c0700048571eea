use super::tensor::{ParamId, ParamStore, Parameter};
use crate::error::{CsdmError, Result};

/// Adam with bias correction. Moments live on each [`Parameter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Updates every parameter in the store, then zeroes all gradients.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        let ids = store.ids();
        self.step_subset(store, &ids)
    }

    /// Updates only `ids`; gradients of the whole store are zeroed afterwards.
    pub fn step_subset(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if let Some(bad) = ids.iter().find(|&&id| !store.get(id).grad.all_finite()) {
            let name = store.get(*bad).name.clone();
            store.zero_grad();
            return Err(CsdmError::Training(format!(
                "non-finite gradient in parameter `{name}`"
            )));
        }
        for &id in ids {
            self.update(store.get_mut(id));
        }
        store.zero_grad();
        Ok(())
    }

    fn update(&self, p: &mut Parameter) {
        let Parameter {
            value,
            grad,
            m,
            v,
            step_count,
            ..
        } = p;
        *step_count += 1;
        let t = *step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let iter = value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((x, &g), (mi, vi)) in iter {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn zero_grad_is_stationary() {
        let (mut s, id) = scalar_store(0.7);
        Adam::new(0.1).step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        s.get_mut(id).grad = Tensor::scalar(1.0);
        Adam::new(0.001).step(&mut s).unwrap();
        let moved = 1.0 - s.value(id).item();
        assert!((moved - 0.001).abs() < 1e-8, "{moved}");
        assert_eq!(s.get(id).grad.item(), 0.0);
    }

    #[test]
    fn converges_on_square() {
        let (mut s, id) = scalar_store(1.0);
        let adam = Adam::new(0.1);
        for _ in 0..100 {
            let w = s.value(id).item();
            s.get_mut(id).grad = Tensor::scalar(2.0 * w);
            adam.step(&mut s).unwrap();
        }
        assert!(s.value(id).item().abs() < 0.1, "{}", s.value(id).item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        s.get_mut(id).grad = Tensor::scalar(f64::NAN);
        let err = Adam::new(0.1).step(&mut s).unwrap_err().to_string();
        assert!(err.contains("`w`"), "{err}");
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn zero_lr_leaves_values_bitwise() {
        let (mut s, id) = scalar_store(-0.123);
        s.get_mut(id).grad = Tensor::scalar(5.0);
        let before = s.to_bytes();
        Adam::new(0.0).step(&mut s).unwrap();
        assert_eq!(before, s.to_bytes());
        let _ = id;
    }
}
