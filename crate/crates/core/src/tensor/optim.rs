use super::param::{ParamId, ParamStore};
use super::Real;
use crate::error::{FtnError, Result};

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// Updates `ids` and clears their gradients. Every listed parameter must
    /// hold a gradient.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, ids: &[ParamId], lr: f64) -> Result<()> {
        if let Some(&missing) = ids.iter().find(|&&id| store.param(id).grad.is_none()) {
            return Err(FtnError::MissingGradient(store.param(missing).name.clone()));
        }
        for &id in ids {
            self.update(store, id, lr);
        }
        Ok(())
    }

    /// Updates exactly the parameters that currently hold a gradient and
    /// returns them.
    pub fn step_with_grads<T: Real>(&self, store: &mut ParamStore<T>, lr: f64) -> Vec<ParamId> {
        let ids = store.with_grads();
        for &id in &ids {
            self.update(store, id, lr);
        }
        ids
    }

    fn update<T: Real>(&self, store: &mut ParamStore<T>, id: ParamId, lr: f64) {
        let p = store.param_mut(id);
        let Some(grad) = p.grad.take() else { return };
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        let values = p.value.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            let m = b1 * p.adam.m[i] + (one - b1) * g;
            let v = b2 * p.adam.v[i] + (one - b2) * g * g;
            p.adam.m[i] = m;
            p.adam.v[i] = v;
            values[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn store_with(v: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("theta", Tensor::from_f64(&[v.len()], v).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_values_and_counts_step() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        s.param_mut(id).grad = Some(Tensor::zeros(&[2]));
        Adam::default().step(&mut s, &[id], 0.1).unwrap();
        assert_eq!(s.param(id).value.data(), &[1.0, -2.0]);
        assert_eq!(s.param(id).adam.step, 1);
        assert!(s.param(id).grad.is_none());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store_with(&[0.0, 0.0, 0.0]);
        s.param_mut(id).grad = Some(Tensor::from_f64(&[3], &[2.5, -0.01, 40.0]).unwrap());
        Adam::default().step(&mut s, &[id], 0.01).unwrap();
        for (v, sign) in s.param(id).value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 0.01).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, id) = store_with(&[1.0]);
        let err = Adam::default().step(&mut s, &[id], 0.1).unwrap_err();
        assert!(matches!(err, FtnError::MissingGradient(n) if n == "theta"));
    }

    #[test]
    fn fifty_steps_approach_the_minimum() {
        let (mut s, id) = store_with(&[0.0]);
        let adam = Adam::default();
        for _ in 0..50 {
            let mut g = Graph::new();
            let th = g.param(&s, id);
            let three = g.constant(Tensor::scalar(3.0));
            let d = g.sub(th, three).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq).unwrap();
            g.backward(loss).unwrap();
            s.absorb_grads(&g);
            adam.step(&mut s, &[id], 0.1).unwrap();
        }
        let theta = s.param(id).value.data()[0];
        assert!((theta - 3.0).abs() < 3.0);
        // scalar recurrence replayed by hand
        let (mut th, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (th - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            th -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((theta - th).abs() < 1e-12);
    }
}
