use super::graph::{Backward, Graph, Var};
use super::{expect_rank, Real, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor.
pub const BN_EPS: f64 = 1e-5;

struct BatchNormOp<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    channels: usize,
    plane: usize,
}

impl<T: Real> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm2d"
    }

    fn backward(
        &self,
        ins: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (ins[0].data(), ins[1].data());
        let gd = g.data();
        let (c, plane) = (self.channels, self.plane);
        let batch = x.len() / (c * plane);
        let m = T::of((batch * plane) as f64);
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, inv) = (self.mean[ch], self.inv_std[ch]);
            let idx = |b: usize| (b * c + ch) * plane;
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for b in 0..batch {
                for i in idx(b)..idx(b) + plane {
                    sum_dy += gd[i];
                    sum_dy_xhat += gd[i] * (x[i] - mu) * inv;
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            if !needs[0] {
                continue;
            }
            let scale = gamma[ch] * inv;
            for b in 0..batch {
                for i in idx(b)..idx(b) + plane {
                    dx[i] = if self.batch_stats {
                        let xhat = (x[i] - mu) * inv;
                        scale / m * (m * gd[i] - sum_dy - xhat * sum_dy_xhat)
                    } else {
                        scale * gd[i]
                    };
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(ins[0].shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

impl<T: Real> Graph<T> {
    /// Per-channel batch normalization of `x: B×C×H×W`.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// running statistics are updated with momentum [`BN_MOMENTUM`] (the
    /// running variance uses the unbiased estimate). Otherwise the running
    /// statistics are used as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        training: bool,
        eps: f64,
    ) -> Result<Var> {
        expect_rank(self.value(x), 4, "batch_norm2d input")?;
        let s = self.shape(x).to_vec();
        let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
        for (what, shape) in [
            ("gamma", self.shape(gamma)),
            ("beta", self.shape(beta)),
            ("running mean", running_mean.shape()),
            ("running var", running_var.shape()),
        ] {
            if shape != [c] {
                return shape_err(format!("batch_norm2d {what} {shape:?}, expected [{c}]"));
            }
        }
        let count = batch * plane;
        if training && count < 2 {
            return arg_err(format!(
                "batch_norm2d in training mode needs B·H·W ≥ 2, got {count} for input {s:?}"
            ));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let eps_t = T::of(eps);
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let slices = (0..batch).map(|b| &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
            if training {
                let n = T::of(count as f64);
                let mu = slices.clone().flatten().copied().sum::<T>() / n;
                let var = slices.flatten().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + eps_t).sqrt();
                let mom = T::of(BN_MOMENTUM);
                let unbiased = var * n / T::of((count - 1) as f64);
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mu;
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
            } else {
                mean[ch] = running_mean.data()[ch];
                inv_std[ch] = T::one() / (running_var.data()[ch] + eps_t).sqrt();
            }
        }
        let mut out = vec![T::zero(); xd.len()];
        for (i, (o, &v)) in out.iter_mut().zip(xd).enumerate() {
            let ch = (i / plane) % c;
            *o = gd[ch] * (v - mean[ch]) * inv_std[ch] + bd[ch];
        }
        let op = BatchNormOp { mean, inv_std, batch_stats: training, channels: c, plane };
        self.record(op, vec![x, gamma, beta], Tensor::from_parts(s, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, training: bool, rm: &mut Tensor<f64>, rv: &mut Tensor<f64>) -> Result<Tensor<f64>> {
        let c = x.shape()[1];
        let mut g = Graph::new();
        let vx = g.constant(x);
        let gamma = g.constant(Tensor::full(&[c], 1.0));
        let beta = g.constant(Tensor::full(&[c], 0.25));
        let y = g.batch_norm2d(vx, gamma, beta, rm, rv, training, BN_EPS)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn training_output_is_standardized() {
        let x = Tensor::from_fn(&[3, 2, 2, 3], |i| ((i * 7919) % 23) as f64 * 0.3 - 2.0);
        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
        let y = run(x, true, &mut rm, &mut rv).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| (0..6).map(move |p| (b, p)))
                .map(|(b, p)| y.data()[(b * 2 + ch) * 6 + p] - 0.25)
                .collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
        assert!(rm.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[2, 1, 2, 2], 3.5);
        let (mut rm, mut rv) = (Tensor::zeros(&[1]), Tensor::full(&[1], 1.0));
        let y = run(x, true, &mut rm, &mut rv).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_value_per_channel_is_rejected_in_training() {
        let x = Tensor::full(&[1, 2, 1, 1], 1.0);
        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
        assert!(run(x.clone(), true, &mut rm, &mut rv).is_err());
        assert!(run(x, false, &mut rm, &mut rv).is_ok());
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let (mut rm, mut rv) = (Tensor::full(&[1], 1.0), Tensor::full(&[1], 4.0 - BN_EPS));
        let y = run(x, false, &mut rm, &mut rv).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 1.25).abs() < 1e-12);
        assert_eq!(rm.data(), &[1.0]);
    }
}
