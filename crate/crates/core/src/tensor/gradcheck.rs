//! Central-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation size, in `[1e-6, 1e-4]`.
    pub eps: f64,
    /// Check at most this many coordinates per parameter, chosen with `seed`.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords_per_param: None, seed: 0 }
    }
}

impl GradCheckConfig {
    pub fn sampled(max_coords: usize) -> Self {
        Self { max_coords_per_param: Some(max_coords), ..Self::default() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `|a − n| / max(|a|, |n|, 1e-8)`, worst over all checked coordinates.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares analytic gradients of `f` against central differences for every
/// parameter in `store` with `requires_grad` set.
///
/// `f` must rebuild its forward pass on the graph it is handed and return a
/// one-element output.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&cfg.eps) {
        return arg_err(format!("grad_check eps {} outside [1e-6, 1e-4]", cfg.eps));
    }
    let eval = |store: &mut ParamStore<f64>, f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        if g.value(out).numel() != 1 {
            return shape_err(format!("grad_check: f returned shape {:?}", g.shape(out)));
        }
        Ok(g.value(out).item())
    };

    store.zero_grads();
    let analytic = {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        if g.value(out).numel() != 1 {
            return shape_err(format!("grad_check: f returned shape {:?}", g.shape(out)));
        }
        g.backward(out)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (id, t) in g.param_grads() {
            grads[id.0] = Some(t.into_data());
        }
        grads
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.param(id).requires_grad).collect();
    for id in ids {
        let n = store.param(id).value.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (id.0 as u64).wrapping_mul(0x9e37_79b9));
                let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let original = store.param(id).value.data()[i];
            store.param_mut(id).value.data_mut()[i] = original + cfg.eps;
            let plus = eval(store, &mut f)?;
            store.param_mut(id).value.data_mut()[i] = original - cfg.eps;
            let minus = eval(store, &mut f)?;
            store.param_mut(id).value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.coords_checked == 1 {
                report.max_rel_err = rel;
                report.worst_param = store.param(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let id = s.add_param("theta", Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap()).unwrap();
        let r = grad_check(
            &mut s,
            |g, s| {
                let t = g.param(s, id);
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.coords_checked, 4);
        assert!(r.max_rel_err <= 1e-9, "{r:?}");
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut s = ParamStore::new();
        let a = s.add_param("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let b = s.add_param("b", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        s.set_requires_grad(b, false);
        let r = grad_check(
            &mut s,
            |g, s| {
                let (va, vb) = (g.param(s, a), g.param(s, b));
                let sa = g.sum(va)?;
                let sb = g.sum(vb)?;
                let p = g.mul(sa, sb)?;
                g.sum(p)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.coords_checked, 2);
        assert_eq!(r.worst_param, "a");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let mut s = ParamStore::new();
        let id = s.add_param("v", Tensor::zeros(&[3])).unwrap();
        let r = grad_check(&mut s, |g, s| Ok(g.param(s, id)), GradCheckConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let mut s = ParamStore::new();
        let id = s.add_param("v", Tensor::zeros(&[1])).unwrap();
        let cfg = GradCheckConfig { eps: 1e-2, ..Default::default() };
        assert!(grad_check(&mut s, |g, s| Ok(g.param(s, id)), cfg).is_err());
    }
}
