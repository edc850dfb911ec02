// Finite-difference check of the attention module and the training losses.

use ftn::cfa::{Cfa, CfaConfig};
use ftn::losses::GradientMapMode;
use ftn::nn::{Builder, Mode};
use ftn::tensor::{grad_check, GradCheckConfig};
use ftn::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ftn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut ps = ParamStore::<f64>::new();
    let cfa = Cfa::new(&mut Builder::new(&mut ps, &mut rng), CfaConfig::new(8)?)?;
    // nonzero weights so the attention branches carry gradient
    ps.param_mut(cfa.gamma).value = Tensor::scalar(0.5);
    ps.param_mut(cfa.phi).value = Tensor::scalar(0.5);
    let x = Tensor::from_fn(&[2, 8, 3, 2], |_| rng.random_range(-1.0..1.0));
    // a random projection; a plain sum of squares would leave the output
    // batch-norm shift with a vanishing gradient
    let proj = Tensor::from_fn(&[2, 8, 3, 2], |_| rng.random_range(-1.0..1.0));
    let report = grad_check(
        &mut ps,
        |g, ps| {
            let xv = g.constant(x.clone());
            let out = cfa.forward(g, ps, xv, Mode::Train)?;
            let w = g.constant(proj.clone());
            let p = g.mul(out.attended, w)?;
            g.sum(p)
        },
        GradCheckConfig::default(),
    )?;
    println!("cfa            max rel err {:.2e} over {} coords", report.max_rel_err, report.coords_checked);

    let mut ps = ParamStore::<f64>::new();
    let recon = ps.add_param("recon", Tensor::from_fn(&[2, 3, 6, 4], |_| rng.random_range(0.0..1.0)))?;
    let emb = ps.add_param("emb", Tensor::from_fn(&[6, 4], |_| rng.random_range(-1.0..1.0)))?;
    let target = Tensor::from_fn(&[2, 3, 6, 4], |_| rng.random_range(0.0..1.0));
    let report = grad_check(
        &mut ps,
        |g, ps| {
            let (r, e) = (g.param(ps, recon), g.param(ps, emb));
            let grad = g.gradient_loss(r, &target, GradientMapMode::ChannelSum)?;
            let l1 = g.l1_loss(r, &target)?;
            let tri = g.hard_triplet(e, &[0, 0, 1, 1, 2, 2], 0.3)?;
            g.weighted_sum(&[(grad, 1.0), (l1, 1.0), (tri, 0.1)])
        },
        GradCheckConfig::default(),
    )?;
    println!("losses         max rel err {:.2e} (worst at {}[{}])", report.max_rel_err, report.worst_param, report.worst_index);
    Ok(())
}
