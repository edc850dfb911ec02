// One CFA forward pass: attention maps, affinities and the masks derived
// from them.

use ftn::cfa::{Cfa, CfaConfig};
use ftn::masks::{attention_to_mask, Spatialize};
use ftn::nn::{Builder, Mode};
use ftn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ftn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::<f32>::new();
    let cfa = Cfa::new(&mut Builder::new(&mut ps, &mut rng), CfaConfig::new(32)?)?;
    ps.param_mut(cfa.gamma).value = Tensor::scalar(0.3);
    ps.param_mut(cfa.phi).value = Tensor::scalar(0.3);

    // a bright blob in the middle of an otherwise noisy map
    let (h, w) = (8, 4);
    let feat = Tensor::from_fn(&[2, 32, h, w], |i| {
        let p = i % (h * w);
        let (y, x) = (p / w, p % w);
        let blob = if (3..5).contains(&y) && (1..3).contains(&x) { 2.0 } else { 0.0 };
        blob + rng.random_range(-0.3..0.3)
    });
    let mut g = Graph::new();
    let x = g.constant(feat);
    let out = cfa.forward(&mut g, &mut ps, x, Mode::Train)?;
    println!("attended {:?}", g.shape(out.attended));
    println!("channel affinity {:?}, position affinity {:?}", g.shape(out.channel_affinity), g.shape(out.position_affinity));

    // weights are untrained, so nothing ties the masks to the blob yet
    for (name, var) in [("PAm", out.pa_map), ("CAm", out.ca_map)] {
        for how in [Spatialize::ChannelMean, Spatialize::ChannelMax] {
            let mask = attention_to_mask(g.value(var), 32, 16, how)?;
            let (lo, hi) = mask.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            println!("{name} {how:?}: {:?} in [{lo:.3}, {hi:.3}], centre {:.3}", mask.shape(), mask.data()[16 * 16 + 8]);
        }
    }
    Ok(())
}
