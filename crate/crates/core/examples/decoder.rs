// Fits the texture decoder to reproduce one masked image from fixed
// features, logging the two reconstruction losses.

use ftn::losses::GradientMapMode;
use ftn::nn::Builder;
use ftn::tensor::Adam;
use ftn::tfdec::{DecoderConfig, TfDec};
use ftn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ftn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::<f32>::new();
    let cfg = DecoderConfig { num_up_blocks: 3, ..DecoderConfig::new(16).with_hidden(8) };
    let dec = TfDec::new(&mut Builder::new(&mut ps, &mut rng), cfg)?;
    println!("upsamples ×{}, {} parameter tensors", dec.cfg.upsample_factor(), dec.params().len());

    let feat = Tensor::from_fn(&[1, 16, 4, 2], |_| rng.random_range(-1.0f32..1.0));
    // a vertical stripe pattern fading towards the borders
    let target = Tensor::from_fn(&[1, 3, 32, 16], |i| {
        let (y, x) = ((i / 16) % 32, i % 16);
        let fade = 1.0 - ((y as f32 - 15.5) / 16.0).powi(2);
        if x % 4 < 2 { 0.8 * fade } else { 0.2 * fade }
    });
    let adam = Adam::default();
    for step in 0..=60 {
        let mut g = Graph::new();
        let x = g.constant(feat.clone());
        let y = dec.forward(&mut g, &ps, x)?;
        let grad = g.gradient_loss(y, &target, GradientMapMode::ChannelSum)?;
        let l1 = g.l1_loss(y, &target)?;
        let loss = g.weighted_sum(&[(grad, 1.0), (l1, 1.0)])?;
        if step % 15 == 0 {
            println!("step {step:>2}: gradient {:.4} l1 {:.4}", g.value(grad).item(), g.value(l1).item());
        }
        g.backward(loss)?;
        ps.zero_grads();
        ps.absorb_grads(&g);
        adam.step_with_grads(&mut ps, 2e-3);
    }
    Ok(())
}
