// Reconstruction targets of every strategy for one image, written as PPMs.
// Usage: `recon_targets [out_dir]`.

use ftn::data::{generate, SyntheticSpec};
use ftn::image::{write_pgm, write_ppm};
use ftn::masks::{build_target, ReconStrategy};
use ftn::model::{FtnModel, ModelConfig};
use ftn::nn::Mode;
use ftn::Graph;

fn main() -> ftn::Result<()> {
    let out: std::path::PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("ftn-targets"));
    std::fs::create_dir_all(&out).map_err(|source| ftn::FtnError::Io { path: out.clone(), source })?;
    let data = generate(&SyntheticSpec { num_ids: 2, imgs_per_id: 2, ..Default::default() }, 5)?;
    let image = data.set.images.narrow_batch(0, 1)?;

    let (model, mut ps) = FtnModel::new::<f32>(ModelConfig { decoder_hidden: 8, ..Default::default() }, 0)?;
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let masks = model.forward_recon(&mut g, &mut ps, x, Mode::Eval, ReconStrategy::GmPamCam)?.masks;
    write_pgm(&out.join("gm.pgm"), &masks.gm)?;

    for s in ReconStrategy::ALL {
        let target = build_target(&image, s, &masks)?;
        let t = target.narrow_batch(0, 1)?.reshape(&image.shape()[1..])?;
        write_ppm(&out.join(format!("target_{}.ppm", s.letter())), &t)?;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        println!("({}) {s:?} mean intensity {mean:.3}", s.letter());
    }
    println!("written to {}", out.display());
    Ok(())
}
