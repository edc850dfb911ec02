// Saves a model, reloads it and checks the embeddings survive bit for bit.

use ftn::data::{generate, SyntheticSpec};
use ftn::model::{load_model, save_model, FtnModel, ModelConfig};

fn main() -> ftn::Result<()> {
    let data = generate(&SyntheticSpec { num_ids: 2, imgs_per_id: 2, ..Default::default() }, 0)?;
    let (model, mut ps) = FtnModel::new::<f32>(ModelConfig { decoder_hidden: 8, ..Default::default() }, 9)?;
    let path = std::env::temp_dir().join("ftn-example.ftn");
    save_model(&path, &model, &ps)?;
    let (loaded, mut ps2) = load_model::<f32>(&path)?;
    let a = model.embed(&mut ps, &data.set.images)?;
    let b = loaded.embed(&mut ps2, &data.set.images)?;
    println!("{} bytes, {} tensors", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), ps2.named_tensors().len());
    println!("embeddings {:?} identical: {}", a.shape(), a.data() == b.data());
    Ok(())
}
