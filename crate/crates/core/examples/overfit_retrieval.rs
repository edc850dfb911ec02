// Trains on a small synthetic set and retrieves its own images.
// Usage: `overfit_retrieval [epochs] [seed]` (4 steps per epoch).

use ftn::data::{generate, SyntheticSpec};
use ftn::eval::{evaluate, EvalOptions, Rows};
use ftn::masks::{ReconStrategy, Spatialize};
use ftn::model::{train, FtnModel, TrainConfig};

fn main() -> ftn::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let data = generate(&SyntheticSpec::default(), 7)?;
    let set = &data.set;
    let mut cfg = TrainConfig::default();
    cfg.model.num_classes = set.class_labels().1;
    cfg.model.decoder_hidden = 16;
    cfg.model.spatialize = Spatialize::ChannelMax;
    cfg.schedule.epochs = epochs;
    cfg.schedule.lr_milestones = vec![epochs * 3 / 5, epochs * 9 / 10];

    let (model, mut ps) = FtnModel::new::<f32>(cfg.model.clone(), seed)?;
    train(&model, &mut ps, set, &cfg, ReconStrategy::GmPamCam, seed, |row| {
        if row.step % 30 == 0 {
            println!("step {:>4} phase {} loss {:.4} lr {:.1e}", row.step, row.phase, row.loss, row.lr);
        }
    })?;

    let (q, g) = set.query_gallery_split();
    let (qs, gs) = (set.select(&q)?, set.select(&g)?);
    let qe = model.embed(&mut ps, &qs.images)?;
    let ge = model.embed(&mut ps, &gs.images)?;
    let r = evaluate(Rows { emb: &qe, ids: &qs.ids, cams: &qs.cams }, Rows { emb: &ge, ids: &gs.ids, cams: &gs.cams }, 5, EvalOptions::default())?;
    println!("Rank-1 {:.3}  mAP {:.3}  cmc {:?}", r.cmc1, r.map, r.cmc);
    Ok(())
}
