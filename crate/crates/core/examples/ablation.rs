// Short runs of several reconstruction strategies on disjoint train and
// test identities. Usage: `ablation [epochs] [seed]`.

use ftn::data::{generate, Dataset, Split, SyntheticSpec};
use ftn::eval::{evaluate, EvalOptions, Rows};
use ftn::masks::ReconStrategy;
use ftn::model::{train, FtnModel, TrainConfig};

fn main() -> ftn::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let data = generate(&SyntheticSpec { num_ids: 16, imgs_per_id: 8, split: Split::DisjointHalves, ..Default::default() }, 11)?;
    let ds = Dataset { rows: data.rows.clone(), all: data.set.clone() };
    let train_set = ds.train()?;
    let (qs, gs) = ds.query_gallery()?;

    let runs = [
        ("no decoder", ReconStrategy::PlainInput, false),
        ("(a)", ReconStrategy::NoCfaGmOnly, true),
        ("(d)", ReconStrategy::GmPam, true),
        ("(g)", ReconStrategy::GmPamCam, true),
    ];
    for (label, strategy, decoder) in runs {
        let mut cfg = TrainConfig::default();
        cfg.model.num_classes = train_set.class_labels().1;
        cfg.model.decoder_hidden = 16;
        cfg.model.use_cfa = strategy.uses_cfa();
        cfg.model.use_decoder = decoder;
        cfg.schedule.epochs = epochs;
        cfg.schedule.lr_milestones = vec![epochs * 2 / 3];
        let (model, mut ps) = FtnModel::new::<f32>(cfg.model.clone(), seed)?;
        train(&model, &mut ps, &train_set, &cfg, strategy, seed, |_| {})?;
        let qe = model.embed(&mut ps, &qs.images)?;
        let ge = model.embed(&mut ps, &gs.images)?;
        let r = evaluate(Rows { emb: &qe, ids: &qs.ids, cams: &qs.cams }, Rows { emb: &ge, ids: &gs.ids, cams: &gs.cams }, 5, EvalOptions::default())?;
        println!("{label:<11} Rank-1 {:.3}  mAP {:.3}", r.cmc1, r.map);
    }
    Ok(())
}
