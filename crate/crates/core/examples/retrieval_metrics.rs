// CMC and mAP on a hand-built query/gallery set, with and without
// embedding normalization.

use ftn::eval::{evaluate_detailed, EvalOptions, Rows};
use ftn::Tensor;

fn main() -> ftn::Result<()> {
    let query = Tensor::new(&[3, 2], vec![0.0, 0.0, 4.0, 0.0, 0.0, 4.0])?;
    let gallery = Tensor::new(&[7, 2], vec![0.2, 0.1, 3.0, 0.5, 0.1, 3.9, 8.0, 0.4, 0.5, 0.5, 5.0, 5.0, 0.0, 0.1])?;
    let q = Rows { emb: &query, ids: &[0, 1, 2], cams: &[0, 0, 0] };
    // the last gallery row shares identity and camera with query 0: junk
    let g = Rows { emb: &gallery, ids: &[0, 1, 2, 1, 2, 0, 0], cams: &[1, 1, 1, 2, 2, 2, 0] };
    for normalize in [false, true] {
        let (r, aps) = evaluate_detailed(q, g, 5, EvalOptions { normalize })?;
        println!("normalize {normalize}: cmc {:?} map {:.4} over {} queries", r.cmc, r.map, r.num_valid_queries);
        println!("  per-query AP {aps:.3?}");
    }
    Ok(())
}
