//! CMC and mAP under the junk-filtering retrieval protocol.
//!
//! For each query the gallery is ranked by ascending Euclidean distance,
//! ties broken by gallery index. Gallery rows sharing both identity and
//! camera with the query are junk and removed before scoring. Queries left
//! without a correct match are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Embeddings (`N×d`) with identity and camera labels.
#[derive(Clone, Copy, Debug)]
pub struct Rows<'a, T> {
    pub emb: &'a Tensor<T>,
    pub ids: &'a [usize],
    pub cams: &'a [usize],
}

impl<T: Real> Rows<'_, T> {
    fn check(&self, what: &str) -> Result<(usize, usize)> {
        match *self.emb.shape() {
            [n, d] if n == self.ids.len() && n == self.cams.len() => Ok((n, d)),
            ref s => shape_err(format!("{what}: embeddings {s:?} with {} ids, {} cams", self.ids.len(), self.cams.len())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `cmc[r−1]`: fraction of valid queries matched within the top `r`.
    pub cmc: Vec<f64>,
    pub cmc1: f64,
    pub map: f64,
    pub num_valid_queries: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// L2-normalize embeddings before measuring distances.
    pub normalize: bool,
}

/// Relevance of the junk-filtered gallery ranking for each query.
pub fn ranked_relevance<T: Real>(query: Rows<'_, T>, gallery: Rows<'_, T>, opts: EvalOptions) -> Result<Vec<Vec<bool>>> {
    let (nq, d) = query.check("query")?;
    let (ng, dg) = gallery.check("gallery")?;
    if d != dg {
        return shape_err(format!("query width {d} vs gallery width {dg}"));
    }
    let rows = |t: &Tensor<T>, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut r: Vec<f64> = t.data()[i * d..(i + 1) * d].iter().map(|v| v.f64()).collect();
                if opts.normalize {
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    r.iter_mut().for_each(|v| *v /= norm);
                }
                r
            })
            .collect()
    };
    let (q, g) = (rows(query.emb, nq), rows(gallery.emb, ng));
    Ok(q.iter()
        .enumerate()
        .map(|(qi, qv)| {
            let mut order: Vec<(f64, usize)> = g.iter().enumerate().map(|(gi, gv)| (qv.iter().zip(gv).map(|(a, b)| (a - b) * (a - b)).sum(), gi)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order
                .into_iter()
                .filter(|&(_, gi)| !(gallery.ids[gi] == query.ids[qi] && gallery.cams[gi] == query.cams[qi]))
                .map(|(_, gi)| gallery.ids[gi] == query.ids[qi])
                .collect()
        })
        .collect())
}

/// Average of the precision at each correct position of the ranking.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Brute-force AP: for every relevant position, count the relevant items at
/// or above it from scratch.
pub fn ap_oracle(relevance: &[bool]) -> Result<f64> {
    let positions: Vec<usize> = (0..relevance.len()).filter(|&i| relevance[i]).collect();
    if positions.is_empty() {
        return arg_err("ap_oracle: ranking has no relevant item");
    }
    let total: f64 = positions.iter().map(|&p| relevance[..=p].iter().filter(|&&r| r).count() as f64 / (p + 1) as f64).sum();
    Ok(total / positions.len() as f64)
}

/// CMC over ranks `1..=max_rank` and mAP over the valid queries.
pub fn evaluate<T: Real>(query: Rows<'_, T>, gallery: Rows<'_, T>, max_rank: usize, opts: EvalOptions) -> Result<RetrievalResult> {
    evaluate_detailed(query, gallery, max_rank, opts).map(|(r, _)| r)
}

/// [`evaluate`] plus each query's AP (`None` for skipped queries).
pub fn evaluate_detailed<T: Real>(query: Rows<'_, T>, gallery: Rows<'_, T>, max_rank: usize, opts: EvalOptions) -> Result<(RetrievalResult, Vec<Option<f64>>)> {
    if max_rank == 0 {
        return arg_err("max_rank must be at least 1");
    }
    let rankings = ranked_relevance(query, gallery, opts)?;
    if rankings.iter().all(|r| r.is_empty()) {
        return arg_err("every query has an empty gallery after junk filtering");
    }
    let mut cmc = vec![0.0; max_rank];
    let (mut ap_sum, mut valid) = (0.0, 0usize);
    let per_query: Vec<Option<f64>> = rankings.iter().map(|r| average_precision(r)).collect();
    for (ranking, ap) in rankings.iter().zip(&per_query) {
        let Some(ap) = *ap else { continue };
        valid += 1;
        ap_sum += ap;
        let first = ranking.iter().position(|&r| r).expect("has a hit");
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    if valid == 0 {
        return arg_err("no query has a valid positive in the gallery");
    }
    cmc.iter_mut().for_each(|c| *c /= valid as f64);
    Ok((RetrievalResult { cmc1: cmc[0], cmc, map: ap_sum / valid as f64, num_valid_queries: valid }, per_query))
}
