//! Training objectives: identity cross-entropy, batch-hard triplet, the
//! texture gradient loss, L1 reconstruction, and their weighted total.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{expect_rank, Backward, Graph, Real, Tensor, Var};

/// Triplet margin `e`.
pub const TRIPLET_MARGIN: f64 = 0.3;

/// `(λ1, λ2, λ3, λ4)` for cross-entropy, triplet, gradient and L1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub triplet: f64,
    pub gradient: f64,
    pub l1: f64,
}

impl LossWeights {
    /// Weights for identity batches.
    pub const REID: Self = Self { ce: 1.0, triplet: 0.1, gradient: 0.0, l1: 0.0 };
    /// Weights for reconstruction batches.
    pub const RECON: Self = Self { ce: 0.0, triplet: 0.0, gradient: 1.0, l1: 1.0 };

    pub fn new(ce: f64, triplet: f64, gradient: f64, l1: f64) -> Result<Self> {
        let w = Self { ce, triplet, gradient, l1 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.ce, self.triplet, self.gradient, self.l1];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return arg_err(format!("loss weights must be finite and non-negative, got {all:?}"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.ce, self.triplet, self.gradient, self.l1]
    }
}

/// Individual loss values; `None` marks a term that was not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<V> {
    pub ce: Option<V>,
    pub triplet: Option<V>,
    pub gradient: Option<V>,
    pub l1: Option<V>,
}

impl<V: Copy> LossParts<V> {
    fn weighted(&self, w: &LossWeights) -> Result<Vec<(V, f64)>> {
        let pairs = [("ce", self.ce, w.ce), ("triplet", self.triplet, w.triplet), ("gradient", self.gradient, w.gradient), ("l1", self.l1, w.l1)];
        let mut out = Vec::new();
        for (name, part, weight) in pairs {
            match (part, weight) {
                (_, 0.0) => {}
                (Some(v), w) => out.push((v, w)),
                (None, w) => return arg_err(format!("loss term `{name}` has weight {w} but was not computed")),
            }
        }
        Ok(out)
    }
}

/// Weighted sum of scalar loss values. Terms with zero weight may be absent.
pub fn total_loss(parts: &LossParts<f64>, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(parts.weighted(w)?.iter().map(|(v, w)| v * w).sum())
}

/// Graph form of [`total_loss`].
pub fn total_loss_var<T: Real>(g: &mut Graph<T>, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let terms = parts.weighted(w)?;
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    g.weighted_sum(&terms)
}

// ---------------------------------------------------------------- cross-entropy

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Real> Backward<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let rows = self.labels.len();
        let scale = g.item() / T::of(rows as f64);
        let mut d = self.probs.clone();
        for (r, &l) in self.labels.iter().enumerate() {
            d[r * self.classes + l] -= T::one();
        }
        d.iter_mut().for_each(|v| *v *= scale);
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), d))])
    }
}

// ---------------------------------------------------------------- triplet

/// Per-anchor mining result: positive, negative, and whether the hinge is active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub positive_dist: f64,
    pub negative_dist: f64,
}

fn validate_identity_batch(ids: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in ids {
        *counts.entry(id).or_default() += 1;
    }
    if counts.len() < 2 {
        return arg_err(format!("triplet batch needs at least 2 identities, got {}", counts.len()));
    }
    if let Some((id, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return arg_err(format!("identity {id} has {n} instance(s); triplet mining needs at least 2"));
    }
    Ok(())
}

fn pairwise_distances<T: Real>(emb: &Tensor<T>) -> Vec<Vec<T>> {
    let (n, dim) = (emb.shape()[0], emb.shape()[1]);
    let e = emb.data();
    let mut d = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let sq: T = (0..dim).map(|k| (e[i * dim + k] - e[j * dim + k]).powi(2)).sum();
            d[i][j] = sq.sqrt();
            d[j][i] = d[i][j];
        }
    }
    d
}

/// Hardest positive (largest distance, first on ties) and hardest negative
/// (smallest distance, first on ties) for every anchor.
pub fn mine_hard_triplets<T: Real>(emb: &Tensor<T>, ids: &[usize]) -> Result<Vec<MinedTriplet>> {
    expect_rank(emb, 2, "hard_triplet embeddings")?;
    if emb.shape()[0] != ids.len() {
        return shape_err(format!("{} embeddings but {} labels", emb.shape()[0], ids.len()));
    }
    validate_identity_batch(ids)?;
    let d = pairwise_distances(emb);
    let n = ids.len();
    Ok((0..n)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if ids[j] == ids[a] {
                    if pos.is_none_or(|p| d[a][j] > d[a][p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| d[a][j] < d[a][q]) {
                    neg = Some(j);
                }
            }
            let (p, q) = (pos.expect("validated"), neg.expect("validated"));
            MinedTriplet { anchor: a, positive: p, negative: q, positive_dist: d[a][p].f64(), negative_dist: d[a][q].f64() }
        })
        .collect())
}

struct TripletOp {
    active: Vec<MinedTriplet>,
    anchors: usize,
}

impl<T: Real> Backward<T> for TripletOp {
    fn name(&self) -> &'static str {
        "hard_triplet"
    }

    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let dim = ins[0].shape()[1];
        let e = ins[0].data();
        let scale = g.item() / T::of(self.anchors as f64);
        let mut d = vec![T::zero(); e.len()];
        // ∂‖u−v‖/∂u = (u−v)/‖u−v‖, taken as 0 at coincident points
        let mut pull = |from: usize, to: usize, dist: f64, sign: T| {
            if dist == 0.0 {
                return;
            }
            let inv = sign * scale / T::of(dist);
            for k in 0..dim {
                let diff = e[from * dim + k] - e[to * dim + k];
                d[from * dim + k] += inv * diff;
                d[to * dim + k] -= inv * diff;
            }
        };
        for t in &self.active {
            pull(t.anchor, t.positive, t.positive_dist, T::one());
            pull(t.anchor, t.negative, t.negative_dist, -T::one());
        }
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), d))])
    }
}

// ---------------------------------------------------------------- image gradients

/// How color channels enter the gradient maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMapMode {
    /// Squared differences summed over the 3 channels: maps are `B×H×(W−1)` / `B×(H−1)×W`.
    #[default]
    ChannelSum,
    /// One map per channel: `B×3×H×(W−1)` / `B×3×(H−1)×W`.
    PerChannel,
}

/// Per-pixel squared horizontal and vertical differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMaps<T> {
    pub gh: Tensor<T>,
    pub gv: Tensor<T>,
}

fn image_dims<T: Real>(img: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    expect_rank(img, 4, what)?;
    let s = img.shape();
    if s[1] != 3 {
        return shape_err(format!("{what}: expected 3 color channels, got {s:?}"));
    }
    if s[2] < 2 || s[3] < 2 {
        return shape_err(format!("{what}: gradients need H, W ≥ 2, got {s:?}"));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

pub fn image_gradients<T: Real>(img: &Tensor<T>, mode: GradientMapMode) -> Result<GradientMaps<T>> {
    let (b, c, h, w) = image_dims(img, "image_gradients")?;
    let x = img.data();
    let px = |bi: usize, ci: usize, y: usize, xx: usize| x[((bi * c + ci) * h + y) * w + xx];
    let planes = if mode == GradientMapMode::PerChannel { c } else { 1 };
    let mut gh = vec![T::zero(); b * planes * h * (w - 1)];
    let mut gv = vec![T::zero(); b * planes * (h - 1) * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = if planes == 1 { 0 } else { ci };
            for y in 0..h {
                for xx in 0..w - 1 {
                    let diff = px(bi, ci, y, xx + 1) - px(bi, ci, y, xx);
                    gh[((bi * planes + plane) * h + y) * (w - 1) + xx] += diff * diff;
                }
            }
            for y in 0..h - 1 {
                for xx in 0..w {
                    let diff = px(bi, ci, y + 1, xx) - px(bi, ci, y, xx);
                    gv[((bi * planes + plane) * (h - 1) + y) * w + xx] += diff * diff;
                }
            }
        }
    }
    let (sh, sv) = if planes == 1 {
        (vec![b, h, w - 1], vec![b, h - 1, w])
    } else {
        (vec![b, c, h, w - 1], vec![b, c, h - 1, w])
    };
    Ok(GradientMaps { gh: Tensor::from_parts(sh, gh), gv: Tensor::from_parts(sv, gv) })
}

fn gradient_loss_value<T: Real>(recon: &GradientMaps<T>, target: &GradientMaps<T>, batch: usize) -> T {
    let mean_abs = |a: &Tensor<T>, b: &Tensor<T>| -> T {
        let per = a.numel() / batch;
        (0..batch)
            .map(|i| {
                let s: T = a.data()[i * per..(i + 1) * per]
                    .iter()
                    .zip(&b.data()[i * per..(i + 1) * per])
                    .map(|(&x, &y)| (x - y).abs())
                    .sum();
                s / T::of(per as f64)
            })
            .sum::<T>()
    };
    (mean_abs(&recon.gh, &target.gh) + mean_abs(&recon.gv, &target.gv)) / T::of(batch as f64)
}

/// `(1/b) Σ_b ( mean|Gʰ_r − Gʰ_g| + mean|Gᵛ_r − Gᵛ_g| )` on plain tensors.
pub fn gradient_loss_of<T: Real>(recon: &Tensor<T>, target: &Tensor<T>, mode: GradientMapMode) -> Result<T> {
    if recon.shape() != target.shape() {
        return shape_err(format!("gradient_loss: {:?} vs {:?}", recon.shape(), target.shape()));
    }
    let (r, t) = (image_gradients(recon, mode)?, image_gradients(target, mode)?);
    Ok(gradient_loss_value(&r, &t, recon.shape()[0]))
}

struct GradientLossOp<T> {
    target: GradientMaps<T>,
    mode: GradientMapMode,
}

impl<T: Real> Backward<T> for GradientLossOp<T> {
    fn name(&self) -> &'static str {
        "gradient_loss"
    }

    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let img = ins[0];
        let (b, c, h, w) = image_dims(img, "gradient_loss")?;
        let maps = image_gradients(img, self.mode)?;
        let x = img.data();
        let planes = if self.mode == GradientMapMode::PerChannel { c } else { 1 };
        let two = T::of(2.0);
        let sh = g.item() * two / T::of((b * planes * h * (w - 1)) as f64);
        let sv = g.item() * two / T::of((b * planes * (h - 1) * w) as f64);
        let sign = |v: T| if v > T::zero() { T::one() } else if v < T::zero() { -T::one() } else { T::zero() };
        let mut d = vec![T::zero(); x.len()];
        let at = |bi: usize, ci: usize, y: usize, xx: usize| ((bi * c + ci) * h + y) * w + xx;
        for bi in 0..b {
            for ci in 0..c {
                let plane = if planes == 1 { 0 } else { ci };
                for y in 0..h {
                    for xx in 0..w - 1 {
                        let m = ((bi * planes + plane) * h + y) * (w - 1) + xx;
                        let s = sign(maps.gh.data()[m] - self.target.gh.data()[m]) * sh;
                        let (hi, lo) = (at(bi, ci, y, xx + 1), at(bi, ci, y, xx));
                        let diff = x[hi] - x[lo];
                        d[hi] += s * diff;
                        d[lo] -= s * diff;
                    }
                }
                for y in 0..h - 1 {
                    for xx in 0..w {
                        let m = ((bi * planes + plane) * (h - 1) + y) * w + xx;
                        let s = sign(maps.gv.data()[m] - self.target.gv.data()[m]) * sv;
                        let (hi, lo) = (at(bi, ci, y + 1, xx), at(bi, ci, y, xx));
                        let diff = x[hi] - x[lo];
                        d[hi] += s * diff;
                        d[lo] -= s * diff;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(img.shape().to_vec(), d))])
    }
}

struct L1Op<T> {
    target: Tensor<T>,
}

impl<T: Real> Backward<T> for L1Op<T> {
    fn name(&self) -> &'static str {
        "l1_loss"
    }

    fn backward(&self, ins: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = g.item() / T::of(self.target.numel() as f64);
        let d = ins[0]
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&r, &t)| {
                let diff = r - t;
                if diff > T::zero() {
                    scale
                } else if diff < T::zero() {
                    -scale
                } else {
                    T::zero()
                }
            })
            .collect();
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), d))])
    }
}

/// Mean absolute elementwise difference on plain tensors.
pub fn l1_loss_of<T: Real>(recon: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if recon.shape() != target.shape() {
        return shape_err(format!("l1_loss: {:?} vs {:?}", recon.shape(), target.shape()));
    }
    let s: T = recon.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(s / T::of(recon.numel() as f64))
}

impl<T: Real> Graph<T> {
    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        expect_rank(self.value(logits), 2, "cross_entropy logits")?;
        let (rows, classes) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != rows {
            return shape_err(format!("cross_entropy: {rows} rows but {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return arg_err(format!("cross_entropy: label {bad} outside [0, {classes})"));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label];
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / T::of(rows as f64));
        self.record(CrossEntropyOp { probs, labels: labels.to_vec(), classes }, vec![logits], value)
    }

    /// Batch-hard triplet loss: mean over anchors of
    /// `max(0, margin + d(anchor, hardest positive) − d(anchor, hardest negative))`.
    pub fn hard_triplet(&mut self, embeddings: Var, ids: &[usize], margin: f64) -> Result<Var> {
        let mined = mine_hard_triplets(self.value(embeddings), ids)?;
        let anchors = mined.len();
        let mut total = 0.0;
        let mut active = Vec::new();
        for t in mined {
            let term = margin + t.positive_dist - t.negative_dist;
            if term > 0.0 {
                total += term;
                active.push(t);
            }
        }
        let value = Tensor::scalar(T::of(total / anchors as f64));
        self.record(TripletOp { active, anchors }, vec![embeddings], value)
    }

    /// Texture loss between a reconstruction and a fixed target image.
    pub fn gradient_loss(&mut self, recon: Var, target: &Tensor<T>, mode: GradientMapMode) -> Result<Var> {
        if self.shape(recon) != target.shape() {
            return shape_err(format!("gradient_loss: {:?} vs {:?}", self.shape(recon), target.shape()));
        }
        let batch = target.shape()[0];
        let r = image_gradients(self.value(recon), mode)?;
        let t = image_gradients(target, mode)?;
        let value = Tensor::scalar(gradient_loss_value(&r, &t, batch));
        self.record(GradientLossOp { target: t, mode }, vec![recon], value)
    }

    /// Mean absolute difference to a fixed target.
    pub fn l1_loss(&mut self, recon: Var, target: &Tensor<T>) -> Result<Var> {
        let value = Tensor::scalar(l1_loss_of(self.value(recon), target)?);
        self.record(L1Op { target: target.clone() }, vec![recon], value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: &[f64], rows: usize, labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[rows, logits.len() / rows], logits).unwrap());
        let l = g.cross_entropy(x, labels)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn cross_entropy_anchors() {
        assert!((ce(&[0.3; 5], 1, &[2]).unwrap() - 5f64.ln()).abs() < 1e-14);
        assert!(ce(&[100.0, 0.0, 0.0], 1, &[0]).unwrap() < 1e-40);
        assert!(ce(&[1.0, 2.0], 1, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
        let labels = [1, 4, 0, 3];
        let mut expected = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &logits[r * 5..r * 5 + 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[l].exp() / z).ln();
        }
        expected /= 4.0;
        assert!((ce(&logits, 4, &labels).unwrap() - expected).abs() < 1e-10);
    }

    fn triplet(values: &[f64], dim: usize, ids: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_f64(&[ids.len(), dim], values).unwrap());
        let l = g.hard_triplet(e, ids, TRIPLET_MARGIN)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn triplet_identical_embeddings_give_margin() {
        assert_eq!(triplet(&[0.5; 12], 3, &[0, 0, 1, 1]).unwrap(), TRIPLET_MARGIN);
    }

    #[test]
    fn triplet_separated_clusters_vanish() {
        assert_eq!(triplet(&[0.0, 0.1, 1.0, 1.2], 1, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(triplet(&[0.0, 0.2, 5.0, 5.1, 9.0, 9.2], 1, &[0, 0, 1, 1, 2, 2]).unwrap(), 0.0);
    }

    #[test]
    fn triplet_matches_pair_enumeration() {
        let v: [f64; 6] = [0.0, 0.5, 0.4, 1.0, 0.45, 2.0];
        let ids = [0, 0, 1, 1, 2, 2];
        let mut expected = 0.0;
        for a in 0..6 {
            let hp = (0..6).filter(|&j| j != a && ids[j] == ids[a]).map(|j| (v[a] - v[j]).abs()).fold(0.0, f64::max);
            let hn = (0..6).filter(|&j| ids[j] != ids[a]).map(|j| (v[a] - v[j]).abs()).fold(f64::INFINITY, f64::min);
            expected += (TRIPLET_MARGIN + hp - hn).max(0.0);
        }
        expected /= 6.0;
        assert!((triplet(&v, 1, &ids).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn triplet_rejects_bad_batches() {
        assert!(triplet(&[0.0, 1.0, 2.0], 1, &[0, 0, 1]).is_err());
        assert!(triplet(&[0.0, 1.0], 1, &[0, 0]).is_err());
    }

    #[test]
    fn gradient_maps_hand_value() {
        let img = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[0.0, 2.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        let maps = image_gradients(&img, GradientMapMode::ChannelSum);
        assert!(maps.is_err(), "H = 1 has no vertical gradient");
        let img = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| if i % 2 == 1 { 2.0 } else { 0.0 });
        let maps = image_gradients(&img, GradientMapMode::ChannelSum).unwrap();
        assert_eq!(maps.gh.data(), &[12.0, 12.0]);
        assert_eq!(maps.gv.data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_maps_match_loop_oracle() {
        let img = Tensor::<f64>::from_fn(&[1, 3, 3, 3], |i| ((i * 7 + 3) % 10) as f64 / 9.0);
        let maps = image_gradients(&img, GradientMapMode::ChannelSum).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                let mut s = 0.0;
                for c in 0..3 {
                    s += (img.at(&[0, c, y, x + 1]) - img.at(&[0, c, y, x])).powi(2);
                }
                assert_eq!(maps.gh.at(&[0, y, x]), s);
            }
        }
        for y in 0..2 {
            for x in 0..3 {
                let mut s = 0.0;
                for c in 0..3 {
                    s += (img.at(&[0, c, y + 1, x]) - img.at(&[0, c, y, x])).powi(2);
                }
                assert_eq!(maps.gv.at(&[0, y, x]), s);
            }
        }
        let per = image_gradients(&img, GradientMapMode::PerChannel).unwrap();
        assert_eq!(per.gh.shape(), &[1, 3, 3, 2]);
    }

    #[test]
    fn gradient_loss_hand_computation() {
        // recon: channel values [[0,1],[0,0]] on all channels; target all zero
        let recon = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| if i % 4 == 1 { 1.0 } else { 0.0 });
        let target = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        // gh rows: y0: 3·1² = 3, y1: 0 → mean 1.5; gv cols: x0: 0, x1: 3 → mean 1.5
        let v = gradient_loss_of(&recon, &target, GradientMapMode::ChannelSum).unwrap();
        assert!((v - 3.0).abs() < 1e-15);
        let both_const = gradient_loss_of(&Tensor::full(&[2, 3, 4, 4], 0.2), &Tensor::full(&[2, 3, 4, 4], 0.9), GradientMapMode::ChannelSum).unwrap();
        assert_eq!(both_const, 0.0);
    }

    #[test]
    fn l1_values() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1);
        assert_eq!(l1_loss_of(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((l1_loss_of(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!(l1_loss_of(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let reid = LossParts { ce: Some(2.0), triplet: Some(1.0), ..Default::default() };
        assert!((total_loss(&reid, &LossWeights::REID).unwrap() - 2.1).abs() < 1e-15);
        let recon = LossParts { gradient: Some(0.2), l1: Some(0.3), ..Default::default() };
        assert!((total_loss(&recon, &LossWeights::RECON).unwrap() - 0.5).abs() < 1e-15);
        let zero = LossWeights::new(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(total_loss(&LossParts::default(), &zero).unwrap(), 0.0);
        assert!(total_loss(&reid, &LossWeights::RECON).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.0, 0.0).is_err());
    }
}
