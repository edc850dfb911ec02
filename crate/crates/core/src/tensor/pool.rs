use super::graph::{Backward, Graph, Var};
use super::{expect_rank, Real, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Gradient routed to recorded source indices (max pooling of any kind).
struct ArgmaxOp {
    name: &'static str,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for ArgmaxOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        ins: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = vec![T::zero(); ins[0].numel()];
        for (&src, &d) in self.argmax.iter().zip(g.data()) {
            dx[src] += d;
        }
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), dx))])
    }
}

struct AvgPoolOp {
    plane: usize,
}

impl<T: Real> Backward<T> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(
        &self,
        ins: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let inv = T::one() / T::of(self.plane as f64);
        let mut dx = Vec::with_capacity(ins[0].numel());
        for &d in g.data() {
            dx.extend(std::iter::repeat_n(d * inv, self.plane));
        }
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), dx))])
    }
}

struct PixelShuffleOp {
    r: usize,
}

impl<T: Real> Backward<T> for PixelShuffleOp {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(pixel_unshuffle(g, self.r)?)])
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Inverse of [`Graph::pixel_shuffle`]: `B×c×(rH)×(rW)` → `B×(r²c)×H×W`.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    expect_rank(x, 4, "pixel_unshuffle")?;
    let (b, c, hh, ww) = dims4(x.shape());
    if r == 0 || hh % r != 0 || ww % r != 0 {
        return shape_err(format!("pixel_unshuffle: {:?} not divisible by r={r}", x.shape()));
    }
    let (h, w) = (hh / r, ww / r);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..hh {
                for xx in 0..ww {
                    let oc = ci * r * r + (y % r) * r + xx % r;
                    out[((bi * c * r * r + oc) * h + y / r) * w + xx / r] = xd[((bi * c + ci) * hh + y) * ww + xx];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c * r * r, h, w], out))
}

impl<T: Real> Graph<T> {
    /// Max over each group of `n` consecutive channels: `B×C×H×W` → `B×(C/n)×H×W`.
    /// Ties route the gradient to the first channel of the group.
    pub fn channel_max_pool(&mut self, x: Var, n: usize) -> Result<Var> {
        expect_rank(self.value(x), 4, "channel_max_pool")?;
        let (b, c, h, w) = dims4(self.shape(x));
        if n == 0 || c % n != 0 {
            return arg_err(format!("channel_max_pool: {c} channels not divisible by n={n}"));
        }
        let (d, plane) = (c / n, h * w);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * d * plane);
        let mut argmax = Vec::with_capacity(b * d * plane);
        for bi in 0..b {
            for di in 0..d {
                for p in 0..plane {
                    let mut best = ((bi * c + di * n) * plane) + p;
                    for k in 1..n {
                        let i = ((bi * c + di * n + k) * plane) + p;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, d, h, w], out);
        self.record(ArgmaxOp { name: "channel_max_pool", argmax }, vec![x], value)
    }

    /// Spatial mean: `B×C×H×W` → `B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        expect_rank(self.value(x), 4, "global_avg_pool")?;
        let (b, c, h, w) = dims4(self.shape(x));
        let plane = h * w;
        let n = T::of(plane as f64);
        let out = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() / n).collect();
        self.record(AvgPoolOp { plane }, vec![x], Tensor::from_parts(vec![b, c], out))
    }

    /// Spatial max: `B×C×H×W` → `B×C`; first index wins ties.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        expect_rank(self.value(x), 4, "global_max_pool")?;
        let (b, c, h, w) = dims4(self.shape(x));
        let plane = h * w;
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for (k, p) in self.value(x).data().chunks(plane).enumerate() {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate().skip(1) {
                if v > p[best] {
                    best = i;
                }
            }
            out.push(p[best]);
            argmax.push(k * plane + best);
        }
        let value = Tensor::from_parts(vec![b, c], out);
        self.record(ArgmaxOp { name: "global_max_pool", argmax }, vec![x], value)
    }

    /// Depth-to-space: `B×(r²c)×H×W` → `B×c×(rH)×(rW)` with
    /// `out[b, k, h·r+i, w·r+j] = in[b, k·r² + i·r + j, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        expect_rank(self.value(x), 4, "pixel_shuffle")?;
        let (b, cc, h, w) = dims4(self.shape(x));
        if r == 0 || cc % (r * r) != 0 {
            return arg_err(format!("pixel_shuffle: {cc} channels not divisible by r²={}", r * r));
        }
        let c = cc / (r * r);
        let (hh, ww) = (h * r, w * r);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..hh {
                    for xx in 0..ww {
                        let ic = ci * r * r + (y % r) * r + xx % r;
                        out[((bi * c + ci) * hh + y) * ww + xx] = xd[((bi * cc + ic) * h + y / r) * w + xx / r];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, hh, ww], out);
        self.record(PixelShuffleOp { r }, vec![x], value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_max_pool_constant_planes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 4, 3, 3], |i| if (i / 9) % 4 < 2 { 1.0 } else { 5.0 }));
        let y = g.channel_max_pool(x, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 3, 3]);
        let v = g.value(y);
        for b in 0..2 {
            assert!((0..9).all(|p| v.data()[b * 18 + p] == 1.0 && v.data()[b * 18 + 9 + p] == 5.0));
        }
        let same = g.channel_max_pool(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        assert!(g.channel_max_pool(x, 3).is_err());
    }

    #[test]
    fn channel_max_pool_ties_route_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 2, 1, 1], 2.0), true);
        let y = g.channel_max_pool(x, 2).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn global_pools_hand_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let a = g.global_avg_pool(x).unwrap();
        let m = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(a).data(), &[2.5]);
        assert_eq!(g.value(m).data(), &[4.0]);
        let c = g.constant(Tensor::full(&[2, 3, 2, 5], -1.5));
        let a = g.global_avg_pool(c).unwrap();
        let m = g.global_max_pool(c).unwrap();
        assert!(g.value(a).data().iter().chain(g.value(m).data()).all(|&v| v == -1.5));
    }

    #[test]
    fn pixel_shuffle_block_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let big = g.constant(Tensor::zeros(&[1, 256, 4, 4]));
        let y = g.pixel_shuffle(big, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 8, 8]);
        let same = g.pixel_shuffle(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let bad = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
        assert!(g.pixel_shuffle(bad, 2).is_err());
    }

    #[test]
    fn unshuffle_inverts_shuffle() {
        let t = Tensor::<f64>::from_fn(&[2, 12, 3, 2], |i| i as f64);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(pixel_unshuffle(g.value(y), 2).unwrap(), t);
    }
}
