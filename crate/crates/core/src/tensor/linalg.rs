use super::graph::{Backward, Graph, Var};
use super::{expect_rank, Real, Tensor};
use crate::error::{shape_err, Result};

/// `c = op(a) · op(b)` (or `c += …` when `accumulate`), all row-major.
///
/// `op(a)` is `m×k`; with `ta` the buffer `a` holds the `k×m` matrix.
/// `op(b)` is `k×n`; with `tb` the buffer `b` holds the `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major regions whose lengths were asserted.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct BmmOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

impl<T: Real> Backward<T> for BmmOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        ins: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let &BmmOp { batch, m, k, n, ta, tb } = self;
        let (a, b) = (ins[0].data(), ins[1].data());
        let gd = g.data();
        let ga = needs[0].then(|| {
            let mut out = vec![T::zero(); a.len()];
            for i in 0..batch {
                let (ab, bb, gb) = (&b[i * k * n..], &gd[i * m * n..], &mut out[i * m * k..]);
                if ta {
                    // dA = op(B) · dCᵀ, shape k×m
                    gemm(tb, true, k, m, n, ab, bb, gb, false);
                } else {
                    // dA = dC · op(B)ᵀ, shape m×k
                    gemm(false, !tb, m, k, n, bb, ab, gb, false);
                }
            }
            Tensor::from_parts(ins[0].shape().to_vec(), out)
        });
        let gb = needs[1].then(|| {
            let mut out = vec![T::zero(); b.len()];
            for i in 0..batch {
                let (aa, gg, ob) = (&a[i * m * k..], &gd[i * m * n..], &mut out[i * k * n..]);
                if tb {
                    // dB = dCᵀ · op(A), shape n×k
                    gemm(true, ta, n, k, m, gg, aa, ob, false);
                } else {
                    // dB = op(A)ᵀ · dC, shape k×n
                    gemm(!ta, false, k, n, m, aa, gg, ob, false);
                }
            }
            Tensor::from_parts(ins[1].shape().to_vec(), out)
        });
        Ok(vec![ga, gb])
    }
}

struct SoftmaxOp {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        y: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (yd, gd) = (y.data(), g.data());
        let mut out = vec![T::zero(); yd.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |j: usize| (o * self.len + j) * self.inner + i;
                let dot: T = (0..self.len).map(|j| yd[at(j)] * gd[at(j)]).sum();
                for j in 0..self.len {
                    out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(y.shape().to_vec(), out))])
    }
}

struct LinearOp {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Real> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        ins: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let &LinearOp { rows, fan_in, fan_out } = self;
        let gd = g.data();
        let gx = needs[0].then(|| {
            let mut out = vec![T::zero(); rows * fan_in];
            gemm(false, false, rows, fan_in, fan_out, gd, ins[1].data(), &mut out, false);
            Tensor::from_parts(ins[0].shape().to_vec(), out)
        });
        let gw = needs[1].then(|| {
            let mut out = vec![T::zero(); fan_out * fan_in];
            gemm(true, false, fan_out, fan_in, rows, gd, ins[0].data(), &mut out, false);
            Tensor::from_parts(ins[1].shape().to_vec(), out)
        });
        let mut res = vec![gx, gw];
        if ins.len() == 3 {
            res.push(needs[2].then(|| {
                let mut out = vec![T::zero(); fan_out];
                for r in 0..rows {
                    for (o, &d) in out.iter_mut().zip(&gd[r * fan_out..(r + 1) * fan_out]) {
                        *o += d;
                    }
                }
                Tensor::from_parts(vec![fan_out], out)
            }));
        }
        Ok(res)
    }
}

impl<T: Real> Graph<T> {
    /// `(M×K) · (K×N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_rank(self.value(a), 2, "matmul lhs")?;
        expect_rank(self.value(b), 2, "matmul rhs")?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = self.batched(a, b, false, false, 1, (sa[0], sa[1]), (sb[0], sb[1]))?;
        Ok(out)
    }

    /// Batched product over rank-3 tensors with optional transposes:
    /// `out[i] = op(a[i]) · op(b[i])`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        expect_rank(self.value(a), 3, "bmm lhs")?;
        expect_rank(self.value(b), 3, "bmm rhs")?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[0] != sb[0] {
            return shape_err(format!("bmm batch mismatch: {sa:?} vs {sb:?}"));
        }
        self.batched(a, b, ta, tb, sa[0], (sa[1], sa[2]), (sb[1], sb[2]))
    }

    #[allow(clippy::too_many_arguments)]
    fn batched(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        da: (usize, usize),
        db: (usize, usize),
    ) -> Result<Var> {
        let (m, k) = if ta { (da.1, da.0) } else { da };
        let (k2, n) = if tb { (db.1, db.0) } else { db };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(ta, tb, m, n, k, &ad[i * m * k..], &bd[i * k * n..], &mut out[i * m * n..], false);
            }
        }
        let shape = if self.value(a).rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.record(BmmOp { batch, m, k, n, ta, tb }, vec![a, b], Tensor::from_parts(shape, out))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        self.record(SoftmaxOp { outer, len, inner }, vec![x], Tensor::from_parts(shape, out))
    }

    /// Fully connected layer: `x · wᵀ + b` with `x: rows×in`, `w: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        expect_rank(self.value(x), 2, "linear input")?;
        expect_rank(self.value(w), 2, "linear weight")?;
        let (rows, fan_in) = (self.shape(x)[0], self.shape(x)[1]);
        let fan_out = self.shape(w)[0];
        if self.shape(w)[1] != fan_in {
            return shape_err(format!(
                "linear: input {:?} vs weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return shape_err(format!("linear bias {:?}, expected [{fan_out}]", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); rows * fan_out];
        gemm(false, true, rows, fan_out, fan_in, self.value(x).data(), self.value(w).data(), &mut out, false);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                for (o, &bv) in out[r * fan_out..(r + 1) * fan_out].iter_mut().zip(bd) {
                    *o += bv;
                }
            }
            inputs.push(b);
        }
        self.record(LinearOp { rows, fan_in, fan_out }, inputs, Tensor::from_parts(vec![rows, fan_out], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut expected = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expected[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        assert_eq!(expected, [58.0, 64.0, 139.0, 154.0]);
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::from_f64(&[2, 3], &a).unwrap());
        let vb = g.constant(Tensor::from_f64(&[3, 2], &b).unwrap());
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(c).data(), &expected);
        assert!(g.matmul(va, va).is_err());
    }

    #[test]
    fn bmm_transposes_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[2, 3, 5], |i| (i as f64 * 0.11).cos());
        let mut at = Tensor::<f64>::zeros(&[2, 4, 3]);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let v = a.at(&[bi, i, j]);
                    let off = at.offset(&[bi, j, i]);
                    at.data_mut()[off] = v;
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let (va, vat, vb) = (g.constant(a), g.constant(at), g.constant(b));
        let c1 = g.bmm(va, vb, true, false).unwrap();
        let c2 = g.bmm(vat, vb, false, false).unwrap();
        assert_eq!(g.shape(c1), &[2, 4, 5]);
        assert!(g.value(c1).max_abs_diff(g.value(c2)) < 1e-14);
    }

    #[test]
    fn softmax_constant_row_and_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4], 7.0));
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let raw = Tensor::<f64>::from_fn(&[3, 5], |i| (i as f64).sin() * 3.0);
        let a = g.constant(raw.clone());
        let b = g.constant(raw.map(|v| v + 123.456));
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) <= 1e-12);
        assert!(g.softmax(a, 2).is_err());
    }

    #[test]
    fn softmax_along_inner_axis_normalizes_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).cos()));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for b in 0..2 {
            for k in 0..4 {
                let s: f64 = (0..3).map(|j| v.at(&[b, j, k])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
