use super::graph::{Backward, Graph, Var};
use super::linalg::gemm;
use super::{expect_rank, Real, Tensor};
use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geo: Geometry,
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        ins: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let geo = &self.geo;
        let (x, w, gd) = (ins[0].data(), ins[1].data(), g.data());
        let (in_sz, out_sz) = (geo.c * geo.h * geo.w, geo.o * geo.out_px());
        let (rows, px) = (geo.col_rows(), geo.out_px());
        let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut gw = needs[1].then(|| vec![T::zero(); w.len()]);
        let mut col = if geo.pointwise() { Vec::new() } else { vec![T::zero(); rows * px] };
        for b in 0..geo.batch {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let gb = &gd[b * out_sz..(b + 1) * out_sz];
            if let Some(gw) = gw.as_mut() {
                let cols: &[T] = if geo.pointwise() {
                    xb
                } else {
                    im2col(xb, geo, &mut col);
                    &col
                };
                gemm(false, true, geo.o, rows, px, gb, cols, gw, b > 0);
            }
            if let Some(gx) = gx.as_mut() {
                let dxb = &mut gx[b * in_sz..(b + 1) * in_sz];
                if geo.pointwise() {
                    gemm(true, false, rows, px, geo.o, w, gb, dxb, false);
                } else {
                    gemm(true, false, rows, px, geo.o, w, gb, &mut col, false);
                    col2im(&col, geo, dxb);
                }
            }
        }
        let mut out = vec![
            gx.map(|d| Tensor::from_parts(ins[0].shape().to_vec(), d)),
            gw.map(|d| Tensor::from_parts(ins[1].shape().to_vec(), d)),
        ];
        if ins.len() == 3 {
            out.push(needs[2].then(|| {
                let mut gbias = vec![T::zero(); geo.o];
                for b in 0..geo.batch {
                    for (o, acc) in gbias.iter_mut().enumerate() {
                        let start = b * out_sz + o * px;
                        *acc += gd[start..start + px].iter().copied().sum::<T>();
                    }
                }
                Tensor::from_parts(vec![geo.o], gbias)
            }));
        }
        Ok(out)
    }
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation of `x: B×C×H×W` with `w: O×C×kh×kw`, optional
    /// bias `O`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        expect_rank(self.value(x), 4, "conv2d input")?;
        expect_rank(self.value(w), 4, "conv2d weight")?;
        if stride == 0 {
            return arg_err("conv2d stride must be at least 1");
        }
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c {
            return shape_err(format!("conv2d: input has {c} channels, weight {ws:?} expects {kc}"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return shape_err(format!("conv2d: kernel {kh}×{kw} larger than padded input {xs:?} (pad {pad})"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err(format!("conv2d bias {:?}, expected [{o}]", self.shape(b)));
            }
        }
        let geo = Geometry {
            batch,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (in_sz, px, rows) = (c * h * wd, geo.out_px(), geo.col_rows());
        let mut out = vec![T::zero(); batch * o * px];
        {
            let (xd, wdata) = (self.value(x).data(), self.value(w).data());
            let mut col = if geo.pointwise() { Vec::new() } else { vec![T::zero(); rows * px] };
            for bi in 0..batch {
                let xb = &xd[bi * in_sz..(bi + 1) * in_sz];
                let yb = &mut out[bi * o * px..(bi + 1) * o * px];
                let cols: &[T] = if geo.pointwise() {
                    xb
                } else {
                    im2col(xb, &geo, &mut col);
                    &col
                };
                gemm(false, false, o, px, rows, wdata, cols, yb, false);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for plane in out.chunks_mut(px).enumerate() {
                    let (idx, p) = plane;
                    let bias = bd[idx % o];
                    p.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::from_parts(vec![batch, o, geo.ho, geo.wo], out);
        self.record(Conv2dOp { geo }, inputs, value)
    }
}
