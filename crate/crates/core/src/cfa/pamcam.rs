//! Position + channel attention baseline with separate branches.
//!
//! Each branch reduces `C → C/2` with a 3×3 conv, computes its own query,
//! key and value maps and a single affinity, adds the weighted attention
//! map to the reduced features, and restores `C` channels with another 3×3
//! conv. Both branch outputs are added to the input.

use super::cost::{Extent, Layer, ModuleDescriptor};
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Builder, Conv2d, ConvBn, Mode};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

const REDUCTION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Position,
    Channel,
}

#[derive(Clone, Debug)]
struct Branch {
    kind: Kind,
    reduce: ConvBn,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    scale: ParamId,
    restore: Conv2d,
}

impl Branch {
    fn new<T: Real>(b: &mut Builder<'_, T>, kind: Kind, c: usize) -> Result<Self> {
        let r = c / REDUCTION;
        Ok(Self {
            kind,
            reduce: ConvBn::new(b, "reduce", c, r, 3, 1, 1)?,
            query: b.conv("query", r, r, 1, 1, 0, true)?,
            key: b.conv("key", r, r, 1, 1, 0, true)?,
            value: b.conv("value", r, r, 1, 1, 0, true)?,
            scale: b.param("scale", Tensor::zeros(&[1]))?,
            restore: b.conv("restore", r, c, 3, 1, 1, true)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, a: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(a).to_vec();
        let (batch, c, h, w) = (shape[0], shape[1] / REDUCTION, shape[2], shape[3]);
        let f = self.reduce.forward(g, ps, a, mode, true)?;
        let q = self.query.forward(g, ps, f)?;
        let k = self.key.forward(g, ps, f)?;
        let v = self.value.forward(g, ps, f)?;
        let qf = g.reshape(q, &[batch, c, h * w])?;
        let kf = g.reshape(k, &[batch, c, h * w])?;
        let vf = g.reshape(v, &[batch, c, h * w])?;
        let attended = match self.kind {
            Kind::Position => {
                let e = g.bmm(qf, kf, true, false)?;
                let s = g.softmax(e, 2)?;
                g.bmm(vf, s, false, true)?
            }
            Kind::Channel => {
                let e = g.bmm(qf, kf, false, true)?;
                let x = g.softmax(e, 2)?;
                g.bmm(x, vf, false, false)?
            }
        };
        let attended = g.reshape(attended, &[batch, c, h, w])?;
        let scale = g.param(ps, self.scale);
        let weighted = g.scalar_mul(scale, attended)?;
        let fused = g.add(weighted, f)?;
        self.restore.forward(g, ps, fused)
    }
}

#[derive(Clone, Debug)]
pub struct PamCam {
    pub in_channels: usize,
    position: Branch,
    channel: Branch,
}

impl PamCam {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_channels: usize) -> Result<Self> {
        if in_channels == 0 || !in_channels.is_multiple_of(REDUCTION) {
            return arg_err(format!("PAM-CAM: {in_channels} channels not divisible by {REDUCTION}"));
        }
        Ok(Self {
            in_channels,
            position: Branch::new(&mut b.scope("position"), Kind::Position, in_channels)?,
            channel: Branch::new(&mut b.scope("channel"), Kind::Channel, in_channels)?,
        })
    }

    /// The two attention weights (position, channel).
    pub fn scales(&self) -> [ParamId; 2] {
        [self.position.scale, self.channel.scale]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, a: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(a);
        if s.len() != 4 || s[1] != self.in_channels {
            return shape_err(format!("PAM-CAM expects B×{}×H×W, got {s:?}", self.in_channels));
        }
        let p = self.position.forward(g, ps, a, mode)?;
        let c = self.channel.forward(g, ps, a, mode)?;
        let sum = g.add(a, p)?;
        g.add(sum, c)
    }

    /// Layer inventory at `in_channels` input channels.
    pub fn descriptor(in_channels: usize) -> ModuleDescriptor {
        let mut layers = branch_layers(Kind::Position, in_channels);
        layers.extend(branch_layers(Kind::Channel, in_channels));
        // the two residual additions onto the input
        layers.push(Layer::Elementwise { rows: Extent::Fixed(2 * in_channels), cols: Extent::Pixels });
        ModuleDescriptor { name: "pamcam".into(), layers }
    }
}

fn branch_layers(kind: Kind, c: usize) -> Vec<Layer> {
    let r = c / REDUCTION;
    let (fr, px) = (Extent::Fixed(r), Extent::Pixels);
    let mut layers = vec![
        Layer::Conv { c_in: c, c_out: r, k: 3, bias: false },
        Layer::BatchNorm { channels: r },
        Layer::Elementwise { rows: fr, cols: px },
        Layer::Conv { c_in: r, c_out: r, k: 1, bias: true },
        Layer::Conv { c_in: r, c_out: r, k: 1, bias: true },
        Layer::Conv { c_in: r, c_out: r, k: 1, bias: true },
    ];
    layers.extend(match kind {
        Kind::Position => [
            Layer::MatMul { m: px, k: fr, n: px },
            Layer::Elementwise { rows: px, cols: px },
            Layer::MatMul { m: fr, k: px, n: px },
        ],
        Kind::Channel => [
            Layer::MatMul { m: fr, k: px, n: fr },
            Layer::Elementwise { rows: fr, cols: fr },
            Layer::MatMul { m: fr, k: fr, n: px },
        ],
    });
    layers.extend([
        Layer::Scalars { count: 1 },
        Layer::Elementwise { rows: fr, cols: px },
        Layer::Conv { c_in: r, c_out: c, k: 3, bias: true },
    ]);
    layers
}
