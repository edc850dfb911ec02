//! Texture-focused decoder: 1×1 head, a stack of upsampling blocks, and a
//! 3×3 sigmoid tail that maps encoder features back to an image.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Builder, Conv2d};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_up_blocks: usize,
    pub up_ratio: usize,
    pub out_channels: usize,
}

impl DecoderConfig {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, hidden_channels: 64, num_up_blocks: 4, up_ratio: 2, out_channels: 3 }
    }

    pub fn with_hidden(self, hidden_channels: usize) -> Self {
        Self { hidden_channels, ..self }
    }

    /// Total spatial upsampling, `up_ratio^num_up_blocks`.
    pub fn upsample_factor(&self) -> usize {
        self.up_ratio.pow(self.num_up_blocks as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_channels == 0 || self.out_channels == 0 || self.up_ratio == 0 {
            return arg_err(format!("decoder config has a zero extent: {self:?}"));
        }
        Ok(())
    }
}

/// Two-scale cross-residual block:
/// `s1 = relu(conv3 x)`, `s2 = relu(conv5 x)`,
/// `t1 = relu(conv3 [s1, s2])`, `t2 = relu(conv5 [s2, s1])`,
/// `out = x + conv1 [t1, t2]`.
#[derive(Clone, Debug)]
pub struct Msrb {
    pub channels: usize,
    pub conv3_a: Conv2d,
    pub conv5_a: Conv2d,
    pub conv3_b: Conv2d,
    pub conv5_b: Conv2d,
    pub fuse: Conv2d,
}

const FUSE_GAIN: f64 = 0.1;
/// Starts the output near 0.5, away from the flat ends of the sigmoid.
const TAIL_GAIN: f64 = 0.1;

impl Msrb {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            conv3_a: b.conv("conv3_a", c, c, 3, 1, 1, true)?,
            conv5_a: b.conv("conv5_a", c, c, 5, 1, 2, true)?,
            conv3_b: b.conv("conv3_b", 2 * c, c, 3, 1, 1, true)?,
            conv5_b: b.conv("conv5_b", 2 * c, c, 5, 1, 2, true)?,
            // small residual branch at init keeps the stacked blocks near identity
            fuse: b.conv_scaled("fuse", 2 * c, c, 1, 1, 0, true, FUSE_GAIN)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.conv3_a, &self.conv5_a, &self.conv3_b, &self.conv5_b, &self.fuse].iter().flat_map(|c| c.params()).collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.channels {
            return shape_err(format!("MSRB expects B×{}×H×W, got {s:?}", self.channels));
        }
        let s1 = self.conv3_a.forward(g, ps, x)?;
        let s1 = g.relu(s1)?;
        let s2 = self.conv5_a.forward(g, ps, x)?;
        let s2 = g.relu(s2)?;
        let a = g.concat(&[s1, s2], 1)?;
        let b = g.concat(&[s2, s1], 1)?;
        let t1 = self.conv3_b.forward(g, ps, a)?;
        let t1 = g.relu(t1)?;
        let t2 = self.conv5_b.forward(g, ps, b)?;
        let t2 = g.relu(t2)?;
        let t = g.concat(&[t1, t2], 1)?;
        let f = self.fuse.forward(g, ps, t)?;
        g.add(x, f)
    }
}

/// expand (1×1, `c → r²c`) → pixel shuffle → 3×3 conv → ReLU → MSRB.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub expand: Conv2d,
    pub conv: Conv2d,
    pub msrb: Msrb,
    pub ratio: usize,
}

impl UpBlock {
    fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            expand: b.conv("expand", c, c * ratio * ratio, 1, 1, 0, true)?,
            conv: b.conv("conv", c, c, 3, 1, 1, true)?,
            msrb: Msrb::new(&mut b.scope("msrb"), c)?,
            ratio,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.expand.forward(g, ps, x)?;
        let y = g.pixel_shuffle(y, self.ratio)?;
        let y = self.conv.forward(g, ps, y)?;
        let y = g.relu(y)?;
        self.msrb.forward(g, ps, y)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.expand.params();
        p.extend(self.conv.params());
        p.extend(self.msrb.params());
        p
    }
}

#[derive(Debug)]
pub struct TfDec {
    pub cfg: DecoderConfig,
    pub head: Conv2d,
    pub blocks: Vec<UpBlock>,
    pub tail: Conv2d,
    forward_calls: AtomicUsize,
}

impl Clone for TfDec {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            head: self.head.clone(),
            blocks: self.blocks.clone(),
            tail: self.tail.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

impl TfDec {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden_channels;
        let head = b.conv("head", cfg.in_channels, c, 1, 1, 0, true)?;
        let blocks = (0..cfg.num_up_blocks)
            .map(|i| UpBlock::new(&mut b.scope(&format!("up{i}")), c, cfg.up_ratio))
            .collect::<Result<Vec<_>>>()?;
        let tail = b.conv_scaled("tail", c, cfg.out_channels, 3, 1, 1, true, TAIL_GAIN)?;
        Ok(Self { cfg, head, blocks, tail, forward_calls: AtomicUsize::new(0) })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.head.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.tail.params());
        p
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// `B×C4×h×w → B×out×(f·h)×(f·w)` with values in `(0, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, f4: Var) -> Result<Var> {
        let s = g.shape(f4);
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return shape_err(format!("decoder expects B×{}×h×w, got {s:?}", self.cfg.in_channels));
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let mut y = self.head.forward(g, ps, f4)?;
        for b in &self.blocks {
            y = b.forward(g, ps, y)?;
        }
        let y = self.tail.forward(g, ps, y)?;
        g.sigmoid(y)
    }
}
