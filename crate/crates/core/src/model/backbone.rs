//! Small residual encoder: five stages of basic two-conv blocks, plus the
//! bottleneck block used by the local branch.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::nn::{Builder, ConvBn, Mode};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |channels, stride| StageConfig { channels, blocks: 1, stride };
        Self { stages: vec![stage(8, 2), stage(16, 2), stage(32, 2), stage(64, 2), stage(128, 1)] }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 5 {
            return arg_err(format!("backbone needs 5 stages, got {}", self.stages.len()));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0 || s.stride == 0) {
            return arg_err("backbone stages need positive channels, blocks and stride");
        }
        if self.stages[4].stride != 1 {
            return arg_err("stage 5 must keep stride 1");
        }
        Ok(())
    }

    /// Cumulative downsampling at the output of stage `n` (1-based).
    pub fn downsample_at(&self, n: usize) -> usize {
        self.stages[..n].iter().map(|s| s.stride).product()
    }

    pub fn channels_at(&self, n: usize) -> usize {
        self.stages[n - 1].channels
    }
}

/// Two 3×3 conv-BN layers with a residual connection; the shortcut is a
/// strided 1×1 conv-BN when the shape changes.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if c_in != c_out || stride != 1 { Some(ConvBn::new(b, "shortcut", c_in, c_out, 1, stride, 0)?) } else { None };
        Ok(Self {
            conv1: ConvBn::new(b, "conv1", c_in, c_out, 3, stride, 1)?,
            conv2: ConvBn::new(b, "conv2", c_out, c_out, 3, 1, 1)?,
            shortcut,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(g, ps, x, mode, true)?;
        let y = self.conv2.forward(g, ps, y, mode, false)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, ps, x, mode, false)?,
            None => x,
        };
        let y = g.add(y, skip)?;
        g.relu(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }
}

/// 1×1 reduce → 3×3 → 1×1 expand, identity shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub conv: ConvBn,
    pub expand: ConvBn,
}

impl Bottleneck {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        let mid = (c / 4).max(1);
        Ok(Self {
            reduce: ConvBn::new(b, "reduce", c, mid, 1, 1, 0)?,
            conv: ConvBn::new(b, "conv", mid, mid, 3, 1, 1)?,
            expand: ConvBn::new(b, "expand", mid, c, 1, 1, 0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.reduce.forward(g, ps, x, mode, true)?;
        let y = self.conv.forward(g, ps, y, mode, true)?;
        let y = self.expand.forward(g, ps, y, mode, false)?;
        let y = g.add(y, x)?;
        g.relu(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.reduce.params();
        p.extend(self.conv.params());
        p.extend(self.expand.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let mut scope = b.scope(&format!("stage{}", i + 1));
            let mut blocks = Vec::with_capacity(s.blocks);
            for j in 0..s.blocks {
                let stride = if j == 0 { s.stride } else { 1 };
                blocks.push(BasicBlock::new(&mut scope.scope(&format!("block{j}")), c_in, s.channels, stride)?);
                c_in = s.channels;
            }
            stages.push(blocks);
        }
        Ok(Self { cfg, stages })
    }

    /// Runs stages `from..=to` (1-based).
    pub fn run<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, x: Var, from: usize, to: usize, mode: Mode) -> Result<Var> {
        let mut y = x;
        for stage in &self.stages[from - 1..to] {
            for block in stage {
                y = block.forward(g, ps, y, mode)?;
            }
        }
        Ok(y)
    }

    pub fn stage_params(&self, n: usize) -> Vec<ParamId> {
        self.stages[n - 1].iter().flat_map(|b| b.params()).collect()
    }
}
