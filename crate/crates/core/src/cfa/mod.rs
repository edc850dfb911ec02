//! Compact foreground attention.
//!
//! Input `A: B×C×H×W` is squeezed by channel max pooling to `D = C/n`
//! channels, a shared set of query/key/value maps produces both a channel
//! affinity (`D×D`) and a position affinity (`N×N`, `N = H·W`), the two
//! attention maps are fused back onto the squeezed features with learnable
//! weights, and a recover layer restores `C` channels.

mod cost;
mod pamcam;

pub use cost::{count_flops, count_params, CostReport, Extent, Layer, ModuleDescriptor};
pub use pamcam::PamCam;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, Mode};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfaConfig {
    pub in_channels: usize,
    /// Channel max pooling factor `n`.
    pub pool_factor: usize,
}

impl CfaConfig {
    pub fn new(in_channels: usize) -> Result<Self> {
        Self::with_pool_factor(in_channels, 2)
    }

    pub fn with_pool_factor(in_channels: usize, pool_factor: usize) -> Result<Self> {
        if pool_factor == 0 || in_channels == 0 || !in_channels.is_multiple_of(pool_factor) {
            return arg_err(format!("CFA: {in_channels} channels not divisible by n={pool_factor}"));
        }
        Ok(Self { in_channels, pool_factor })
    }

    /// Squeezed channel count `D`.
    pub fn squeezed(&self) -> usize {
        self.in_channels / self.pool_factor
    }
}

/// Attended features plus every intermediate the masks and tests need.
#[derive(Clone, Copy, Debug)]
pub struct CfaOutput {
    /// `A′`, same shape as the input.
    pub attended: Var,
    /// Channel attention map `CA`, `B×D×H×W`.
    pub ca_map: Var,
    /// Position attention map `PA`, `B×D×H×W`.
    pub pa_map: Var,
    /// Row-stochastic `X`, `B×D×D`.
    pub channel_affinity: Var,
    /// Row-stochastic `S`, `B×N×N`.
    pub position_affinity: Var,
    /// Squeezed input `B` after channel max pooling.
    pub squeezed: Var,
}

#[derive(Clone, Debug)]
pub struct Cfa {
    pub cfg: CfaConfig,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub query_bn: BatchNorm2d,
    pub key_bn: BatchNorm2d,
    /// Weight of the channel attention map (γ).
    pub gamma: ParamId,
    /// Weight of the position attention map (φ).
    pub phi: ParamId,
    pub recover_bn: BatchNorm2d,
    pub recover: Conv2d,
}

impl Cfa {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: CfaConfig) -> Result<Self> {
        let d = cfg.squeezed();
        Ok(Self {
            cfg,
            // query and key feed batch norm, so a bias would be cancelled
            query: b.conv("query", d, d, 1, 1, 0, false)?,
            key: b.conv("key", d, d, 1, 1, 0, false)?,
            value: b.conv("value", d, d, 1, 1, 0, true)?,
            query_bn: b.batch_norm("query_bn", d)?,
            key_bn: b.batch_norm("key_bn", d)?,
            gamma: b.param("gamma", Tensor::zeros(&[1]))?,
            phi: b.param("phi", Tensor::zeros(&[1]))?,
            recover_bn: b.batch_norm("recover_bn", d)?,
            recover: b.conv("recover", d, cfg.in_channels, 1, 1, 0, true)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        p.extend(self.query.params());
        p.extend(self.key.params());
        p.extend(self.value.params());
        p.extend(self.query_bn.params());
        p.extend(self.key_bn.params());
        p.extend([self.gamma, self.phi]);
        p.extend(self.recover_bn.params());
        p.extend(self.recover.params());
        p
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, a: Var, mode: Mode) -> Result<CfaOutput> {
        let shape = g.shape(a).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return shape_err(format!("CFA expects B×{}×H×W, got {shape:?}", self.cfg.in_channels));
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let (d, n) = (self.cfg.squeezed(), h * w);

        let squeezed = g.channel_max_pool(a, self.cfg.pool_factor)?;
        let q = self.query.forward(g, ps, squeezed)?;
        let q = self.query_bn.forward(g, ps, q, mode)?;
        let q = g.relu(q)?;
        let k = self.key.forward(g, ps, squeezed)?;
        let k = self.key_bn.forward(g, ps, k, mode)?;
        let k = g.relu(k)?;
        let v = self.value.forward(g, ps, squeezed)?;

        let qf = g.reshape(q, &[batch, d, n])?;
        let kf = g.reshape(k, &[batch, d, n])?;
        let vf = g.reshape(v, &[batch, d, n])?;

        let x_logits = g.bmm(qf, kf, false, true)?;
        let channel_affinity = g.softmax(x_logits, 2)?;
        let s_logits = g.bmm(kf, qf, true, false)?;
        let position_affinity = g.softmax(s_logits, 2)?;

        let ca = g.bmm(channel_affinity, vf, false, false)?;
        let ca_map = g.reshape(ca, &[batch, d, h, w])?;
        // output position j gathers values weighted by row j of S
        let pa = g.bmm(vf, position_affinity, false, true)?;
        let pa_map = g.reshape(pa, &[batch, d, h, w])?;

        let gamma = g.param(ps, self.gamma);
        let phi = g.param(ps, self.phi);
        let weighted_ca = g.scalar_mul(gamma, ca_map)?;
        let weighted_pa = g.scalar_mul(phi, pa_map)?;
        let fused = g.add(weighted_ca, weighted_pa)?;
        let fused = g.add(fused, squeezed)?;

        let r = self.recover_bn.forward(g, ps, fused, mode)?;
        let attended = self.recover.forward(g, ps, r)?;
        Ok(CfaOutput { attended, ca_map, pa_map, channel_affinity, position_affinity, squeezed })
    }

    /// Layer inventory for the analytic cost counters; mirrors [`Cfa::new`]
    /// and [`Cfa::forward`] one to one.
    pub fn descriptor(cfg: CfaConfig) -> ModuleDescriptor {
        let (c, d) = (cfg.in_channels, cfg.squeezed());
        let (fd, px) = (Extent::Fixed(d), Extent::Pixels);
        ModuleDescriptor {
            name: "cfa".into(),
            layers: vec![
                Layer::Elementwise { rows: Extent::Fixed(c), cols: px },
                Layer::Conv { c_in: d, c_out: d, k: 1, bias: false },
                Layer::BatchNorm { channels: d },
                Layer::Elementwise { rows: fd, cols: px },
                Layer::Conv { c_in: d, c_out: d, k: 1, bias: false },
                Layer::BatchNorm { channels: d },
                Layer::Elementwise { rows: fd, cols: px },
                Layer::Conv { c_in: d, c_out: d, k: 1, bias: true },
                Layer::MatMul { m: fd, k: px, n: fd },
                Layer::Elementwise { rows: fd, cols: fd },
                Layer::MatMul { m: px, k: fd, n: px },
                Layer::Elementwise { rows: px, cols: px },
                Layer::MatMul { m: fd, k: fd, n: px },
                Layer::MatMul { m: fd, k: px, n: px },
                Layer::Scalars { count: 2 },
                Layer::Elementwise { rows: fd, cols: px },
                Layer::BatchNorm { channels: d },
                Layer::Conv { c_in: d, c_out: c, k: 1, bias: true },
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize) -> (ParamStore<f64>, Cfa) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfa = Cfa::new(&mut Builder::new(&mut ps, &mut rng), CfaConfig::new(c).unwrap()).unwrap();
        (ps, cfa)
    }

    #[test]
    fn config_validates_divisibility() {
        assert!(CfaConfig::new(7).is_err());
        assert_eq!(CfaConfig::new(8).unwrap().squeezed(), 4);
        assert!(CfaConfig::with_pool_factor(12, 3).is_ok());
    }

    #[test]
    fn shapes_follow_input() {
        let (mut ps, cfa) = build(64);
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 64, 8, 4], |i| (i as f64 * 0.13).sin()));
        let out = cfa.forward(&mut g, &mut ps, a, Mode::Train).unwrap();
        assert_eq!(g.shape(out.channel_affinity), &[2, 32, 32]);
        assert_eq!(g.shape(out.position_affinity), &[2, 32, 32]);
        assert_eq!(g.shape(out.ca_map), &[2, 32, 8, 4]);
        assert_eq!(g.shape(out.attended), &[2, 64, 8, 4]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let (mut ps, cfa) = build(8);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
        assert!(cfa.forward(&mut g, &mut ps, a, Mode::Train).is_err());
    }

    #[test]
    fn descriptor_matches_instantiated_parameters() {
        for c in [8, 64, 256] {
            let (ps, _) = build(c);
            let desc = Cfa::descriptor(CfaConfig::new(c).unwrap());
            assert_eq!(count_params(&desc), ps.num_elements() as u64, "C={c}");
        }
    }
}
