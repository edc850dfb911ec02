//! The full network: encoder, compact attention side branch, three
//! embedding heads, and the reconstruction decoder.

mod backbone;
mod train;

pub use backbone::{Backbone, BackboneConfig, BasicBlock, Bottleneck, StageConfig};
pub use train::{
    load_model, save_model, train, train_step, PhaseKind, StepOutcome, TrainConfig, TrainLogRow, TrainSchedule,
    TripletMode,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfa::{Cfa, CfaConfig, CfaOutput};
use crate::error::{arg_err, shape_err, Result};
use crate::masks::{attention_to_mask, build_target, gaussian_mask, GaussianMaskSpec, MaskSet, ReconStrategy, Spatialize};
use crate::nn::{Builder, Linear, Mode};
use crate::tensor::{expect_rank, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::tfdec::{DecoderConfig, TfDec};

/// Names of the three embedding branches, in output order.
pub const BRANCHES: [&str; 3] = ["cfa", "global", "local"];

/// How the two global poolings are combined ahead of the embedding layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolCombine {
    #[default]
    Sum,
    Concat,
}

/// Which features the decoder reconstructs from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderInput {
    #[default]
    Stage4,
    Cfa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input `(H, W)`.
    pub image_size: (usize, usize),
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub use_cfa: bool,
    pub cfa_pool_factor: usize,
    pub use_decoder: bool,
    pub decoder_hidden: usize,
    pub decoder_input: DecoderInput,
    pub pool: PoolCombine,
    pub gaussian: GaussianMaskSpec,
    pub spatialize: Spatialize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 32),
            backbone: BackboneConfig::default(),
            embed_dim: 64,
            num_classes: 2,
            use_cfa: true,
            cfa_pool_factor: 2,
            use_decoder: true,
            decoder_hidden: 64,
            decoder_input: DecoderInput::Stage4,
            pool: PoolCombine::Sum,
            gaussian: GaussianMaskSpec::default(),
            spatialize: Spatialize::ChannelMean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (h, w) = self.image_size;
        let f5 = self.backbone.downsample_at(5);
        if h == 0 || w == 0 || h % f5 != 0 || w % f5 != 0 {
            return arg_err(format!("image size {h}×{w} not divisible by the encoder stride {f5}"));
        }
        if self.embed_dim == 0 || self.num_classes < 2 {
            return arg_err("need a positive embedding width and at least two classes");
        }
        if self.use_cfa {
            CfaConfig::with_pool_factor(self.backbone.channels_at(4), self.cfa_pool_factor)?;
        }
        if self.use_decoder {
            if self.decoder_input == DecoderInput::Cfa && !self.use_cfa {
                return arg_err("decoder input 'Cfa' requires the CFA module");
            }
            self.decoder_config()?.validate()?;
        }
        Ok(())
    }

    /// Ratio-2 upsampling blocks matching the stage-4 downsampling.
    pub fn decoder_config(&self) -> Result<DecoderConfig> {
        let f4 = self.backbone.downsample_at(4);
        if !f4.is_power_of_two() {
            return arg_err(format!("stage-4 downsampling {f4} is not a power of two"));
        }
        Ok(DecoderConfig {
            in_channels: self.backbone.channels_at(4),
            hidden_channels: self.decoder_hidden,
            num_up_blocks: f4.trailing_zeros() as usize,
            up_ratio: 2,
            out_channels: 3,
        })
    }

    pub fn concat_dim(&self) -> usize {
        BRANCHES.len() * self.embed_dim
    }
}

/// GAP and GMP combined → embedding layer → identity classifier.
#[derive(Clone, Debug)]
pub struct Head {
    pub fc: Linear,
    pub classifier: Linear,
    pub pool: PoolCombine,
}

impl Head {
    fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, dim: usize, classes: usize, pool: PoolCombine) -> Result<Self> {
        let fan_in = if pool == PoolCombine::Concat { 2 * c } else { c };
        Ok(Self {
            fc: b.linear("fc", fan_in, dim, (1.0 / fan_in as f64).sqrt(), true)?,
            classifier: b.linear("classifier", dim, classes, 0.01, true)?,
            pool,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, feat: Var) -> Result<(Var, Var)> {
        let avg = g.global_avg_pool(feat)?;
        let max = g.global_max_pool(feat)?;
        let pooled = match self.pool {
            PoolCombine::Sum => g.add(avg, max)?,
            PoolCombine::Concat => g.concat(&[avg, max], 1)?,
        };
        let emb = self.fc.forward(g, ps, pooled)?;
        let logits = self.classifier.forward(g, ps, emb)?;
        Ok((emb, logits))
    }
}

/// Parameter ids grouped by role.
#[derive(Clone, Debug, Default)]
pub struct ParamGroups {
    /// Stages 1–5.
    pub stages: Vec<Vec<ParamId>>,
    pub local: Vec<ParamId>,
    pub cfa: Vec<ParamId>,
    /// Embedding layers and classifiers of the three heads.
    pub heads: Vec<ParamId>,
    pub classifiers: Vec<ParamId>,
    pub decoder: Vec<ParamId>,
}

impl ParamGroups {
    pub fn encoder(&self, upto: usize) -> Vec<ParamId> {
        self.stages[..upto].iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReidOutput {
    pub embeddings: [Var; 3],
    pub logits: [Var; 3],
    /// Feature maps feeding each head.
    pub features: [Var; 3],
    pub cfa: Option<CfaOutput>,
    pub f4: Var,
}

#[derive(Clone, Debug)]
pub struct ReconOutput<T> {
    pub recon: Var,
    pub masks: MaskSet<T>,
    /// Detached, mask-weighted input.
    pub target: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FtnModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub local: backbone::Bottleneck,
    pub cfa: Option<Cfa>,
    pub heads: Vec<Head>,
    pub decoder: Option<TfDec>,
}

impl FtnModel {
    /// Builds the network and its parameters, initialized from `seed`.
    pub fn new<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut ps, &mut rng);
        let backbone = Backbone::new(&mut b.scope("backbone"), cfg.backbone.clone())?;
        let (c4, c5) = (cfg.backbone.channels_at(4), cfg.backbone.channels_at(5));
        let local = Bottleneck::new(&mut b.scope("local"), c5)?;
        let cfa = if cfg.use_cfa {
            Some(Cfa::new(&mut b.scope("cfa"), CfaConfig::with_pool_factor(c4, cfg.cfa_pool_factor)?)?)
        } else {
            None
        };
        let heads = BRANCHES
            .iter()
            .zip([c4, c5, c5])
            .map(|(name, c)| Head::new(&mut b.scope(&format!("head_{name}")), c, cfg.embed_dim, cfg.num_classes, cfg.pool))
            .collect::<Result<Vec<_>>>()?;
        let decoder = if cfg.use_decoder { Some(TfDec::new(&mut b.scope("decoder"), cfg.decoder_config()?)?) } else { None };
        Ok((Self { cfg, backbone, local, cfa, heads, decoder }, ps))
    }

    pub fn groups(&self) -> ParamGroups {
        ParamGroups {
            stages: (1..=5).map(|n| self.backbone.stage_params(n)).collect(),
            local: self.local.params(),
            cfa: self.cfa.as_ref().map(|c| c.params()).unwrap_or_default(),
            heads: self.heads.iter().flat_map(|h| h.fc.params().into_iter().chain(h.classifier.params())).collect(),
            classifiers: self.heads.iter().flat_map(|h| h.classifier.params()).collect(),
            decoder: self.decoder.as_ref().map(|d| d.params()).unwrap_or_default(),
        }
    }

    fn check_images<T: Real>(&self, g: &Graph<T>, images: Var) -> Result<()> {
        let s = g.shape(images);
        let (h, w) = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return shape_err(format!("model expects B×3×{h}×{w} images, got {s:?}"));
        }
        Ok(())
    }

    pub fn forward_reid<T: Real>(&self, g: &mut Graph<T>, ps: &mut ParamStore<T>, images: Var, mode: Mode) -> Result<ReidOutput> {
        self.check_images(g, images)?;
        let f4 = self.backbone.run(g, ps, images, 1, 4, mode)?;
        let f5 = self.backbone.run(g, ps, f4, 5, 5, mode)?;
        let local = self.local.forward(g, ps, f5, mode)?;
        let cfa = match &self.cfa {
            Some(c) => Some(c.forward(g, ps, f4, mode)?),
            None => None,
        };
        let first = cfa.map_or(f4, |c| c.attended);
        let features = [first, f5, local];
        let mut embeddings = [f4; 3];
        let mut logits = [f4; 3];
        for (i, (head, &feat)) in self.heads.iter().zip(&features).enumerate() {
            (embeddings[i], logits[i]) = head.forward(g, ps, feat)?;
        }
        Ok(ReidOutput { embeddings, logits, features, cfa, f4 })
    }

    /// Gaussian mask plus attention masks from `cfa` at input resolution.
    pub fn masks<T: Real>(&self, g: &Graph<T>, cfa: Option<&CfaOutput>, batch: usize) -> Result<MaskSet<T>> {
        let (h, w) = self.cfg.image_size;
        let gm = gaussian_mask(h, w, &self.cfg.gaussian)?;
        let (pam, cam) = match cfa {
            Some(c) => (
                Some(attention_to_mask(g.value(c.pa_map), h, w, self.cfg.spatialize)?),
                Some(attention_to_mask(g.value(c.ca_map), h, w, self.cfg.spatialize)?),
            ),
            None => (None, None),
        };
        if let Some(p) = &pam {
            debug_assert_eq!(p.shape()[0], batch);
        }
        Ok(MaskSet { gm, pam, cam })
    }

    pub fn forward_recon<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        images: Var,
        mode: Mode,
        strategy: ReconStrategy,
    ) -> Result<ReconOutput<T>> {
        self.check_images(g, images)?;
        let Some(decoder) = &self.decoder else {
            return arg_err("model was built without a decoder");
        };
        let (_, use_pam, use_cam) = strategy.masks();
        let needs_cfa = use_pam || use_cam || self.cfg.decoder_input == DecoderInput::Cfa;
        if needs_cfa && self.cfa.is_none() {
            return arg_err(format!("strategy {strategy} needs the CFA module"));
        }
        let batch = g.shape(images)[0];
        let f4 = self.backbone.run(g, ps, images, 1, 4, mode)?;
        let cfa = match (&self.cfa, needs_cfa) {
            (Some(c), true) => Some(c.forward(g, ps, f4, mode)?),
            _ => None,
        };
        let masks = self.masks(g, cfa.as_ref(), batch)?;
        let target = build_target(g.value(images), strategy, &masks)?;
        let dec_in = match (self.cfg.decoder_input, cfa) {
            (DecoderInput::Cfa, Some(c)) => c.attended,
            _ => f4,
        };
        let recon = decoder.forward(g, ps, dec_in)?;
        Ok(ReconOutput { recon, masks, target })
    }

    /// Inference embedding: the three branch embeddings concatenated, with
    /// running batch-norm statistics. Never touches the decoder.
    pub fn embed<T: Real>(&self, ps: &mut ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank(images, 4, "embed")?;
        const CHUNK: usize = 32;
        let n = images.shape()[0];
        let mut rows = Vec::with_capacity(n * self.cfg.concat_dim());
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let mut g = Graph::new();
            let x = g.constant(images.narrow_batch(start, len)?);
            let out = self.forward_reid(&mut g, ps, x, Mode::Eval)?;
            let cat = g.concat(&out.embeddings, 1)?;
            rows.extend_from_slice(g.value(cat).data());
            start += len;
        }
        Tensor::new(&[n, self.cfg.concat_dim()], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};

    fn desk() -> ModelConfig {
        ModelConfig { num_classes: 5, decoder_hidden: 4, ..Default::default() }
    }

    fn images(n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 3, 64, 32], |i| ((i as f32 * 0.377).sin() + 1.0) / 2.0)
    }

    #[test]
    fn reid_output_shapes() {
        let (m, mut ps) = FtnModel::new::<f32>(desk(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2));
        let out = m.forward_reid(&mut g, &mut ps, x, Mode::Train).unwrap();
        for i in 0..3 {
            assert_eq!(g.shape(out.embeddings[i]), &[2, 64]);
            assert_eq!(g.shape(out.logits[i]), &[2, 5]);
        }
        assert_eq!(g.shape(out.f4), &[2, 64, 4, 2]);
    }

    #[test]
    fn duplicated_images_give_identical_rows() {
        let (m, mut ps) = FtnModel::new::<f32>(desk(), 2).unwrap();
        let one = images(1);
        let two = Tensor::stack(&[one.reshape(&[3, 64, 32]).unwrap(), one.reshape(&[3, 64, 32]).unwrap()]).unwrap();
        let e = m.embed(&mut ps, &two).unwrap();
        assert_eq!(e.shape(), &[2, 192]);
        assert_eq!(&e.data()[..192], &e.data()[192..]);
    }

    #[test]
    fn embed_is_deterministic_and_skips_decoder() {
        let (m, mut ps) = FtnModel::new::<f32>(desk(), 3).unwrap();
        let x = images(3);
        let a = m.embed(&mut ps, &x).unwrap();
        let b = m.embed(&mut ps, &x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(m.decoder.as_ref().unwrap().forward_calls(), 0);
    }

    #[test]
    fn embed_matches_reid_slices() {
        let (m, mut ps) = FtnModel::new::<f32>(desk(), 4).unwrap();
        let x = images(2);
        let e = m.embed(&mut ps, &x).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = m.forward_reid(&mut g, &mut ps, xv, Mode::Eval).unwrap();
        for row in 0..2 {
            for (k, &v) in out.embeddings.iter().enumerate() {
                assert_eq!(&e.data()[row * 192 + k * 64..row * 192 + (k + 1) * 64], &g.value(v).data()[row * 64..(row + 1) * 64]);
            }
        }
    }

    #[test]
    fn recon_shapes_and_mask_range() {
        let (m, mut ps) = FtnModel::new::<f32>(desk(), 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2));
        let out = m.forward_recon(&mut g, &mut ps, x, Mode::Train, ReconStrategy::GmPamCam).unwrap();
        assert_eq!(g.shape(out.recon), &[2, 3, 64, 32]);
        for mask in [Some(&out.masks.gm), out.masks.pam.as_ref(), out.masks.cam.as_ref()] {
            assert!(mask.unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gaussian_target_ignores_cfa_weights() {
        let (m, mut ps) = FtnModel::new::<f32>(desk(), 6).unwrap();
        let target = |ps: &mut ParamStore<f32>| {
            let mut g = Graph::new();
            let x = g.constant(images(2));
            m.forward_recon(&mut g, ps, x, Mode::Eval, ReconStrategy::GmOnly).unwrap().target
        };
        let before = target(&mut ps);
        let cfa = m.cfa.as_ref().unwrap();
        ps.param_mut(cfa.gamma).value.data_mut()[0] = 0.7;
        ps.param_mut(cfa.phi).value.data_mut()[0] = -0.4;
        assert_eq!(target(&mut ps).data(), before.data());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = desk();
        cfg.backbone.stages[4].stride = 2;
        assert!(FtnModel::new::<f32>(cfg, 0).is_err());
        let cfg = ModelConfig { image_size: (60, 32), ..desk() };
        assert!(FtnModel::new::<f32>(cfg, 0).is_err());
        let cfg = ModelConfig { use_cfa: false, decoder_input: DecoderInput::Cfa, ..desk() };
        assert!(FtnModel::new::<f32>(cfg, 0).is_err());
    }

    #[test]
    fn attention_strategies_need_cfa() {
        let (m, mut ps) = FtnModel::new::<f32>(ModelConfig { use_cfa: false, ..desk() }, 7).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2));
        assert!(m.forward_recon(&mut g, &mut ps, x, Mode::Train, ReconStrategy::GmPam).is_err());
        assert!(m.forward_recon(&mut g, &mut ps, x, Mode::Train, ReconStrategy::NoCfaGmOnly).is_ok());
    }

    /// A micro network small enough to finite-difference every coordinate.
    pub(crate) fn micro() -> ModelConfig {
        let stage = |channels, stride| StageConfig { channels, blocks: 1, stride };
        ModelConfig {
            image_size: (16, 8),
            backbone: BackboneConfig { stages: vec![stage(2, 2), stage(4, 1), stage(4, 2), stage(4, 1), stage(8, 1)] },
            embed_dim: 3,
            num_classes: 3,
            decoder_hidden: 2,
            ..Default::default()
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (m, mut ps) = FtnModel::new::<f64>(micro(), 8).unwrap();
        let cfa = m.cfa.as_ref().unwrap();
        ps.param_mut(cfa.gamma).value.data_mut()[0] = 0.3;
        ps.param_mut(cfa.phi).value.data_mut()[0] = -0.2;
        let x = Tensor::from_fn(&[2, 3, 16, 8], |i| ((i * 7919 % 97) as f64) / 97.0);
        let labels = [0, 2];
        let r = grad_check(
            &mut ps,
            |g, ps| {
                let xv = g.constant(x.clone());
                let out = m.forward_reid(g, ps, xv, Mode::Train)?;
                let a = g.add(out.logits[0], out.logits[1])?;
                let s = g.add(a, out.logits[2])?;
                g.cross_entropy(s, &labels)
            },
            GradCheckConfig::sampled(3),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }
}
