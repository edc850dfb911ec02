//! Alternating Re-ID / reconstruction training.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FtnModel, ModelConfig};
use crate::data::{pk_sample, Augment, Batch, ImageSet};
use crate::error::{arg_err, io_err, Result};
use crate::losses::{total_loss_var, GradientMapMode, LossParts, LossWeights, TRIPLET_MARGIN};
use crate::masks::ReconStrategy;
use crate::nn::Mode;
use crate::tensor::{load_checkpoint, save_checkpoint, Adam, Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseKind {
    Reid,
    Recon,
}

/// Whether the triplet loss sees the concatenated embedding or each branch
/// separately (averaged).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletMode {
    #[default]
    Concatenated,
    PerBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    pub lr0: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// `E`, identities per batch.
    pub ids_per_batch: usize,
    /// `M`, instances per identity.
    pub instances_per_id: usize,
    pub group_size: usize,
    pub reid_weights: LossWeights,
    pub recon_weights: LossWeights,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 3,
            epochs: 50,
            max_steps: None,
            lr0: 3.5e-4,
            lr_milestones: vec![30, 45],
            lr_decay: 0.1,
            ids_per_batch: 4,
            instances_per_id: 4,
            group_size: 3,
            reid_weights: LossWeights::REID,
            recon_weights: LossWeights::RECON,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.ids_per_batch < 2 || self.instances_per_id < 2 {
            return arg_err("schedule needs a positive group size and batches of at least 2×2");
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0) {
            return arg_err("learning rate and decay must be positive");
        }
        self.reid_weights.validate()?;
        self.recon_weights.validate()
    }

    /// Position of global batch `k` within its group.
    pub fn phase(&self, k: usize) -> usize {
        k % self.group_size
    }

    /// The last batch of each group reconstructs; the others train Re-ID.
    pub fn phase_kind(&self, k: usize) -> PhaseKind {
        if self.phase(k) + 1 == self.group_size {
            PhaseKind::Recon
        } else {
            PhaseKind::Reid
        }
    }

    pub fn weights(&self, k: usize) -> LossWeights {
        match self.phase_kind(k) {
            PhaseKind::Reid => self.reid_weights,
            PhaseKind::Recon => self.recon_weights,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.instances_per_id
    }

    pub fn steps_per_epoch(&self, num_images: usize) -> usize {
        (num_images / self.batch_size()).max(1)
    }

    pub fn total_steps(&self, num_images: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(num_images);
        self.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn epoch_of(&self, step: usize, num_images: usize) -> usize {
        step / self.steps_per_epoch(num_images)
    }

    pub fn lr_at(&self, step: usize, num_images: usize) -> f64 {
        let epoch = self.epoch_of(step, num_images);
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr0 * self.lr_decay.powi(passed as i32)
    }

    pub fn in_warmup(&self, step: usize, num_images: usize) -> bool {
        self.epoch_of(step, num_images) < self.warmup_epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `num_classes` is overwritten by the training set.
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub triplet: TripletMode,
    pub margin: f64,
    pub gradient_maps: GradientMapMode,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            triplet: TripletMode::Concatenated,
            margin: TRIPLET_MARGIN,
            gradient_maps: GradientMapMode::ChannelSum,
            augment: Augment::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub phase: usize,
    pub weights: LossWeights,
    /// Parameters the optimizer stepped.
    pub updated: Vec<ParamId>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub phase: usize,
    pub loss: f64,
    pub lr: f64,
}

fn active_params(model: &FtnModel, kind: PhaseKind, warmup: bool) -> BTreeSet<ParamId> {
    let g = model.groups();
    let mut on: BTreeSet<ParamId> = match kind {
        PhaseKind::Reid => g.encoder(5).into_iter().chain(g.local).chain(g.cfa.iter().copied()).chain(g.heads.iter().copied()).collect(),
        PhaseKind::Recon => {
            let mut s: BTreeSet<ParamId> = g.encoder(4).into_iter().chain(g.decoder).collect();
            if model.cfg.decoder_input == super::DecoderInput::Cfa {
                s.extend(g.cfa.iter().copied());
            }
            s
        }
    };
    if warmup {
        let allowed: BTreeSet<ParamId> = g.heads.into_iter().chain(g.cfa).collect();
        on.retain(|p| allowed.contains(p));
    }
    on
}

/// Runs one optimizer step on global batch `k`.
///
/// Only the parameters on the current phase's path (restricted to heads and
/// CFA during warm-up) take gradients and Adam updates. A model without a
/// decoder skips reconstruction batches entirely.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &FtnModel,
    ps: &mut ParamStore<T>,
    adam: &Adam,
    batch: &Batch<T>,
    k: usize,
    cfg: &TrainConfig,
    strategy: ReconStrategy,
    lr: f64,
    warmup: bool,
) -> Result<StepOutcome> {
    let s = &cfg.schedule;
    let (phase, kind) = (s.phase(k), s.phase_kind(k));
    let mut weights = s.weights(k);
    if kind == PhaseKind::Recon && !strategy.uses_gradient_loss() {
        weights.gradient = 0.0;
    }
    if kind == PhaseKind::Recon && model.decoder.is_none() {
        return Ok(StepOutcome { loss: 0.0, phase, weights, updated: Vec::new() });
    }

    let active = active_params(model, kind, warmup);
    let ids: Vec<ParamId> = ps.ids().collect();
    for &id in &ids {
        ps.set_requires_grad(id, active.contains(&id));
    }
    let result = (|| {
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let parts = match kind {
            PhaseKind::Reid => {
                let out = model.forward_reid(&mut g, ps, x, Mode::Train)?;
                let ce_terms = out.logits.iter().map(|&l| g.cross_entropy(l, &batch.labels).map(|v| (v, 1.0))).collect::<Result<Vec<_>>>()?;
                let ce = g.weighted_sum(&ce_terms)?;
                let triplet = match cfg.triplet {
                    TripletMode::Concatenated => {
                        let cat = g.concat(&out.embeddings, 1)?;
                        g.hard_triplet(cat, &batch.ids, cfg.margin)?
                    }
                    TripletMode::PerBranch => {
                        let terms = out.embeddings.iter().map(|&e| g.hard_triplet(e, &batch.ids, cfg.margin).map(|v| (v, 1.0 / 3.0))).collect::<Result<Vec<_>>>()?;
                        g.weighted_sum(&terms)?
                    }
                };
                LossParts { ce: Some(ce), triplet: Some(triplet), gradient: None, l1: None }
            }
            PhaseKind::Recon => {
                let out = model.forward_recon(&mut g, ps, x, Mode::Train, strategy)?;
                let gradient = if weights.gradient != 0.0 { Some(g.gradient_loss(out.recon, &out.target, cfg.gradient_maps)?) } else { None };
                let l1 = g.l1_loss(out.recon, &out.target)?;
                LossParts { ce: None, triplet: None, gradient, l1: Some(l1) }
            }
        };
        let loss: Var = total_loss_var(&mut g, &parts, &weights)?;
        let value = g.value(loss).item().f64();
        let updated = if g.requires_grad(loss) {
            g.backward(loss)?;
            ps.zero_grads();
            ps.absorb_grads(&g);
            adam.step_with_grads(ps, lr)
        } else {
            Vec::new()
        };
        Ok(StepOutcome { loss: value, phase, weights, updated })
    })();
    for &id in &ids {
        ps.set_requires_grad(id, true);
    }
    result
}

/// Sets the decoder's output bias to the logit of the median reconstruction
/// target over the first `CALIBRATION_IMAGES` of `images`, so the sigmoid
/// starts at the target's intensity level rather than at 0.5. Runs on a copy
/// of the store; batch-norm statistics are left as they were. Returns the
/// median, or `None` without a decoder.
pub fn calibrate_decoder_bias<T: Real>(model: &FtnModel, ps: &mut ParamStore<T>, images: &Tensor<T>, strategy: ReconStrategy) -> Result<Option<f64>> {
    const CALIBRATION_IMAGES: usize = 16;
    let Some(decoder) = &model.decoder else { return Ok(None) };
    let n = images.shape().first().copied().unwrap_or(0).min(CALIBRATION_IMAGES);
    if n == 0 {
        return arg_err("no images to calibrate the decoder on");
    }
    let mut scratch = ps.clone();
    let mut g = Graph::new();
    let x = g.constant(images.narrow_batch(0, n)?);
    let out = model.forward_recon(&mut g, &mut scratch, x, Mode::Train, strategy)?;
    let mut t = out.target.to_f64_vec();
    t.sort_by(f64::total_cmp);
    let median = t[t.len() / 2];
    let p = median.clamp(1e-3, 1.0 - 1e-3);
    if let Some(bias) = decoder.tail.bias {
        ps.param_mut(bias).value.data_mut().fill(T::of((p / (1.0 - p)).ln()));
    }
    Ok(Some(median))
}

/// Trains `model` on `set` for the scheduled number of steps. Batches come
/// from a generator seeded with `seed`; `on_step` sees every log row.
pub fn train<T: Real>(
    model: &FtnModel,
    ps: &mut ParamStore<T>,
    set: &ImageSet<T>,
    cfg: &TrainConfig,
    strategy: ReconStrategy,
    seed: u64,
    mut on_step: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>> {
    cfg.schedule.validate()?;
    if strategy.uses_cfa() != model.cfg.use_cfa {
        return arg_err(format!("strategy {strategy} does not match a model with use_cfa = {}", model.cfg.use_cfa));
    }
    let s = &cfg.schedule;
    let n = set.len();
    let adam = Adam::default();
    calibrate_decoder_bias(model, ps, &set.images, strategy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut log = Vec::new();
    for k in 0..s.total_steps(n) {
        let batch = pk_sample(set, s.ids_per_batch, s.instances_per_id, &cfg.augment, &mut rng)?;
        let lr = s.lr_at(k, n);
        let out = train_step(model, ps, &adam, &batch, k, cfg, strategy, lr, s.in_warmup(k, n))?;
        let row = TrainLogRow { step: k, phase: out.phase, loss: out.loss, lr };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Writes the checkpoint and, next to it, the model configuration as
/// `<path>.config.json`.
pub fn save_model<T: Real>(path: &Path, model: &FtnModel, ps: &ParamStore<T>) -> Result<()> {
    save_checkpoint(path, &ps.named_tensors())?;
    let cfg_path = sidecar(path);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&model.cfg)?).map_err(io_err(&cfg_path))
}

pub fn load_model<T: Real>(path: &Path) -> Result<(FtnModel, ParamStore<T>)> {
    let cfg_path = sidecar(path);
    let text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    let (model, mut ps) = FtnModel::new::<T>(cfg, 0)?;
    ps.load_named(&load_checkpoint(path)?)?;
    Ok((model, ps))
}
