//! Pretraining and fine-tuning loops plus evaluation.

pub mod metrics;

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use metrics::{compute_metrics, export_pr_curve, Metrics, PrCurve, PrPoint};

use crate::dataio::DatasetContainer;
use crate::error::{Error, Result};
use crate::mae::{softmax, LossOptions, MaeModel, ViTConfig};
use crate::masker::{self, MaskPlan, MaskPolicy};
use crate::numerics::optim::default_warmup;
use crate::numerics::{lr_schedule, AdamWState, Tensor};
use crate::patching::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Training hyperparameters. Model widths live here too so a single flat
/// configuration file describes a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Defaults to 10% of `epochs` when absent.
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub q: f64,
    pub s: u32,
    pub policy: MaskPolicy,
    pub seed: u64,
    pub normalize_targets: bool,
    /// Reconstruction loss over every patch instead of masked ones only.
    pub loss_on_all_patches: bool,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// 200 epochs, lr 1.5e-4, weight decay 0.05, mask ratio 0.75.
    pub fn pretrain() -> Self {
        let vit = ViTConfig::default();
        Self {
            stage: Stage::Pretrain,
            epochs: 200,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            warmup_epochs: None,
            batch_size: 32,
            mask_ratio: masker::DEFAULT_MASK_RATIO,
            q: masker::DEFAULT_Q,
            s: masker::DEFAULT_SPACING,
            policy: MaskPolicy::Multifractal,
            seed: 0,
            normalize_targets: false,
            loss_on_all_patches: false,
            patch_size: vit.patch_size,
            encoder_dim: vit.encoder_dim,
            decoder_dim: vit.decoder_dim,
            encoder_layers: vit.encoder_layers,
            decoder_layers: vit.decoder_layers,
            encoder_heads: vit.encoder_heads,
            decoder_heads: vit.decoder_heads,
            mlp_ratio: vit.mlp_ratio,
            grad_clip: None,
        }
    }

    /// 100 epochs, lr 1e-3, weight decay 0.5.
    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 100,
            base_lr: 1e-3,
            weight_decay: 0.5,
            ..Self::pretrain()
        }
    }

    pub fn defaults_for(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| default_warmup(self.epochs))
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            masked_only: !self.loss_on_all_patches,
            normalize_targets: self.normalize_targets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return bad("base_lr must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1]");
        }
        if self.s == 0 {
            return bad("s must be positive");
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.epochs > 0 && self.warmup() >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        Ok(())
    }

    /// Model shape for images of the given size.
    pub fn vit_config(
        &self,
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
    ) -> ViTConfig {
        ViTConfig {
            image_height: height,
            image_width: width,
            channels,
            patch_size: self.patch_size,
            encoder_dim: self.encoder_dim,
            decoder_dim: self.decoder_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            encoder_heads: self.encoder_heads,
            decoder_heads: self.decoder_heads,
            mlp_ratio: self.mlp_ratio,
            num_classes,
        }
    }
}

/// In-memory labeled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<ImageBuffer>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            let dims = (first.height(), first.width(), first.channels());
            if let Some(img) = images
                .iter()
                .find(|i| (i.height(), i.width(), i.channels()) != dims)
            {
                return Err(Error::shape(
                    "dataset",
                    &[dims.0, dims.1, dims.2],
                    &[img.height(), img.width(), img.channels()],
                ));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn from_container(c: &DatasetContainer) -> Result<Self> {
        Self::new(
            c.images()?,
            c.labels.iter().map(|&l| l as usize).collect(),
            c.num_classes,
        )
    }

    pub fn to_container(&self) -> Result<DatasetContainer> {
        let labels: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        DatasetContainer::from_images(&self.images, &labels, self.num_classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn dims(&self) -> (usize, usize, usize) {
        let f = &self.images[0];
        (f.height(), f.width(), f.channels())
    }
}

/// Everything a pretraining run produced.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: MaeModel<f32>,
    /// Mean reconstruction loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// SHA-256 over every mask plan used, in use order.
    pub plan_digest: String,
    /// SHA-256 over the per-epoch sample order.
    pub order_digest: String,
    /// SHA-256 over the initial parameters.
    pub init_digest: String,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: MaeModel<f32>,
    pub epoch_losses: Vec<f64>,
}

/// Hex SHA-256 of the parameter payload.
pub fn params_digest(model: &MaeModel<f32>) -> String {
    let mut h = Sha256::new();
    for t in model.params().tensors() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn content_key(image: &ImageBuffer) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((image.height() as u64).to_le_bytes());
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.channels() as u64).to_le_bytes());
    h.update(image.data());
    h.finalize().into()
}

/// Per-image seed for random plans.
fn plan_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Entropy-based plans depend only on pixels, so they are computed once per
/// distinct image.
fn entropy_plans(images: &[ImageBuffer], cfg: &TrainConfig) -> Result<Vec<MaskPlan>> {
    let keys: Vec<[u8; 32]> = images.par_iter().map(content_key).collect();
    let mut first_seen: HashMap<[u8; 32], usize> = HashMap::new();
    let mut unique = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        first_seen.entry(*k).or_insert_with(|| {
            unique.push(i);
            i
        });
    }
    let computed: Vec<MaskPlan> = unique
        .par_iter()
        .map(|&i| {
            masker::plan_for_image(
                &images[i],
                cfg.patch_size,
                cfg.policy,
                cfg.mask_ratio,
                cfg.q,
                cfg.s,
                cfg.seed,
            )
        })
        .collect::<Result<_>>()?;
    let by_index: HashMap<usize, &MaskPlan> = unique.iter().copied().zip(&computed).collect();
    Ok(keys
        .iter()
        .map(|k| by_index[&first_seen[k]].clone())
        .collect())
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn mean_grads(parts: Vec<(f32, Vec<Vec<f32>>)>) -> (f64, Vec<Vec<f32>>) {
    let n = parts.len() as f32;
    let mut iter = parts.into_iter();
    let (l0, mut acc) = iter.next().expect("non-empty batch");
    let mut loss = l0 as f64;
    for (l, g) in iter {
        loss += l as f64;
        for (a, b) in acc.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    (loss / n as f64, acc)
}

/// Scales `grads` in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = (max / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

fn log_epoch(log: &mut dyn Write, epoch: usize, lr: f64, loss: f64) -> Result<()> {
    writeln!(log, "epoch={epoch} lr={lr} loss={loss}").map_err(|e| Error::io("<log>", e))
}

/// Masked-autoencoder pretraining.
pub fn pretrain(
    dataset: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "pretraining dataset is empty".into(),
        ));
    }
    if cfg.stage != Stage::Pretrain {
        return Err(Error::InvalidArgument(
            "pretrain called with a fine-tune configuration".into(),
        ));
    }
    cfg.validate()?;
    let (h, w, c) = dataset.dims();
    let vit = cfg.vit_config(h, w, c, dataset.num_classes.max(2));
    let mut model = MaeModel::<f32>::init(vit, cfg.seed)?;
    let init_digest = params_digest(&model);
    let patches: Vec<Tensor<f32>> = dataset
        .images
        .par_iter()
        .map(|img| model.patchify(img))
        .collect::<Result<_>>()?;
    let cached = match cfg.policy {
        MaskPolicy::Random => None,
        _ => Some(entropy_plans(&dataset.images, cfg)?),
    };
    let n_p = model.config().num_patches();
    let opts = cfg.loss_options();
    let mut opt = AdamWState::new(model.params(), cfg.base_lr, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F0D_E55E_0001);
    let mut plan_hash = Sha256::new();
    let mut order_hash = Sha256::new();
    if let Some(plans) = &cached {
        for p in plans {
            plan_hash.update(p.to_string().as_bytes());
        }
    }
    let warmup = cfg.warmup();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.base_lr, epoch, cfg.epochs, warmup);
        opt.lr = lr;
        let order = shuffled(&mut order_rng, dataset.len());
        for i in &order {
            order_hash.update((*i as u64).to_le_bytes());
        }
        let plans: Vec<MaskPlan> = match &cached {
            Some(p) => order.iter().map(|&i| p[i].clone()).collect(),
            None => order
                .iter()
                .map(|&i| masker::random_mask(n_p, cfg.mask_ratio, plan_seed(cfg.seed, epoch, i)))
                .collect::<Result<_>>()?,
        };
        if cached.is_none() {
            for p in &plans {
                plan_hash.update(p.to_string().as_bytes());
            }
        }
        let mut total = 0.0;
        for (batch, batch_plans) in order
            .chunks(cfg.batch_size)
            .zip(plans.chunks(cfg.batch_size))
        {
            let parts = batch
                .par_iter()
                .zip(batch_plans.par_iter())
                .map(|(&i, plan)| model.pretrain_grads(&patches[i], plan, opts))
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grads) = mean_grads(parts);
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDivergence { epoch, step, loss });
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            total += loss * batch.len() as f64;
            opt.step(model.params_mut(), &grads)?;
            step += 1;
        }
        let mean = total / dataset.len() as f64;
        log_epoch(log, epoch, lr, mean)?;
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome {
        model,
        epoch_losses,
        plan_digest: hex::encode(plan_hash.finalize()),
        order_digest: hex::encode(order_hash.finalize()),
        init_digest,
    })
}

/// Loads the pretrained encoder into a model with a fresh classifier head
/// sized for `num_classes`.
pub fn prepare_finetune(
    pretrained: &MaeModel<f32>,
    cfg: &TrainConfig,
    num_classes: usize,
) -> Result<MaeModel<f32>> {
    let src = pretrained.config();
    let wanted = cfg.vit_config(src.image_height, src.image_width, src.channels, num_classes);
    wanted.encoder_compatible(src)?;
    let vit = ViTConfig {
        decoder_dim: src.decoder_dim,
        decoder_layers: src.decoder_layers,
        decoder_heads: src.decoder_heads,
        num_classes,
        ..wanted
    };
    let mut model = MaeModel::<f32>::init(vit, cfg.seed)?;
    let head = model.head_slots();
    for slot in 0..model.params().len() {
        if head.contains(&slot) {
            continue;
        }
        let name = model.params().names()[slot].clone();
        let from = pretrained.params().find(&name).ok_or_else(|| {
            Error::CheckpointIncompatible(format!("checkpoint lacks parameter {name}"))
        })?;
        let t = pretrained.params().get(from).clone();
        if t.shape() != model.params().get(slot).shape() {
            return Err(Error::CheckpointIncompatible(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                model.params().get(slot).shape()
            )));
        }
        *model.params_mut().get_mut(slot) = t;
    }
    Ok(model)
}

/// Supervised fine-tuning of the whole network with cross-entropy.
pub fn finetune(
    pretrained: &MaeModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<FinetuneOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "fine-tuning dataset is empty".into(),
        ));
    }
    if cfg.stage != Stage::Finetune {
        return Err(Error::InvalidArgument(
            "finetune called with a pretraining configuration".into(),
        ));
    }
    cfg.validate()?;
    if dataset.num_classes < 2 {
        return Err(Error::Data(format!(
            "fine-tuning needs at least 2 classes, dataset declares {}",
            dataset.num_classes
        )));
    }
    if let Some(&l) = dataset.labels.iter().find(|&&l| l >= dataset.num_classes) {
        return Err(Error::Data(format!("label {l} out of range")));
    }
    let mut model = prepare_finetune(pretrained, cfg, dataset.num_classes)?;
    let patches: Vec<Tensor<f32>> = dataset
        .images
        .par_iter()
        .map(|img| model.patchify(img))
        .collect::<Result<_>>()?;
    let mut opt = AdamWState::new(model.params(), cfg.base_lr, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F0D_E55E_0002);
    let warmup = cfg.warmup();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.base_lr, epoch, cfg.epochs, warmup);
        opt.lr = lr;
        let order = shuffled(&mut order_rng, dataset.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&i| model.classify_grads(&patches[i], dataset.labels[i]))
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grads) = mean_grads(parts);
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDivergence { epoch, step, loss });
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            total += loss * batch.len() as f64;
            opt.step(model.params_mut(), &grads)?;
            step += 1;
        }
        let mean = total / dataset.len() as f64;
        log_epoch(log, epoch, lr, mean)?;
        epoch_losses.push(mean);
    }
    Ok(FinetuneOutcome {
        model,
        epoch_losses,
    })
}

/// Softmax class probabilities for every sample, in dataset order.
pub fn predict_proba(model: &MaeModel<f32>, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .images
        .par_iter()
        .map(|img| Ok(softmax(&model.classify_forward(img)?)))
        .collect()
}

pub fn evaluate(model: &MaeModel<f32>, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let k = model.config().num_classes;
    if dataset.num_classes > k {
        return Err(Error::Data(format!(
            "dataset has {} classes, model predicts {k}",
            dataset.num_classes
        )));
    }
    let probs = predict_proba(model, dataset)?;
    compute_metrics(&probs, &dataset.labels, k)
}
