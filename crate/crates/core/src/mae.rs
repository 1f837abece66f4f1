//! ViT masked autoencoder: patch embedding, encoder over visible tokens,
//! mask-token decoder, reconstruction loss, and a mean-pooled classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masker::MaskPlan;
use crate::numerics::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::patching::{extract, ImageBuffer, PatchGrid};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const TARGET_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            channels: 1,
            patch_size: 16,
            encoder_dim: 192,
            decoder_dim: 96,
            encoder_layers: 4,
            decoder_layers: 4,
            encoder_heads: 4,
            decoder_heads: 4,
            mlp_ratio: 4,
            num_classes: 2,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        PatchGrid::new(self.image_height, self.image_width, self.patch_size)?;
        for (name, dim, heads) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return bad(format!(
                    "{name}_dim {dim} must be a positive multiple of {name}_heads {heads}"
                ));
            }
            if dim % 4 != 0 {
                return bad(format!(
                    "{name}_dim {dim} must be divisible by 4 for 2-D sinusoidal positions"
                ));
            }
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.mlp_ratio == 0 {
            return bad("layer counts and mlp_ratio must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.image_height, self.image_width, self.patch_size)
            .expect("validated config")
    }

    pub fn num_patches(&self) -> usize {
        self.grid().num_patches()
    }

    /// Pixels per patch, `N' * N' * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Whether an encoder trained under `other` can be loaded under `self`.
    pub fn encoder_compatible(&self, other: &ViTConfig) -> Result<()> {
        let pairs = [
            ("image_height", self.image_height, other.image_height),
            ("image_width", self.image_width, other.image_width),
            ("channels", self.channels, other.channels),
            ("patch_size", self.patch_size, other.patch_size),
            ("encoder_dim", self.encoder_dim, other.encoder_dim),
            ("encoder_layers", self.encoder_layers, other.encoder_layers),
            ("encoder_heads", self.encoder_heads, other.encoder_heads),
            ("mlp_ratio", self.mlp_ratio, other.mlp_ratio),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::CheckpointIncompatible(format!(
                    "{name}: checkpoint has {b}, configuration expects {a}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    encoder: Vec<BlockSlots>,
    enc_norm_g: usize,
    enc_norm_b: usize,
    dec_embed_w: usize,
    dec_embed_b: usize,
    mask_token: usize,
    decoder: Vec<BlockSlots>,
    dec_norm_g: usize,
    dec_norm_b: usize,
    rec_w: usize,
    rec_b: usize,
    cls_w: usize,
    cls_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter manifest `(name, shape, init)` in storage order.
fn manifest(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut m = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| m.push((name, shape, init));
    let (e, d, pd) = (cfg.encoder_dim, cfg.decoder_dim, cfg.patch_dim());
    add("patch_embed.weight".into(), vec![pd, e], Init::Normal);
    add("patch_embed.bias".into(), vec![e], Init::Zeros);
    let blocks =
        |prefix: &str, layers: usize, dim: usize, add: &mut dyn FnMut(String, Vec<usize>, Init)| {
            let hidden = dim * cfg.mlp_ratio;
            for l in 0..layers {
                let p = format!("{prefix}.{l}");
                add(format!("{p}.norm1.weight"), vec![dim], Init::Ones);
                add(format!("{p}.norm1.bias"), vec![dim], Init::Zeros);
                add(
                    format!("{p}.attn.qkv.weight"),
                    vec![dim, 3 * dim],
                    Init::Normal,
                );
                add(
                    format!("{p}.attn.proj.weight"),
                    vec![dim, dim],
                    Init::Normal,
                );
                add(format!("{p}.attn.proj.bias"), vec![dim], Init::Zeros);
                add(format!("{p}.norm2.weight"), vec![dim], Init::Ones);
                add(format!("{p}.norm2.bias"), vec![dim], Init::Zeros);
                add(
                    format!("{p}.mlp.fc1.weight"),
                    vec![dim, hidden],
                    Init::Normal,
                );
                add(format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
                add(
                    format!("{p}.mlp.fc2.weight"),
                    vec![hidden, dim],
                    Init::Normal,
                );
                add(format!("{p}.mlp.fc2.bias"), vec![dim], Init::Zeros);
            }
        };
    blocks("encoder.blocks", cfg.encoder_layers, e, &mut add);
    add("encoder.norm.weight".into(), vec![e], Init::Ones);
    add("encoder.norm.bias".into(), vec![e], Init::Zeros);
    add("decoder.embed.weight".into(), vec![e, d], Init::Normal);
    add("decoder.embed.bias".into(), vec![d], Init::Zeros);
    add("decoder.mask_token".into(), vec![1, d], Init::Normal);
    blocks("decoder.blocks", cfg.decoder_layers, d, &mut add);
    add("decoder.norm.weight".into(), vec![d], Init::Ones);
    add("decoder.norm.bias".into(), vec![d], Init::Zeros);
    add("decoder.pred.weight".into(), vec![d, pd], Init::Normal);
    add("decoder.pred.bias".into(), vec![pd], Init::Zeros);
    add("head.weight".into(), vec![e, cfg.num_classes], Init::Normal);
    add("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
    m
}

fn layout(cfg: &ViTConfig) -> Layout {
    // slots follow manifest order exactly
    let mut next = 0usize;
    let mut take = || {
        next += 1;
        next - 1
    };
    let patch_w = take();
    let patch_b = take();
    let block = |take: &mut dyn FnMut() -> usize| BlockSlots {
        ln1_g: take(),
        ln1_b: take(),
        qkv_w: take(),
        proj_w: take(),
        proj_b: take(),
        ln2_g: take(),
        ln2_b: take(),
        fc1_w: take(),
        fc1_b: take(),
        fc2_w: take(),
        fc2_b: take(),
    };
    let encoder = (0..cfg.encoder_layers).map(|_| block(&mut take)).collect();
    let enc_norm_g = take();
    let enc_norm_b = take();
    let dec_embed_w = take();
    let dec_embed_b = take();
    let mask_token = take();
    let decoder = (0..cfg.decoder_layers).map(|_| block(&mut take)).collect();
    Layout {
        patch_w,
        patch_b,
        encoder,
        enc_norm_g,
        enc_norm_b,
        dec_embed_w,
        dec_embed_b,
        mask_token,
        decoder,
        dec_norm_g: take(),
        dec_norm_b: take(),
        rec_w: take(),
        rec_b: take(),
        cls_w: take(),
        cls_b: take(),
    }
}

/// Fixed 2-D sine-cosine table, `[rows * cols, dim]`. The first half of each
/// row encodes the grid row, the second half the grid column.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    out
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Block-wise scaled flattening of an image into `[n_P, patch_dim]`, each
/// row a patch in `(row, col, channel)` order scaled to `[0, 1]`.
pub fn patchify<T: Scalar>(image: &ImageBuffer, grid: &PatchGrid) -> Result<Tensor<T>> {
    let scale = 1.0 / image.levels() as f64;
    let n = grid.num_patches();
    let mut data = Vec::with_capacity(n * grid.patch_size * grid.patch_size * image.channels());
    for k in 0..n {
        let p = extract(image, grid, k)?;
        data.extend(p.pixels.iter().map(|&v| T::of(v as f64 * scale)));
    }
    let pd = data.len() / n;
    Tensor::new(vec![n, pd], data)
}

/// Per-patch standardization used when `normalize_targets` is set.
pub fn normalize_patch_targets<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let pd = patches.shape()[1];
    let mut out = patches.clone();
    for row in out.data_mut().chunks_exact_mut(pd) {
        let n = T::of(pd as f64);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(TARGET_NORM_EPS)).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Reconstruction error over masked patches only (otherwise all patches).
    pub masked_only: bool,
    pub normalize_targets: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            masked_only: true,
            normalize_targets: false,
        }
    }
}

/// Parameters plus the fixed positional tables.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel<T: Scalar> {
    config: ViTConfig,
    params: ParamSet<T>,
    layout: Layout,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
}

/// Parameter handles for one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn at(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> MaeModel<T> {
    /// Truncated-normal projections and mask token, zero biases, unit norms.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in manifest(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal => (0..n)
                    .map(|_| T::of(truncated_normal(&mut rng, INIT_STD)))
                    .collect(),
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ViTConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = manifest(&config);
        if expected.len() != params.len() {
            return Err(Error::CheckpointIncompatible(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected
            .iter()
            .zip(params.names().iter().zip(params.tensors()))
        {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::CheckpointIncompatible(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let grid = config.grid();
        let pos = |dim| {
            let raw = sincos_2d(grid.rows, grid.cols, dim);
            Tensor::new(
                vec![grid.num_patches(), dim],
                raw.into_iter().map(T::of).collect(),
            )
        };
        Ok(Self {
            layout: layout(&config),
            enc_pos: pos(config.encoder_dim)?,
            dec_pos: pos(config.decoder_dim)?,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> MaeModel<U> {
        MaeModel::from_params(self.config.clone(), self.params.cast()).expect("same manifest")
    }

    /// Slots belonging to the classification head.
    pub fn head_slots(&self) -> [usize; 2] {
        [self.layout.cls_w, self.layout.cls_b]
    }

    /// Slots the pretrained encoder contributes to fine-tuning.
    pub fn encoder_slots(&self) -> Vec<usize> {
        let l = &self.layout;
        let mut v = vec![l.patch_w, l.patch_b, l.enc_norm_g, l.enc_norm_b];
        for b in &l.encoder {
            v.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b,
                b.fc2_w, b.fc2_b,
            ]);
        }
        v.sort_unstable();
        v
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.grid()
    }

    pub fn patchify(&self, image: &ImageBuffer) -> Result<Tensor<T>> {
        self.check_image(image)?;
        patchify(image, &self.grid())
    }

    fn check_image(&self, image: &ImageBuffer) -> Result<()> {
        let c = &self.config;
        if image.height() != c.image_height
            || image.width() != c.image_width
            || image.channels() != c.channels
        {
            return Err(Error::shape(
                "patch_embed",
                &[image.height(), image.width(), image.channels()],
                &[c.image_height, c.image_width, c.channels],
            ));
        }
        Ok(())
    }

    /// Records every parameter on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        Bound {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| tape.param(t))
                .collect(),
        }
    }

    fn affine_norm<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, g: Var, b: Var) -> Result<Var> {
        let n = tape.layer_norm(x, 1, LAYER_NORM_EPS)?;
        let n = tape.mul(n, g)?;
        tape.add(n, b)
    }

    fn linear<'a>(&self, tape: &mut Tape<'a, T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        match b {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    fn block<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        s: &BlockSlots,
        x: Var,
        heads: usize,
    ) -> Result<Var> {
        let dim = tape.shape(x)[1];
        let head_dim = dim / heads;
        let h = self.affine_norm(tape, x, p.at(s.ln1_g), p.at(s.ln1_b))?;
        let qkv = self.linear(tape, h, p.at(s.qkv_w), None)?;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let lo = hd * head_dim;
            let q = tape.slice(qkv, 1, lo, lo + head_dim)?;
            let k = tape.slice(qkv, 1, dim + lo, dim + lo + head_dim)?;
            let v = tape.slice(qkv, 1, 2 * dim + lo, 2 * dim + lo + head_dim)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let o = self.linear(tape, o, p.at(s.proj_w), Some(p.at(s.proj_b)))?;
        let x = tape.add(x, o)?;
        let h = self.affine_norm(tape, x, p.at(s.ln2_g), p.at(s.ln2_b))?;
        let h = self.linear(tape, h, p.at(s.fc1_w), Some(p.at(s.fc1_b)))?;
        let h = tape.gelu(h);
        let h = self.linear(tape, h, p.at(s.fc2_w), Some(p.at(s.fc2_b)))?;
        tape.add(x, h)
    }

    /// `[n_P, patch_dim]` pixels to `[n_P, encoder_dim]` tokens with positions.
    pub fn embed_on<'a>(&'a self, tape: &mut Tape<'a, T>, p: &Bound, patches: Var) -> Result<Var> {
        let expect = [self.config.num_patches(), self.config.patch_dim()];
        if tape.shape(patches) != expect {
            return Err(Error::shape("patch_embed", tape.shape(patches), &expect));
        }
        let l = &self.layout;
        let t = self.linear(tape, patches, p.at(l.patch_w), Some(p.at(l.patch_b)))?;
        let pos = tape.constant(self.enc_pos.clone());
        tape.add(t, pos)
    }

    fn encoder_blocks<'a>(&'a self, tape: &mut Tape<'a, T>, p: &Bound, mut x: Var) -> Result<Var> {
        for s in &self.layout.encoder {
            x = self.block(tape, p, s, x, self.config.encoder_heads)?;
        }
        Ok(x)
    }

    /// Encodes only the plan's visible tokens, in ascending index order.
    pub fn encode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        tokens: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let n = tape.shape(tokens)[0];
        if plan.num_patches() != n {
            return Err(Error::InvalidArgument(format!(
                "mask plan covers {} patches but there are {n} tokens",
                plan.num_patches()
            )));
        }
        plan.validate(n)?;
        let x = tape.select_rows(tokens, &plan.visible)?;
        let x = self.encoder_blocks(tape, p, x)?;
        let l = &self.layout;
        self.affine_norm(tape, x, p.at(l.enc_norm_g), p.at(l.enc_norm_b))
    }

    /// Scatters latents back to their positions, fills the rest with the
    /// mask token, and predicts every patch's pixels.
    pub fn decode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        latent: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let n_s = tape.shape(latent)[0];
        if n_s != plan.visible.len() {
            return Err(Error::InvalidArgument(format!(
                "latent has {n_s} tokens but the plan has {} visible patches",
                plan.visible.len()
            )));
        }
        let n_p = self.config.num_patches();
        if plan.num_patches() != n_p {
            return Err(Error::InvalidArgument(format!(
                "mask plan covers {} patches, model expects {n_p}",
                plan.num_patches()
            )));
        }
        let l = &self.layout;
        let y = self.linear(tape, latent, p.at(l.dec_embed_w), Some(p.at(l.dec_embed_b)))?;
        let pool = tape.concat(&[y, p.at(l.mask_token)], 0)?;
        let mut source = vec![n_s; n_p];
        for (i, &k) in plan.visible.iter().enumerate() {
            source[k] = i;
        }
        let x = tape.select_rows(pool, &source)?;
        let pos = tape.constant(self.dec_pos.clone());
        let mut x = tape.add(x, pos)?;
        for s in &self.layout.decoder {
            x = self.block(tape, p, s, x, self.config.decoder_heads)?;
        }
        let x = self.affine_norm(tape, x, p.at(l.dec_norm_g), p.at(l.dec_norm_b))?;
        self.linear(tape, x, p.at(l.rec_w), Some(p.at(l.rec_b)))
    }

    /// Mean squared error between `pred` and `target` patches.
    pub fn reconstruction_loss_on<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        pred: Var,
        target: &Tensor<T>,
        plan: &MaskPlan,
        opts: LossOptions,
    ) -> Result<Var> {
        if tape.shape(pred) != target.shape() {
            return Err(Error::shape(
                "reconstruction_loss",
                tape.shape(pred),
                target.shape(),
            ));
        }
        let target = if opts.normalize_targets {
            normalize_patch_targets(target)
        } else {
            target.clone()
        };
        let rows: Vec<usize> = if opts.masked_only {
            if plan.masked.is_empty() {
                return Err(Error::DegeneratePlan(
                    "reconstruction loss over masked patches needs at least one masked patch"
                        .into(),
                ));
            }
            plan.masked.clone()
        } else {
            (0..plan.num_patches()).collect()
        };
        let pd = target.shape()[1];
        let mut t = Vec::with_capacity(rows.len() * pd);
        for &r in &rows {
            t.extend_from_slice(&target.data()[r * pd..(r + 1) * pd]);
        }
        let tv = tape.constant(Tensor::new(vec![rows.len(), pd], t)?);
        let pv = tape.select_rows(pred, &rows)?;
        tape.mse_loss(pv, tv)
    }

    /// Full pretraining objective for one image's patches.
    pub fn pretrain_loss_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        patches: &Tensor<T>,
        plan: &MaskPlan,
        opts: LossOptions,
    ) -> Result<Var> {
        let x = tape.constant(patches.clone());
        let tokens = self.embed_on(tape, p, x)?;
        let latent = self.encode_on(tape, p, tokens, plan)?;
        let pred = self.decode_on(tape, p, latent, plan)?;
        self.reconstruction_loss_on(tape, pred, patches, plan, opts)
    }

    /// Logits `[1, num_classes]` from all tokens, mean pooled then normed.
    pub fn classify_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        patches: Var,
    ) -> Result<Var> {
        let tokens = self.embed_on(tape, p, patches)?;
        let x = self.encoder_blocks(tape, p, tokens)?;
        let pooled = tape.mean_axis(x, 0)?;
        let l = &self.layout;
        let normed = self.affine_norm(tape, pooled, p.at(l.enc_norm_g), p.at(l.enc_norm_b))?;
        self.linear(tape, normed, p.at(l.cls_w), Some(p.at(l.cls_b)))
    }

    fn collect_grads(&self, grads: &crate::numerics::Gradients<T>, p: &Bound) -> Vec<Vec<T>> {
        p.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect()
    }

    /// Reconstruction loss and parameter gradients for one image.
    pub fn pretrain_grads(
        &self,
        patches: &Tensor<T>,
        plan: &MaskPlan,
        opts: LossOptions,
    ) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let loss = self.pretrain_loss_on(&mut tape, &p, patches, plan, opts)?;
        let grads = tape.backward(loss)?;
        Ok((tape.item(loss), self.collect_grads(&grads, &p)))
    }

    /// Cross-entropy and parameter gradients for one labeled image.
    pub fn classify_grads(&self, patches: &Tensor<T>, label: usize) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.constant(patches.clone());
        let logits = self.classify_on(&mut tape, &p, x)?;
        let loss = tape.cross_entropy_loss(logits, &[label])?;
        let grads = tape.backward(loss)?;
        Ok((tape.item(loss), self.collect_grads(&grads, &p)))
    }

    /// Token sequence `[n_P, encoder_dim]`.
    pub fn patch_embed(&self, image: &ImageBuffer) -> Result<Tensor<T>> {
        let patches = self.patchify(image)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.constant(patches);
        let t = self.embed_on(&mut tape, &p, x)?;
        Ok(tape.tensor(t))
    }

    /// Latent `[n_S, encoder_dim]` for a token sequence.
    pub fn encode(&self, tokens: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.constant(tokens.clone());
        let z = self.encode_on(&mut tape, &p, x, plan)?;
        Ok(tape.tensor(z))
    }

    /// Reconstructed patches `[n_P, patch_dim]`.
    pub fn decode(&self, latent: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.constant(latent.clone());
        let y = self.decode_on(&mut tape, &p, x, plan)?;
        Ok(tape.tensor(y))
    }

    pub fn reconstruction_loss(
        &self,
        pred: &Tensor<T>,
        image: &ImageBuffer,
        plan: &MaskPlan,
        opts: LossOptions,
    ) -> Result<T> {
        let target = self.patchify(image)?;
        let mut tape = Tape::new();
        let pv = tape.constant(pred.clone());
        let l = self.reconstruction_loss_on(&mut tape, pv, &target, plan, opts)?;
        Ok(tape.item(l))
    }

    /// Masked reconstruction error of `image` under `plan`.
    pub fn evaluate_reconstruction(
        &self,
        image: &ImageBuffer,
        plan: &MaskPlan,
        opts: LossOptions,
    ) -> Result<T> {
        let patches = self.patchify(image)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let l = self.pretrain_loss_on(&mut tape, &p, &patches, plan, opts)?;
        Ok(tape.item(l))
    }

    /// Class logits for one image.
    pub fn classify_forward(&self, image: &ImageBuffer) -> Result<Vec<T>> {
        if self.config.num_classes < 2 {
            return Err(Error::InvalidArgument(
                "classification needs at least 2 classes".into(),
            ));
        }
        let patches = self.patchify(image)?;
        self.classify_patches(&patches)
    }

    pub fn classify_patches(&self, patches: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.constant(patches.clone());
        let logits = self.classify_on(&mut tape, &p, x)?;
        Ok(tape.value(logits).to_vec())
    }
}

/// Numerically stable softmax of a logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
