//! Image encoder, reconstruction decoder, text encoder and projection heads.
//!
//! All token sequences of a batch are stacked into one `[B·T, C]` matrix so
//! every dense layer runs as a single matrix product; attention and pooling
//! treat each block of `T` rows as one sequence.

mod transformer;
mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use transformer::{gather_table, sincos_1d, sincos_2d, truncated_normal, Block, LayerNorm, Linear};
pub use vocab::{split_words, tokenize, Vocabulary, CLS, PAD, UNK};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::patching::{downsample, partition, Image, MaskPlan, PatchGrid};

/// Image geometry. `patch_size` is measured on the full-resolution image; the
/// encoder sees patches of `patch_size / downsample_ratio` pixels cut from
/// the downsampled image, and the decoder predicts full-resolution patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub image_side: usize,
    pub patch_size: usize,
    pub downsample_ratio: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_size: 8,
            downsample_ratio: 2,
        }
    }
}

impl Geometry {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// `N`, the number of patches per image.
    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn lr_side(&self) -> usize {
        self.image_side / self.downsample_ratio
    }

    pub fn lr_patch_size(&self) -> usize {
        self.patch_size / self.downsample_ratio
    }

    pub fn lr_patch_dim(&self) -> usize {
        self.lr_patch_size() * self.lr_patch_size()
    }

    pub fn hr_patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_ratio == 0 {
            return Err(Error::config("geometry.downsample_ratio", "must be at least 1"));
        }
        if self.patch_size == 0 || self.patch_size % self.downsample_ratio != 0 {
            return Err(Error::config(
                "geometry.patch_size",
                format!(
                    "{} must be a positive multiple of the downsample ratio {}",
                    self.patch_size, self.downsample_ratio
                ),
            ));
        }
        if self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::config(
                "geometry.image_side",
                format!("{} is not divisible by patch size {}", self.image_side, self.patch_size),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Sinusoidal,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 1,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

/// Text encoder shape; its width is shared with the image encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            max_len: 24,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub image: ImageEncoderConfig,
    pub decoder: DecoderConfig,
    pub text: TextEncoderConfig,
    /// Width of the joint embedding space.
    pub embed_dim: usize,
    pub projection_bias: bool,
    pub positional: Positional,
    /// Std of the mask token and of learned position tables.
    pub init_std: f64,
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            image: ImageEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            text: TextEncoderConfig::default(),
            embed_dim: 64,
            projection_bias: false,
            positional: Positional::Sinusoidal,
            init_std: 0.02,
            tau_init: 0.03,
        }
    }
}

/// Bounds applied to the learnable temperature.
pub const TAU_MIN: f64 = 1e-4;
pub const TAU_MAX: f64 = 10.0;

fn check_heads(field: &str, width: usize, heads: usize) -> Result<()> {
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::config(
            field,
            format!("width {width} must be a positive multiple of {heads} heads"),
        ));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        check_heads("image.heads", self.image.width, self.image.heads)?;
        check_heads("decoder.heads", self.decoder.width, self.decoder.heads)?;
        check_heads("text.heads", self.image.width, self.text.heads)?;
        if self.image.mlp_ratio == 0 || self.decoder.mlp_ratio == 0 || self.text.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be at least 1"));
        }
        if self.text.max_len < 2 {
            return Err(Error::config("text.max_len", "must hold [cls] and one word"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std", "must be positive"));
        }
        if !(self.tau_init >= TAU_MIN && self.tau_init <= TAU_MAX) {
            return Err(Error::config(
                "tau_init",
                format!("must lie in [{TAU_MIN}, {TAU_MAX}], got {}", self.tau_init),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    img_embed: Linear,
    img_pos: Option<ParamId>,
    img_blocks: Vec<Block>,
    img_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_pos: Option<ParamId>,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    dec_pred: Linear,
    tok_embed: ParamId,
    text_pos: Option<ParamId>,
    text_blocks: Vec<Block>,
    text_norm: LayerNorm,
    proj_image: Linear,
    proj_text: Linear,
    importance: ParamId,
    log_tau: ParamId,
}

/// All learnable state plus the fixed tables derived from the config.
#[derive(Clone, Debug)]
pub struct MacoModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    layout: Layout,
    img_pos_table: Tensor,
    dec_pos_table: Tensor,
    text_pos_table: Tensor,
}

/// Parameter groups for per-group gradient reporting.
pub const PARAM_GROUPS: [&str; 6] = ["image.", "decoder.", "text.", "proj.", "importance.", "log_tau"];

impl MacoModel {
    /// Fresh model: Xavier-uniform linear weights, unit-variance token
    /// embeddings, zero biases, unit norms, uniform (zero) importance weights
    /// and `log τ = ln(tau_init)`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        vocab.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let g = config.geometry;
        let n = g.n_patches();
        let c = config.image.width;
        let cd = config.decoder.width;
        let std = config.init_std;
        let learned = config.positional == Positional::Learned;
        let pos_param = |s: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Result<Option<ParamId>> {
            if !learned {
                return Ok(None);
            }
            let t = Tensor::new(vec![rows, cols], truncated_normal(rng, rows * cols, std))?;
            Ok(Some(s.insert(name, t, false)?))
        };

        let img_embed = Linear::new(&mut s, "image.patch_embed", g.lr_patch_dim(), c, true, &mut rng)?;
        let img_pos = pos_param(&mut s, "image.pos_embed", n, c, &mut rng)?;
        let img_blocks = (0..config.image.depth)
            .map(|i| Block::new(&mut s, &format!("image.blocks.{i}"), c, config.image.heads, config.image.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let img_norm = LayerNorm::new(&mut s, "image.norm", c)?;

        let dec_embed = Linear::new(&mut s, "decoder.embed", c, cd, true, &mut rng)?;
        let mask_token = s.insert(
            "decoder.mask_token",
            Tensor::new(vec![1, cd], truncated_normal(&mut rng, cd, std))?,
            false,
        )?;
        let dec_pos = pos_param(&mut s, "decoder.pos_embed", n, cd, &mut rng)?;
        let dec_blocks = (0..config.decoder.depth)
            .map(|i| Block::new(&mut s, &format!("decoder.blocks.{i}"), cd, config.decoder.heads, config.decoder.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&mut s, "decoder.norm", cd)?;
        let dec_pred = Linear::new(&mut s, "decoder.pred", cd, g.hr_patch_dim(), true, &mut rng)?;

        let tok_embed = s.insert(
            "text.token_embed",
            Tensor::new(vec![vocab.len(), c], truncated_normal(&mut rng, vocab.len() * c, 1.0))?,
            true,
        )?;
        let text_pos = pos_param(&mut s, "text.pos_embed", config.text.max_len, c, &mut rng)?;
        let text_blocks = (0..config.text.depth)
            .map(|i| Block::new(&mut s, &format!("text.blocks.{i}"), c, config.text.heads, config.text.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let text_norm = LayerNorm::new(&mut s, "text.norm", c)?;

        let proj_image = Linear::new(&mut s, "proj.image", c, config.embed_dim, config.projection_bias, &mut rng)?;
        let proj_text = Linear::new(&mut s, "proj.text", c, config.embed_dim, config.projection_bias, &mut rng)?;
        let importance = s.insert("importance.weight", Tensor::zeros(&[n, 1]), true)?;
        let log_tau = s.insert("log_tau", Tensor::scalar(config.tau_init.ln()), false)?;

        Ok(Self {
            img_pos_table: sincos_2d(g.grid_side(), c),
            dec_pos_table: sincos_2d(g.grid_side(), cd),
            text_pos_table: sincos_1d(config.text.max_len, c),
            config,
            vocab,
            params: s,
            layout: Layout {
                img_embed,
                img_pos,
                img_blocks,
                img_norm,
                dec_embed,
                mask_token,
                dec_pos,
                dec_blocks,
                dec_norm,
                dec_pred,
                tok_embed,
                text_pos,
                text_blocks,
                text_norm,
                proj_image,
                proj_text,
                importance,
                log_tau,
            },
        })
    }

    pub fn n_patches(&self) -> usize {
        self.config.geometry.n_patches()
    }

    pub fn width(&self) -> usize {
        self.config.image.width
    }

    pub fn importance_id(&self) -> ParamId {
        self.layout.importance
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.layout.log_tau
    }

    /// Current importance-head weights, one per patch position.
    pub fn importance_weights(&self) -> &[f64] {
        self.params.value(self.layout.importance).data()
    }

    /// Current (clamped) contrastive temperature.
    pub fn tau(&self) -> f64 {
        self.params
            .value(self.layout.log_tau)
            .item()
            .clamp(TAU_MIN.ln(), TAU_MAX.ln())
            .exp()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }

    /// `τ = exp(clamp(log τ))` on the tape.
    pub fn tau_var(&self, tape: &mut Tape, p: &Bound) -> Var {
        let lt = tape.clamp(p.var(self.layout.log_tau), TAU_MIN.ln(), TAU_MAX.ln());
        tape.exp(lt)
    }

    pub fn importance_var(&self, p: &Bound) -> Var {
        p.var(self.layout.importance)
    }

    fn positions(&self, tape: &mut Tape, p: &Bound, learned: Option<ParamId>, table: &Tensor, index: &[usize]) -> Result<Var> {
        match learned {
            Some(id) => tape.gather_rows(p.var(id), index),
            None => Ok(tape.constant(gather_table(table, index))),
        }
    }

    /// Encodes `B` instances of `n_per` patches each.
    ///
    /// `patches` is `[B·n_per, lr_patch_dim]`, `positions` gives each row's
    /// grid index. Returns `v_enc` as `[B·n_per, C]`.
    pub fn encode_image(&self, tape: &mut Tape, p: &Bound, patches: &Tensor, positions: &[usize], n_per: usize) -> Result<Var> {
        let g = self.config.geometry;
        let (rows, dim) = patches.as_matrix_dims();
        if dim != g.lr_patch_dim() || rows != positions.len() || n_per == 0 || rows % n_per != 0 {
            return Err(Error::Shape(format!(
                "encode_image: patches {:?}, {} positions, {n_per} per instance (patch dim {})",
                patches.shape(),
                positions.len(),
                g.lr_patch_dim()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&i| i >= g.n_patches()) {
            return Err(Error::Shape(format!("patch position {bad} outside {} patches", g.n_patches())));
        }
        let l = &self.layout;
        let x = tape.constant(patches.clone());
        let x = l.img_embed.forward(tape, p, x)?;
        let pos = self.positions(tape, p, l.img_pos, &self.img_pos_table, positions)?;
        let mut h = tape.add(x, pos)?;
        for b in &l.img_blocks {
            h = b.forward(tape, p, h, n_per, None)?;
        }
        l.img_norm.forward(tape, p, h)
    }

    /// Reconstructs full-resolution patches for every grid slot.
    ///
    /// Encoded tokens go to their sampled slots, a shared mask token fills the
    /// rest. Returns `[B·N, patch_size²]`.
    pub fn decode_image(&self, tape: &mut Tape, p: &Bound, v_enc: Var, plans: &[MaskPlan]) -> Result<Var> {
        let n = self.n_patches();
        let (rows, _) = tape.value(v_enc).as_matrix_dims();
        let n_per = plans.first().map_or(0, MaskPlan::n_sampled);
        if plans.is_empty() || plans.iter().any(|pl| pl.n_total != n || pl.n_sampled() != n_per) || rows != plans.len() * n_per {
            return Err(Error::Shape(format!(
                "decode_image: {rows} encoded rows inconsistent with {} plans",
                plans.len()
            )));
        }
        let l = &self.layout;
        let d = l.dec_embed.forward(tape, p, v_enc)?;
        let with_mask = tape.concat_rows(&[d, p.var(l.mask_token)])?;
        let mask_row = rows;
        let mut index = Vec::with_capacity(plans.len() * n);
        for (b, plan) in plans.iter().enumerate() {
            let mut slot = vec![mask_row; n];
            for (k, &pos) in plan.sampled.iter().enumerate() {
                slot[pos] = b * n_per + k;
            }
            index.extend(slot);
        }
        let full = tape.gather_rows(with_mask, &index)?;
        let grid: Vec<usize> = (0..plans.len()).flat_map(|_| 0..n).collect();
        let pos = self.positions(tape, p, l.dec_pos, &self.dec_pos_table, &grid)?;
        let mut h = tape.add(full, pos)?;
        for b in &l.dec_blocks {
            h = b.forward(tape, p, h, n, None)?;
        }
        let h = l.dec_norm.forward(tape, p, h)?;
        l.dec_pred.forward(tape, p, h)
    }

    /// Encodes `B` token sequences of length `seq` stacked as `ids`.
    /// `[pad]` keys are excluded from attention. Returns `[B·seq, C]`.
    pub fn encode_text(&self, tape: &mut Tape, p: &Bound, ids: &[usize], seq: usize) -> Result<Var> {
        if seq == 0 || seq > self.config.text.max_len || ids.is_empty() || ids.len() % seq != 0 {
            return Err(Error::Input(format!(
                "encode_text: {} ids do not form sequences of length {seq} (max {})",
                ids.len(),
                self.config.text.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        let l = &self.layout;
        let x = tape.gather_rows(p.var(l.tok_embed), ids)?;
        let steps: Vec<usize> = (0..ids.len()).map(|i| i % seq).collect();
        let pos = self.positions(tape, p, l.text_pos, &self.text_pos_table, &steps)?;
        let mut h = tape.add(x, pos)?;
        let pad = self.vocab.pad_id();
        let mask: Vec<bool> = ids.iter().map(|&i| i != pad).collect();
        for b in &l.text_blocks {
            h = b.forward(tape, p, h, seq, Some(&mask))?;
        }
        l.text_norm.forward(tape, p, h)
    }

    /// Mean of each instance's image tokens and the `[cls]` row of each text,
    /// projected into the joint space and L2-normalized.
    pub fn pool_and_project(&self, tape: &mut Tape, p: &Bound, v_enc: Var, n_per: usize, t_enc: Var, seq: usize) -> Result<(Var, Var)> {
        let v_pool = tape.segment_mean(v_enc, n_per)?;
        let (t_rows, _) = tape.value(t_enc).as_matrix_dims();
        if seq == 0 || t_rows % seq != 0 {
            return Err(Error::Shape(format!("{t_rows} text rows not divisible by {seq}")));
        }
        let cls: Vec<usize> = (0..t_rows / seq).map(|b| b * seq).collect();
        let t_pool = tape.gather_rows(t_enc, &cls)?;
        let v = self.project_image(tape, p, v_pool)?;
        let t = self.layout.proj_text.forward(tape, p, t_pool)?;
        Ok((v, tape.l2_normalize_rows(t)))
    }

    /// `fc_i` followed by L2 normalization, for pooled or per-patch features.
    pub fn project_image(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let v = self.layout.proj_image.forward(tape, p, x)?;
        Ok(tape.l2_normalize_rows(v))
    }

    /// `fc_i` without normalization.
    pub fn project_image_raw(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.layout.proj_image.forward(tape, p, x)
    }

    /// `fc_t` without normalization.
    pub fn project_text_raw(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.layout.proj_text.forward(tape, p, x)
    }

    fn check_side(&self, image: &Image) -> Result<()> {
        let side = self.config.geometry.image_side;
        if image.height != side || image.width != side {
            return Err(Error::Shape(format!(
                "image {}×{} does not match configured side {side}",
                image.height, image.width
            )));
        }
        Ok(())
    }

    /// Encoder input: the downsampled image cut into low-resolution patches.
    pub fn lr_grid(&self, image: &Image) -> Result<PatchGrid> {
        self.check_side(image)?;
        let g = self.config.geometry;
        partition(&downsample(image, g.downsample_ratio)?, g.lr_patch_size())
    }

    /// Reconstruction targets: full-resolution patches.
    pub fn hr_grid(&self, image: &Image) -> Result<PatchGrid> {
        self.check_side(image)?;
        partition(image, self.config.geometry.patch_size)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, &self.vocab, self.config.text.max_len)
    }
}
