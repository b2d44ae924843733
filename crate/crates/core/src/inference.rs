//! Phrase grounding, zero-shot classification, weight maps, the linear probe
//! and the evaluation metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ObjectClass;
use crate::encoders::MacoModel;
use crate::error::{Error, Result};
use crate::numerics::{bilinear_upsample, sigmoid, softmax_rows_in_place, ParamStore, SgdMomentum, Tape, Tensor};
use crate::patching::Image;

/// Axis-aligned pixel box `[x, x+width) × [y, y+height)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxAnnotation {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub label: String,
}

impl BoxAnnotation {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.height && x >= self.x && x < self.x + self.width
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input(format!("box {:?} has an empty extent", self)));
        }
        if self.x + self.width > width || self.y + self.height > height {
            return Err(Error::Input(format!(
                "box at ({}, {}) of {}×{} exceeds the {height}×{width} image",
                self.x, self.y, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Pixel membership in the union of `boxes`, row-major.
pub fn union_mask(boxes: &[BoxAnnotation], height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    for b in boxes {
        for y in b.y..(b.y + b.height).min(height) {
            for x in b.x..(b.x + b.width).min(width) {
                mask[y * width + x] = true;
            }
        }
    }
    mask
}

fn map_dims(map: &Tensor) -> Result<(usize, usize)> {
    if map.rank() != 2 || map.is_empty() {
        return Err(Error::Shape(format!("score map must be a nonempty matrix, got {:?}", map.shape())));
    }
    if !map.is_finite() {
        return Err(Error::Metric("score map contains non-finite values".into()));
    }
    Ok((map.shape()[0], map.shape()[1]))
}

fn check_boxes(boxes: &[BoxAnnotation], h: usize, w: usize) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::Metric("at least one box is required".into()));
    }
    boxes.iter().try_for_each(|b| b.validate(h, w))
}

/// Guard added under the square root of the CNR denominator.
pub const CNR_EPS: f64 = 1e-12;

/// `(μ_in − μ_out) / sqrt(σ²_in + σ²_out + ε)` with population variances.
pub fn metric_cnr(map: &Tensor, bbox: &BoxAnnotation) -> Result<f64> {
    let (h, w) = map_dims(map)?;
    bbox.validate(h, w)?;
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.at(y, x);
            if bbox.contains(y, x) {
                inside.push(v);
            } else {
                outside.push(v);
            }
        }
    }
    if outside.is_empty() {
        return Err(Error::Metric("box covers the whole map; exterior is empty".into()));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    };
    let (mi, vi) = stats(&inside);
    let (mo, vo) = stats(&outside);
    Ok((mi - mo) / (vi + vo + CNR_EPS).sqrt())
}

pub const MIOU_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// IoU between `{map > q}` and the union of boxes, averaged over quantiles `q`.
///
/// Each quantile is the order statistic at rank `floor(q·(n−1))`, so the
/// binarization depends only on value ranks.
pub fn metric_miou(map: &Tensor, boxes: &[BoxAnnotation], thresholds: &[f64]) -> Result<f64> {
    let (h, w) = map_dims(map)?;
    if thresholds.is_empty() {
        return Err(Error::param("thresholds", "at least one quantile is required"));
    }
    if let Some(q) = thresholds.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::param("thresholds", format!("quantile {q} outside [0, 1]")));
    }
    check_boxes(boxes, h, w)?;
    let truth = union_mask(boxes, h, w);
    let mut sorted = map.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut total = 0.0;
    for &q in thresholds {
        let cut = sorted[(q * (n - 1) as f64).floor() as usize];
        let (mut inter, mut union) = (0usize, 0usize);
        for (&v, &t) in map.data().iter().zip(&truth) {
            let pred = v > cut;
            inter += (pred && t) as usize;
            union += (pred || t) as usize;
        }
        total += inter as f64 / union as f64;
    }
    Ok(total / thresholds.len() as f64)
}

/// Row-major index of the first maximal entry.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Whether the map's peak (lowest row-major index on ties) lies in any box.
pub fn metric_pointing_game(map: &Tensor, boxes: &[BoxAnnotation]) -> Result<bool> {
    let (h, w) = map_dims(map)?;
    check_boxes(boxes, h, w)?;
    let i = argmax_first(map.data());
    Ok(boxes.iter().any(|b| b.contains(i / w, i % w)))
}

/// Chance of a uniformly random patch overlapping any box.
pub fn random_patch_baseline(boxes: &[BoxAnnotation], image_side: usize, patch: usize) -> f64 {
    let side = image_side / patch;
    let mut hits = 0;
    for py in 0..side {
        for px in 0..side {
            let hit = boxes.iter().any(|b| {
                b.x < (px + 1) * patch && px * patch < b.x + b.width && b.y < (py + 1) * patch && py * patch < b.y + b.height
            });
            hits += hit as usize;
        }
    }
    hits as f64 / (side * side) as f64
}

/// Mann–Whitney estimate of `P(score_pos > score_neg)`, ties counted as ½.
pub fn metric_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Full-image features computed by the frozen model.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub n_patches: usize,
    /// Encoder outputs `v_enc`, `[B·N, C]`.
    pub tokens: Tensor,
    /// `fc_i` applied to each token without normalization, `[B·N, C']`.
    pub patch_proj: Tensor,
    /// Token means, `[B, C]`.
    pub pooled: Tensor,
    /// Normalized joint-space embeddings `v`, `[B, C']`.
    pub embedding: Tensor,
}

impl ImageFeatures {
    pub fn len(&self) -> usize {
        self.pooled.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `[cls]` rows of `t_enc`, `[B, C]`.
    pub cls: Tensor,
    /// `fc_t` of the `[cls]` rows without normalization, `[B, C']`.
    pub cls_proj: Tensor,
    /// Normalized joint-space embeddings `t`, `[B, C']`.
    pub embedding: Tensor,
}

const FEATURE_CHUNK: usize = 64;

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |t| t.as_matrix_dims().1);
    let mut data = Vec::new();
    for p in parts {
        data.extend(p.into_data());
    }
    let rows = if cols == 0 { 0 } else { data.len() / cols };
    Tensor::matrix(rows, cols, data)
}

/// Encodes unmasked, already-normalized images.
pub fn image_features(model: &MacoModel, images: &[Image]) -> Result<ImageFeatures> {
    if images.is_empty() {
        return Err(Error::Input("no images to encode".into()));
    }
    let n = model.n_patches();
    let positions: Vec<usize> = (0..n).collect();
    let (mut tokens, mut proj, mut pooled, mut emb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for chunk in images.chunks(FEATURE_CHUNK) {
        let mut rows = Vec::with_capacity(chunk.len() * n * model.config.geometry.lr_patch_dim());
        for img in chunk {
            rows.extend_from_slice(model.lr_grid(img)?.patches.data());
        }
        let patches = Tensor::matrix(chunk.len() * n, model.config.geometry.lr_patch_dim(), rows)?;
        let index: Vec<usize> = (0..chunk.len()).flat_map(|_| positions.iter().copied()).collect();
        let mut tape = Tape::new();
        let p = model.bind_frozen(&mut tape);
        let v_enc = model.encode_image(&mut tape, &p, &patches, &index, n)?;
        let pr = model.project_image_raw(&mut tape, &p, v_enc)?;
        let pool = tape.segment_mean(v_enc, n)?;
        let v = model.project_image(&mut tape, &p, pool)?;
        tokens.push(tape.value(v_enc).clone());
        proj.push(tape.value(pr).clone());
        pooled.push(tape.value(pool).clone());
        emb.push(tape.value(v).clone());
    }
    Ok(ImageFeatures {
        n_patches: n,
        tokens: stack(tokens)?,
        patch_proj: stack(proj)?,
        pooled: stack(pooled)?,
        embedding: stack(emb)?,
    })
}

pub fn text_features<S: AsRef<str>>(model: &MacoModel, texts: &[S]) -> Result<TextFeatures> {
    if texts.is_empty() {
        return Err(Error::Input("no texts to encode".into()));
    }
    let seq = model.config.text.max_len;
    let (mut cls, mut proj, mut emb) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in texts.chunks(FEATURE_CHUNK) {
        let mut ids = Vec::with_capacity(chunk.len() * seq);
        for t in chunk {
            ids.extend(model.tokenize(t.as_ref())?);
        }
        let mut tape = Tape::new();
        let p = model.bind_frozen(&mut tape);
        let t_enc = model.encode_text(&mut tape, &p, &ids, seq)?;
        let heads: Vec<usize> = (0..chunk.len()).map(|b| b * seq).collect();
        let c = tape.gather_rows(t_enc, &heads)?;
        let pr = model.project_text_raw(&mut tape, &p, c)?;
        let t = tape.l2_normalize_rows(pr);
        cls.push(tape.value(c).clone());
        proj.push(tape.value(pr).clone());
        emb.push(tape.value(t).clone());
    }
    Ok(TextFeatures {
        cls: stack(cls)?,
        cls_proj: stack(proj)?,
        embedding: stack(emb)?,
    })
}

/// Feature space in which patch tokens meet the phrase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingSpace {
    /// `v_enc` against the `[cls]` row of `t_enc`.
    Raw,
    /// `fc_i(v_enc)` against `fc_t` of the `[cls]` row.
    Projected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    /// Softmax temperature applied to the importance weights.
    pub tau_w: f64,
    pub space: GroundingSpace,
    /// L2-normalize token rows before the dot product.
    pub normalize_rows: bool,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            tau_w: 0.02,
            space: GroundingSpace::Raw,
            normalize_rows: false,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_w > 0.0 && self.tau_w.is_finite()) {
            return Err(Error::config("grounding.tau_w", format!("must be positive, got {}", self.tau_w)));
        }
        Ok(())
    }
}

/// `softmax(w / τ^w)` over the importance weights.
pub fn weight_softmax(weights: &[f64], tau_w: f64) -> Result<Vec<f64>> {
    if !(tau_w > 0.0) {
        return Err(Error::param("tau_w", format!("must be positive, got {tau_w}")));
    }
    if weights.is_empty() {
        return Err(Error::Shape("empty importance weights".into()));
    }
    let mut out = weights.to_vec();
    softmax_rows_in_place(&mut out, weights.len(), tau_w);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingMap {
    /// Upsampled scores at image resolution.
    pub scores: Tensor,
    /// Scores on the patch grid before upsampling.
    pub patch_scores: Tensor,
    pub phrase: String,
    pub tau_w: f64,
    pub grid_side: usize,
}

/// Weighted patch scores `ŵᵢ · ⟨xᵢ, t⟩` for one image.
pub fn patch_scores(tokens: &[f64], width: usize, weights_hat: &[f64], text: &[f64], normalize_rows: bool) -> Result<Vec<f64>> {
    if text.len() != width || tokens.len() != weights_hat.len() * width {
        return Err(Error::Shape(format!(
            "{} token values, {} weights, text width {} vs {width}",
            tokens.len(),
            weights_hat.len(),
            text.len()
        )));
    }
    Ok(tokens
        .chunks(width)
        .zip(weights_hat)
        .map(|(row, &w)| {
            let dot: f64 = row.iter().zip(text).map(|(a, b)| a * b).sum();
            if normalize_rows {
                let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                w * dot / norm
            } else {
                w * dot
            }
        })
        .collect())
}

/// Grounds text `j` of `text` in image `i` of `images`.
#[allow(clippy::too_many_arguments)]
pub fn grounding_from_features(
    images: &ImageFeatures,
    i: usize,
    text: &TextFeatures,
    j: usize,
    weights: &[f64],
    cfg: &GroundingConfig,
    out_side: usize,
    phrase: &str,
) -> Result<GroundingMap> {
    cfg.validate()?;
    let n = images.n_patches;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} patches", weights.len())));
    }
    let w_hat = weight_softmax(weights, cfg.tau_w)?;
    let (src, t) = match cfg.space {
        GroundingSpace::Raw => (&images.tokens, text.cls.row(j)),
        GroundingSpace::Projected => (&images.patch_proj, text.cls_proj.row(j)),
    };
    let width = src.as_matrix_dims().1;
    let rows = &src.data()[i * n * width..(i + 1) * n * width];
    let s = patch_scores(rows, width, &w_hat, t, cfg.normalize_rows)?;
    let patch = Tensor::matrix(side, side, s)?;
    Ok(GroundingMap {
        scores: bilinear_upsample(&patch, out_side, out_side)?,
        patch_scores: patch,
        phrase: phrase.to_string(),
        tau_w: cfg.tau_w,
        grid_side: side,
    })
}

/// Score map for one normalized image and one phrase.
pub fn grounding_map(model: &MacoModel, image: &Image, phrase: &str, cfg: &GroundingConfig) -> Result<GroundingMap> {
    cfg.validate()?;
    let img = image_features(model, std::slice::from_ref(image))?;
    let txt = text_features(model, &[phrase])?;
    grounding_from_features(&img, 0, &txt, 0, model.importance_weights(), cfg, image.height, phrase)
}

/// `ŵ` arranged on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub side: usize,
    pub values: Tensor,
}

pub fn export_weight_map(weights: &[f64], tau_w: f64) -> Result<WeightMap> {
    let side = (weights.len() as f64).sqrt().round() as usize;
    if side * side != weights.len() {
        return Err(Error::Shape(format!("{} weights do not form a square grid", weights.len())));
    }
    let w = weight_softmax(weights, tau_w)?;
    Ok(WeightMap {
        side,
        values: Tensor::matrix(side, side, w)?,
    })
}

/// Mean weight over patches centred in the middle cell of the 3×3 layout,
/// and over the outer ring of the patch grid.
pub fn central_and_border_means(weights: &[f64], image_side: usize, patch: usize) -> Result<(f64, f64)> {
    let side = image_side / patch;
    if side < 3 || weights.len() != side * side {
        return Err(Error::Shape(format!("{} weights for a {side}×{side} grid", weights.len())));
    }
    let (c0, c1, _, _) = crate::datagen::Region::center().bounds(image_side);
    let (mut central, mut nc, mut border, mut nb) = (0.0, 0, 0.0, 0);
    for py in 0..side {
        for px in 0..side {
            let w = weights[py * side + px];
            let (cy, cx) = (py * patch + patch / 2, px * patch + patch / 2);
            if (c0..c1).contains(&cy) && (c0..c1).contains(&cx) {
                central += w;
                nc += 1;
            }
            if py == 0 || px == 0 || py == side - 1 || px == side - 1 {
                border += w;
                nb += 1;
            }
        }
    }
    if nc == 0 {
        return Err(Error::Shape("no patch centre falls in the central cell".into()));
    }
    Ok((central / nc as f64, border / nb as f64))
}

/// Positive and negative prompt for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub class: String,
    pub positive: String,
    pub negative: String,
}

pub fn default_prompts() -> Vec<PromptPair> {
    ObjectClass::ALL
        .iter()
        .map(|c| PromptPair {
            class: c.name().to_string(),
            positive: format!("there is a {}", c.name()),
            negative: format!("there is no {}", c.name()),
        })
        .collect()
}

/// `[B, K]` scores: the positive-prompt probability of a two-way softmax over
/// `⟨v, t_pos⟩/τ` and `⟨v, t_neg⟩/τ`.
pub fn zero_shot_scores(images: &ImageFeatures, prompts: &TextFeatures, tau: f64) -> Result<Tensor> {
    let (b, d) = images.embedding.as_matrix_dims();
    let (rows, pd) = prompts.embedding.as_matrix_dims();
    if rows % 2 != 0 || pd != d {
        return Err(Error::Shape(format!("prompt embeddings {:?} vs image width {d}", prompts.embedding.shape())));
    }
    if !(tau > 0.0) {
        return Err(Error::param("tau", "must be positive"));
    }
    let k = rows / 2;
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut out = Vec::with_capacity(b * k);
    for i in 0..b {
        let v = images.embedding.row(i);
        for c in 0..k {
            let pos = dot(v, prompts.embedding.row(2 * c));
            let neg = dot(v, prompts.embedding.row(2 * c + 1));
            out.push(sigmoid((pos - neg) / tau));
        }
    }
    Tensor::matrix(b, k, out)
}

fn prompt_texts(prompts: &[PromptPair]) -> Result<Vec<String>> {
    if prompts.is_empty() {
        return Err(Error::Input("no prompt pairs".into()));
    }
    let mut texts = Vec::with_capacity(2 * prompts.len());
    for p in prompts {
        if p.positive.trim().is_empty() || p.negative.trim().is_empty() {
            return Err(Error::Input(format!("class {:?} is missing a prompt", p.class)));
        }
        texts.push(p.positive.clone());
        texts.push(p.negative.clone());
    }
    Ok(texts)
}

/// Per-class scores for normalized images.
pub fn zero_shot_classify(model: &MacoModel, images: &[Image], prompts: &[PromptPair]) -> Result<Tensor> {
    let texts = prompt_texts(prompts)?;
    let img = image_features(model, images)?;
    let txt = text_features(model, &texts)?;
    zero_shot_scores(&img, &txt, model.tau())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAuc {
    pub per_class: Vec<(String, f64)>,
    pub macro_auc: f64,
}

/// AUC of each score column against the matching label column.
pub fn per_class_auc(scores: &Tensor, labels: &[Vec<bool>], names: &[String]) -> Result<ClassAuc> {
    let (b, k) = scores.as_matrix_dims();
    if labels.len() != b || names.len() != k || labels.iter().any(|l| l.len() != k) {
        return Err(Error::Shape(format!("scores {:?} vs {} label rows and {} names", scores.shape(), labels.len(), names.len())));
    }
    let mut per_class = Vec::with_capacity(k);
    for (c, name) in names.iter().enumerate() {
        let s: Vec<f64> = (0..b).map(|i| scores.at(i, c)).collect();
        let l: Vec<bool> = labels.iter().map(|row| row[c]).collect();
        let auc = metric_auc(&s, &l).map_err(|e| Error::Metric(format!("class {name}: {e}")))?;
        per_class.push((name.clone(), auc));
    }
    let macro_auc = per_class.iter().map(|(_, a)| a).sum::<f64>() / k as f64;
    Ok(ClassAuc { per_class, macro_auc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Linear multi-label classifier over standardized pooled features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let (b, d) = features.as_matrix_dims();
        if d != self.mean.len() {
            return Err(Error::Shape(format!("probe expects width {}, got {d}", self.mean.len())));
        }
        let k = self.bias.len();
        let mut out = Vec::with_capacity(b * k);
        for i in 0..b {
            let x: Vec<f64> = features.row(i).iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect();
            for c in 0..k {
                let z: f64 = self.bias.data()[c] + x.iter().enumerate().map(|(j, v)| v * self.weight.at(j, c)).sum::<f64>();
                out.push(sigmoid(z));
            }
        }
        Tensor::matrix(b, k, out)
    }
}

fn standardize(features: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, d) = features.as_matrix_dims();
    let mut mean = vec![0.0; d];
    for i in 0..b {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / b as f64;
        }
    }
    let mut std = vec![0.0; d];
    for i in 0..b {
        for ((s, v), m) in std.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / b as f64;
        }
    }
    (mean, std.into_iter().map(|v| v.sqrt().max(1e-8)).collect())
}

/// Trains a sigmoid cross-entropy probe with SGD momentum on `features`.
pub fn train_linear_probe(features: &Tensor, labels: &[Vec<bool>], cfg: &ProbeConfig) -> Result<LinearProbe> {
    let (b, d) = features.as_matrix_dims();
    let k = labels.first().map_or(0, Vec::len);
    if b == 0 || labels.len() != b || k == 0 || labels.iter().any(|l| l.len() != k) {
        return Err(Error::Input(format!("{b} feature rows for {} label rows", labels.len())));
    }
    for c in 0..k {
        let pos = labels.iter().filter(|l| l[c]).count();
        if pos == 0 || pos == b {
            return Err(Error::Input(format!("training labels for class {c} contain a single class")));
        }
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::config("probe", "batch_size must be positive and lr non-negative"));
    }
    let (mean, std) = standardize(features);
    let x: Vec<f64> = (0..b)
        .flat_map(|i| {
            let (mean, std) = (&mean, &std);
            features.row(i).iter().enumerate().map(move |(j, v)| (v - mean[j]) / std[j])
        })
        .collect();
    let y: Vec<f64> = labels.iter().flat_map(|l| l.iter().map(|&v| v as u8 as f64)).collect();

    let mut store = ParamStore::new();
    let w = store.insert("probe.weight", Tensor::zeros(&[d, k]), true)?;
    let bias = store.insert("probe.bias", Tensor::zeros(&[k]), false)?;
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay, &store.iter().cloned().collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..b).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb: Vec<f64> = batch.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
            let yb: Vec<f64> = batch.iter().flat_map(|&i| y[i * k..(i + 1) * k].iter().copied()).collect();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(Tensor::matrix(batch.len(), d, xb)?);
            let yv = tape.constant(Tensor::matrix(batch.len(), k, yb)?);
            let z = tape.matmul(xv, p.var(w))?;
            let z = tape.add_row(z, p.var(bias))?;
            let sp = tape.softplus(z);
            let yz = tape.mul(yv, z)?;
            let l = tape.sub(sp, yz)?;
            let loss = tape.mean(l);
            let g = tape.backward(loss)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| g.wrt(v)).collect();
            opt.step(cfg.lr, store.params_mut(), &grads)?;
        }
    }
    Ok(LinearProbe {
        mean,
        std,
        weight: store.value(w).clone(),
        bias: store.value(bias).clone(),
    })
}

/// Probe on pooled features of `train`, evaluated on `test`.
pub fn linear_probe(
    model: &MacoModel,
    train: (&[Image], &[Vec<bool>]),
    test: (&[Image], &[Vec<bool>]),
    names: &[String],
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, ClassAuc)> {
    let tr = image_features(model, train.0)?;
    let probe = train_linear_probe(&tr.pooled, train.1, cfg)?;
    let te = image_features(model, test.0)?;
    let scores = probe.scores(&te.pooled)?;
    let auc = per_class_auc(&scores, test.1, names)?;
    Ok((probe, auc))
}

/// One evaluated phrase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundingRow {
    pub phrase: String,
    pub cnr: f64,
    pub miou: f64,
    pub pg: u8,
}

/// CNR against the first box, mIoU and pointing game against all boxes.
pub fn grounding_metrics(map: &GroundingMap, boxes: &[BoxAnnotation]) -> Result<GroundingRow> {
    let first = boxes.first().ok_or_else(|| Error::Metric("at least one box is required".into()))?;
    Ok(GroundingRow {
        phrase: map.phrase.clone(),
        cnr: metric_cnr(&map.scores, first)?,
        miou: metric_miou(&map.scores, boxes, &MIOU_THRESHOLDS)?,
        pg: metric_pointing_game(&map.scores, boxes)? as u8,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Matrix as comma-separated rows without a header.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = m.as_matrix_dims();
    let mut out = String::with_capacity(rows * cols * 12);
    for r in 0..rows {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
