//! Split-level evaluation of a trained model on the synthetic corpus.

use serde::Serialize;

use crate::datagen::{normalize_image, AugmentConfig, ObjectClass, PairedSample};
use crate::encoders::MacoModel;
use crate::error::{Error, Result};
use crate::inference::{
    central_and_border_means, default_prompts, grounding_from_features, grounding_metrics, image_features, linear_probe,
    per_class_auc, random_patch_baseline, text_features, zero_shot_classify, ClassAuc, GroundingConfig, GroundingRow,
    ProbeConfig,
};
use crate::patching::Image;

pub fn class_names() -> Vec<String> {
    ObjectClass::ALL.iter().map(|c| c.name().to_string()).collect()
}

pub fn normalized_images(samples: &[PairedSample], augment: &AugmentConfig) -> Vec<Image> {
    samples.iter().map(|s| normalize_image(&s.image, augment)).collect()
}

pub fn label_rows(samples: &[PairedSample]) -> Vec<Vec<bool>> {
    samples.iter().map(|s| s.labels.to_vec()).collect()
}

/// Zero-shot per-class AUC with the default prompt pairs.
pub fn zero_shot_eval(model: &MacoModel, samples: &[PairedSample], augment: &AugmentConfig) -> Result<ClassAuc> {
    let scores = zero_shot_classify(model, &normalized_images(samples, augment), &default_prompts())?;
    per_class_auc(&scores, &label_rows(samples), &class_names())
}

/// Grounding quality over every object of a split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundingSummary {
    pub cases: usize,
    pub cnr: f64,
    pub miou: f64,
    pub pointing_game: f64,
    /// Expected pointing-game accuracy of a uniformly random patch.
    pub random_baseline: f64,
}

/// Grounds each object's own sentence against that object's box.
pub fn grounding_eval(
    model: &MacoModel,
    samples: &[PairedSample],
    augment: &AugmentConfig,
    cfg: &GroundingConfig,
) -> Result<(GroundingSummary, Vec<GroundingRow>)> {
    cfg.validate()?;
    let g = model.config.geometry;
    let images = normalized_images(samples, augment);
    let img = image_features(model, &images)?;
    let phrases: Vec<String> = samples.iter().flat_map(|s| s.phrases()).collect();
    if phrases.is_empty() {
        return Err(Error::Metric("split contains no annotated objects".into()));
    }
    let txt = text_features(model, &phrases)?;
    let mut rows = Vec::with_capacity(phrases.len());
    let mut baseline = 0.0;
    let mut j = 0;
    for (i, s) in samples.iter().enumerate() {
        for o in &s.objects {
            let boxes = std::slice::from_ref(&o.bbox);
            let map = grounding_from_features(&img, i, &txt, j, model.importance_weights(), cfg, g.image_side, &o.phrase)?;
            rows.push(grounding_metrics(&map, boxes)?);
            baseline += random_patch_baseline(boxes, g.image_side, g.patch_size);
            j += 1;
        }
    }
    let n = rows.len() as f64;
    let summary = GroundingSummary {
        cases: rows.len(),
        cnr: rows.iter().map(|r| r.cnr).sum::<f64>() / n,
        miou: rows.iter().map(|r| r.miou).sum::<f64>() / n,
        pointing_game: rows.iter().map(|r| r.pg as f64).sum::<f64>() / n,
        random_baseline: baseline / n,
    };
    Ok((summary, rows))
}

/// Linear probe trained on `train` and scored on `test`.
pub fn probe_eval(
    model: &MacoModel,
    train: &[PairedSample],
    test: &[PairedSample],
    augment: &AugmentConfig,
    cfg: &ProbeConfig,
) -> Result<ClassAuc> {
    let tr = normalized_images(train, augment);
    let te = normalized_images(test, augment);
    let (_, auc) = linear_probe(model, (&tr, &label_rows(train)), (&te, &label_rows(test)), &class_names(), cfg)?;
    Ok(auc)
}

/// Mean raw head weight over central patches and over border patches.
pub fn head_centrality(model: &MacoModel) -> Result<(f64, f64)> {
    let g = model.config.geometry;
    central_and_border_means(model.importance_weights(), g.image_side, g.patch_size)
}
