//! Pseudo-label generation for new classes from image-level labels.
//!
//! For every labelled class the pipeline scores pixels against prompt
//! embeddings with a vision-language backend, picks seed pixels from the
//! resulting foreground, averages the self-supervised attention of those
//! seeds, and fuses both binary masks.

pub mod backend;
pub mod binarize;
pub mod cache;
pub mod features;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use backend::{AttentionStack, BackendSpec, Backends, SeedPoint, SelfSupervisedBackend, VisionLanguageBackend};
pub use binarize::{binarize_topk, foreground_of, fuse_masks, sample_seeds, seed_attention_mask, FusionOp};
pub use cache::{read_mask_cache, write_mask_cache, MaskSource, PseudoLabelSet};
pub use features::{encode_text, initial_mask, normalize_features, DenseFeatureMap, ScoreMap, TextEmbeddingMatrix};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::rng;

pub const DEFAULT_TEMPLATES: &[&str] = &[
    "a photo of a {}.",
    "a photo of the {}.",
    "a close-up photo of a {}.",
    "a rendering of a {}.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CosegConfig {
    /// Top-K percentage for the seed-attention mask.
    pub k: f64,
    /// Top-K percentage for the score-map foreground.
    pub k_fg: f64,
    pub n_seeds: usize,
    pub fusion: FusionOp,
    pub templates: Vec<String>,
}

impl Default for CosegConfig {
    fn default() -> Self {
        CosegConfig {
            k: 70.0,
            k_fg: 70.0,
            n_seeds: 9,
            fusion: FusionOp::Union,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CosegConfig {
    pub fn validate(&self) -> Result<()> {
        binarize::topk_count(self.k, 1)?;
        binarize::topk_count(self.k_fg, 1)?;
        if self.n_seeds == 0 {
            return Err(Error::Config("coseg.n_seeds must be at least 1".into()));
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !t.contains("{}")) {
            return Err(Error::Config("every prompt template needs a {} placeholder".into()));
        }
        Ok(())
    }
}

/// Read a prompt template file: one template per non-blank line.
pub fn parse_templates(text: &str) -> Result<Vec<String>> {
    let t: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if t.is_empty() {
        return Err(Error::Config("template file is empty".into()));
    }
    if let Some(bad) = t.iter().find(|l| !l.contains("{}")) {
        return Err(Error::Config(format!("template {bad:?} has no {{}} placeholder")));
    }
    Ok(t)
}

/// Per-step state shared by every image: the text embeddings of the step's
/// new classes.
pub struct Cosegmenter {
    pub cfg: CosegConfig,
    pub text: TextEmbeddingMatrix,
    pub seed: u64,
}

impl Cosegmenter {
    /// `step_classes` are the new classes of the step with their names.
    pub fn new(
        vlp: &dyn VisionLanguageBackend,
        step_classes: &[(ClassId, String)],
        cfg: CosegConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let text = encode_text(vlp, step_classes, &cfg.templates)?;
        Ok(Cosegmenter { cfg, text, seed })
    }

    /// Dense pseudo labels for the classes in `labels`.
    ///
    /// Deterministic in (image, labels, seed, config); the random stream is
    /// keyed by the image id so images can be processed in any order.
    pub fn generate(&self, image: &Image, labels: &BTreeSet<ClassId>, backends: &Backends) -> Result<PseudoLabelSet> {
        if labels.is_empty() {
            return Err(Error::EmptyClassSet);
        }
        if let Some(&c) = labels.iter().find(|c| !self.text.classes.contains(c)) {
            return Err(Error::UnknownClass(c));
        }
        let feats = normalize_features(&backends.vlp.dense_features(image)?)?;
        let scores = initial_mask(&feats, &self.text)?;
        let (gh, gw) = (scores.values.height, scores.values.width);
        let mut rng = rng::stream(self.seed, "coseg", rng::digest(&image.id));

        let mut masks = BTreeMap::new();
        let mut all_fused = self.cfg.fusion != FusionOp::None;
        for &class in labels {
            let init_bin = foreground_of(&scores, class, self.cfg.k_fg)?;
            let plane = if self.cfg.fusion == FusionOp::None {
                init_bin
            } else {
                match sample_seeds(&init_bin, self.cfg.n_seeds, &mut rng) {
                    Ok(seeds) => {
                        let seeds: Vec<SeedPoint> = seeds
                            .into_iter()
                            .map(|(row, col)| SeedPoint { row, col, grid_h: gh, grid_w: gw })
                            .collect();
                        let att = seed_attention_mask(backends.ssl.as_ref(), image, &seeds, self.cfg.k)?;
                        fuse_masks(&init_bin, &att.resize_nearest(gh, gw), self.cfg.fusion)?
                    }
                    Err(Error::EmptyForeground) => {
                        log::debug!("image {}: class {class} has an empty foreground", image.id);
                        all_fused = false;
                        init_bin
                    }
                    Err(e) => return Err(e),
                }
            };
            masks.insert(class, plane.resize_nearest(image.pixels.height, image.pixels.width));
        }
        Ok(PseudoLabelSet {
            image_id: image.id.clone(),
            height: image.pixels.height,
            width: image.pixels.width,
            masks,
            source: if all_fused { MaskSource::Fused } else { MaskSource::InitOnly },
        })
    }
}

/// One-shot convenience wrapper around [`Cosegmenter`].
pub fn generate_pseudo_labels(
    image: &Image,
    labels: &BTreeSet<ClassId>,
    step_classes: &[(ClassId, String)],
    backends: &Backends,
    cfg: &CosegConfig,
    seed: u64,
) -> Result<PseudoLabelSet> {
    Cosegmenter::new(backends.vlp.as_ref(), step_classes, cfg.clone(), seed)?.generate(image, labels, backends)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_file_parsing() {
        let t = parse_templates("a photo of a {}.\n\n  a {} in the wild \n").unwrap();
        assert_eq!(t, vec!["a photo of a {}.", "a {} in the wild"]);
        assert!(parse_templates("\n\n").is_err());
        assert!(parse_templates("no placeholder").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CosegConfig::default().validate().is_ok());
        let bad = CosegConfig { k: 0.0, ..CosegConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::BadPercentage(_))));
        let bad = CosegConfig { n_seeds: 0, ..CosegConfig::default() };
        assert!(bad.validate().is_err());
    }
}
