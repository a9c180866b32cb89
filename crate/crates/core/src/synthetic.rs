//! Procedural stand-ins for real data and foundation models.
//!
//! Images are textured grey backgrounds with flat-coloured rectangles and
//! ellipses, one colour per class. The vision-language backend derives patch
//! features from the colour-classified pixels of a patch (so scores follow
//! the hidden shapes) and corrupts them with seeded, spatially smooth
//! attenuation plus white noise. The self-supervised backend attends by
//! colour affinity and spatial proximity, per head, with seeded jitter.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coseg::backend::{AttentionStack, SeedPoint, SelfSupervisedBackend, VisionLanguageBackend};
use crate::coseg::features::DenseFeatureMap;
use crate::dataset::{Image, Sample};
use crate::error::{Error, Result};
use crate::label_space::{ClassId, DatasetIndex, IndexEntry, Taxonomy};
use crate::rng::{self, StreamRng};
use crate::tensor::{Plane, RgbImage, Tensor3};

const PALETTE: &[[u8; 3]] = &[
    [220, 60, 60],
    [60, 200, 70],
    [60, 90, 230],
    [230, 210, 60],
    [200, 70, 210],
    [60, 210, 210],
    [240, 140, 40],
    [140, 60, 20],
];
const BACKGROUND_RGB: [u8; 3] = [45, 45, 45];

/// Colour of a class in the synthetic world.
pub fn class_color(c: ClassId) -> [u8; 3] {
    if c.is_background() {
        return BACKGROUND_RGB;
    }
    let i = usize::from(c.0 - 1);
    if let Some(&p) = PALETTE.get(i) {
        return p;
    }
    let h = rng::digest(&format!("color{}", c.0));
    [40 + (h & 0xbf) as u8, 40 + ((h >> 8) & 0xbf) as u8, 40 + ((h >> 16) & 0xbf) as u8]
}

/// Knobs of the procedural image generator and of the synthetic backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub image_size: usize,
    /// Patch size of the backend feature grids.
    pub patch: usize,
    pub feature_dim: usize,
    pub heads: usize,
    /// Per-pixel colour jitter amplitude.
    pub pixel_noise: f64,
    /// White-noise std of the vision-language features.
    pub feature_noise: f64,
    /// Depth of the smooth attenuation field on feature signal (0 = none).
    pub feature_dropout: f64,
    /// Colour bandwidth of the attention kernel.
    pub attention_color_bw: f64,
    /// Spatial bandwidth of the attention kernel, in patches.
    pub attention_spatial_bw: f64,
    pub attention_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: 64,
            patch: 4,
            feature_dim: 16,
            heads: 3,
            pixel_noise: 24.0,
            feature_noise: 0.35,
            feature_dropout: 0.9,
            attention_color_bw: 40.0,
            attention_spatial_bw: 6.0,
            attention_noise: 0.15,
            seed: 0x5eed,
        }
    }
}

impl WorldConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }
}

/// Nearest palette class of a pixel, or background when nothing is close.
fn classify_pixel(px: [u8; 3], classes: &[ClassId]) -> ClassId {
    let d = |c: [u8; 3]| -> i32 { (0..3).map(|k| (i32::from(px[k]) - i32::from(c[k])).pow(2)).sum() };
    let mut best = (ClassId::BACKGROUND, d(BACKGROUND_RGB));
    for &c in classes {
        let v = d(class_color(c));
        if v < best.1 {
            best = (c, v);
        }
    }
    best.0
}

/// Orthonormal class directions (Gram-Schmidt over seeded Gaussians).
fn class_directions(classes: &[ClassId], dim: usize, seed: u64) -> BTreeMap<ClassId, Vec<f64>> {
    let mut rng = rng::stream(seed, "synthetic-directions", 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut out = BTreeMap::new();
    for &c in std::iter::once(&ClassId::BACKGROUND).chain(classes) {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        if basis.len() < dim {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v.clone());
        out.insert(c, v);
    }
    out
}

/// Smooth field in `[0, 1]`: sum of a few random Gaussian bumps, clipped.
fn smooth_field(rng: &mut StreamRng, g: usize) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (rng.random_range(0.0..g as f64), rng.random_range(0.0..g as f64), rng.random_range(1.5..3.5))
        })
        .collect();
    let mut f = vec![0.0; g * g];
    for i in 0..g {
        for j in 0..g {
            let v: f64 = bumps
                .iter()
                .map(|&(ci, cj, r)| (-((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)) / (2.0 * r * r)).exp())
                .sum();
            f[i * g + j] = v.min(1.0);
        }
    }
    f
}

/// Procedural vision-language backend.
pub struct SyntheticVlp {
    cfg: WorldConfig,
    classes: Vec<ClassId>,
    names: Vec<(String, ClassId)>,
    dirs: BTreeMap<ClassId, Vec<f64>>,
}

impl SyntheticVlp {
    pub fn new(cfg: WorldConfig, taxonomy: &Taxonomy) -> Self {
        let classes: Vec<ClassId> = taxonomy.class_names.keys().copied().collect();
        let mut names: Vec<(String, ClassId)> =
            taxonomy.class_names.iter().map(|(&c, n)| (n.to_lowercase(), c)).collect();
        // longest name first so "traffic light" wins over "light"
        names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let dirs = class_directions(&classes, cfg.feature_dim, cfg.seed);
        SyntheticVlp { cfg, classes, names, dirs }
    }
}

impl VisionLanguageBackend for SyntheticVlp {
    fn dense_features(&self, image: &Image) -> Result<DenseFeatureMap> {
        let (p, g, d) = (self.cfg.patch, self.cfg.grid(), self.cfg.feature_dim);
        check_size(image, &self.cfg)?;
        let mut rng = rng::stream(self.cfg.seed, "synthetic-vlp", rng::digest(&image.id));
        let field = smooth_field(&mut rng, g);
        let normal = Normal::new(0.0, self.cfg.feature_noise).unwrap();
        let mut out = Tensor3::zeros(g, g, d);
        let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
        for gi in 0..g {
            for gj in 0..g {
                counts.clear();
                for i in gi * p..(gi + 1) * p {
                    for j in gj * p..(gj + 1) * p {
                        *counts.entry(classify_pixel(image.pixels.rgb(i, j), &self.classes)).or_default() += 1;
                    }
                }
                let gain = 1.0 - self.cfg.feature_dropout * field[gi * g + gj];
                let mut v = vec![0.0f64; d];
                for (c, &n) in &counts {
                    let w = gain * n as f64 / (p * p) as f64;
                    v.iter_mut().zip(&self.dirs[c]).for_each(|(x, y)| *x += w * y);
                }
                let px = out.pixel_mut(gi * g + gj);
                for (o, x) in px.iter_mut().zip(v) {
                    *o = (x + normal.sample(&mut rng)) as f32;
                }
            }
        }
        Ok(DenseFeatureMap(out))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        let lower = prompt.to_lowercase();
        let (_, class) = self.names.iter().find(|(n, _)| lower.contains(n.as_str())).ok_or_else(|| {
            Error::BackendFailure { endpoint: "synthetic".into(), message: format!("no class named in {prompt:?}") }
        })?;
        let mut rng = rng::stream(self.cfg.seed, "synthetic-text", rng::digest(prompt));
        let jitter = Normal::new(0.0, 0.05).unwrap();
        Ok(self.dirs[class].iter().map(|&x| (x + jitter.sample(&mut rng)) as f32).collect())
    }
}

fn check_size(image: &Image, cfg: &WorldConfig) -> Result<()> {
    if image.pixels.height != cfg.image_size || image.pixels.width != cfg.image_size {
        return Err(Error::BackendFailure {
            endpoint: "synthetic".into(),
            message: format!(
                "image {} is {}x{}, synthetic backends expect {}x{}",
                image.id, image.pixels.height, image.pixels.width, cfg.image_size, cfg.image_size
            ),
        });
    }
    Ok(())
}

/// Procedural self-supervised backend.
pub struct SyntheticSsl {
    cfg: WorldConfig,
}

impl SyntheticSsl {
    pub fn new(cfg: WorldConfig) -> Self {
        SyntheticSsl { cfg }
    }

    fn patch_colors(&self, image: &Image) -> Vec<[f64; 3]> {
        let (p, g) = (self.cfg.patch, self.cfg.grid());
        let mut out = vec![[0.0; 3]; g * g];
        for (t, slot) in out.iter_mut().enumerate() {
            let (gi, gj) = (t / g, t % g);
            for i in gi * p..(gi + 1) * p {
                for j in gj * p..(gj + 1) * p {
                    let px = image.pixels.rgb(i, j);
                    (0..3).for_each(|k| slot[k] += f64::from(px[k]));
                }
            }
            slot.iter_mut().for_each(|v| *v /= (p * p) as f64);
        }
        out
    }
}

impl SelfSupervisedBackend for SyntheticSsl {
    fn attention(&self, image: &Image, seed: SeedPoint) -> Result<AttentionStack> {
        check_size(image, &self.cfg)?;
        let g = self.cfg.grid();
        let colors = self.patch_colors(image);
        let (qi, qj) = seed.to_grid(g, g);
        let q = colors[qi * g + qj];
        let mut values = Vec::with_capacity(self.cfg.heads * g * g);
        for h in 0..self.cfg.heads {
            let mut rng = rng::stream(
                self.cfg.seed,
                "synthetic-ssl",
                rng::digest(&image.id) ^ ((qi * g + qj) as u64) << 8 ^ h as u64,
            );
            // heads differ in colour bandwidth
            let bw = self.cfg.attention_color_bw * (0.75 + 0.25 * h as f64);
            let sbw = self.cfg.attention_spatial_bw;
            let mut head: Vec<f64> = (0..g * g)
                .map(|t| {
                    let c = colors[t];
                    let dc: f64 = (0..3).map(|k| (c[k] - q[k]).powi(2)).sum();
                    let ds = ((t / g) as f64 - qi as f64).powi(2) + ((t % g) as f64 - qj as f64).powi(2);
                    let a = (-dc / (2.0 * bw * bw)).exp() * (-ds / (2.0 * sbw * sbw)).exp();
                    a + self.cfg.attention_noise * rng.random::<f64>()
                })
                .collect();
            let total: f64 = head.iter().sum();
            head.iter_mut().for_each(|v| *v /= total);
            values.extend(head.into_iter().map(|v| v as f32));
        }
        AttentionStack::new(self.cfg.heads, g, g, values)
    }
}

/// Image generator.
pub struct Painter<'a> {
    pub cfg: &'a WorldConfig,
}

/// Size range of an object, as a fraction of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectScale {
    pub min: f64,
    pub max: f64,
}

impl Painter<'_> {
    /// Paint one object per `(class, scale)` in order (later objects occlude
    /// earlier ones). Returns the image and its class-id map.
    pub fn paint(&self, id: &str, objects: &[(ClassId, ObjectScale)], rng: &mut StreamRng) -> Sample {
        let s = self.cfg.image_size;
        let mut img = RgbImage::new(s, s);
        let mut gt = Plane::filled(s, s, 0u16);
        let base = rng.random_range(-15i32..=15);
        let jitter = self.cfg.pixel_noise as i32;
        for i in 0..s {
            for j in 0..s {
                let stripe = if (i / 8 + j / 8) % 2 == 0 { 6 } else { -6 };
                let px = BACKGROUND_RGB.map(|v| {
                    (i32::from(v) + base + stripe + rng.random_range(-jitter..=jitter)).clamp(0, 255) as u8
                });
                img.put(i, j, px);
            }
        }
        for &(class, scale) in objects {
            let sf = s as f64;
            let h = (rng.random_range(scale.min..=scale.max) * sf).round().max(2.0) as usize;
            let w = (rng.random_range(scale.min..=scale.max) * sf).round().max(2.0) as usize;
            let (h, w) = (h.min(s), w.min(s));
            let top = rng.random_range(0..=s - h);
            let left = rng.random_range(0..=s - w);
            let ellipse = rng.random_bool(0.5);
            let color = class_color(class);
            for i in top..top + h {
                for j in left..left + w {
                    if ellipse {
                        let di = (i as f64 + 0.5 - top as f64 - h as f64 / 2.0) / (h as f64 / 2.0);
                        let dj = (j as f64 + 0.5 - left as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
                        if di * di + dj * dj > 1.0 {
                            continue;
                        }
                    }
                    let px = color.map(|v| (i32::from(v) + rng.random_range(-jitter..=jitter)).clamp(0, 255) as u8);
                    img.put(i, j, px);
                    gt.set(i, j, class.0);
                }
            }
        }
        Sample { image: Image { id: id.to_string(), pixels: img }, gt: Some(gt) }
    }
}

/// Layout of a synthetic incremental benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub world: WorldConfig,
    pub base_classes: Vec<ClassId>,
    pub new_classes: Vec<ClassId>,
    pub n_base_train: usize,
    pub n_step_train: usize,
    pub n_val: usize,
    /// Held-out images with base classes only, for measuring forgetting.
    pub n_val_base: usize,
    /// Probability that a step image also shows an old-class object.
    pub step_old_object_prob: f64,
    pub base_scale: ObjectScale,
    pub new_scale: ObjectScale,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            world: WorldConfig::default(),
            base_classes: vec![ClassId(1), ClassId(2)],
            new_classes: vec![ClassId(4)],
            n_base_train: 60,
            n_step_train: 60,
            n_val: 40,
            n_val_base: 40,
            step_old_object_prob: 0.0,
            base_scale: ObjectScale { min: 0.3, max: 0.6 },
            new_scale: ObjectScale { min: 0.75, max: 0.95 },
            seed: 1,
        }
    }
}

/// Generated splits of a synthetic benchmark.
pub struct Benchmark {
    pub taxonomy: Taxonomy,
    pub base_train: Vec<Sample>,
    pub step_train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub val_base: Vec<Sample>,
}

fn present(gt: &Plane<u16>) -> BTreeSet<ClassId> {
    gt.data.iter().filter(|&&v| v != 0).map(|&v| ClassId(v)).collect()
}

impl Benchmark {
    pub fn generate(cfg: &BenchmarkConfig) -> Result<Self> {
        let taxonomy = Taxonomy::build(&cfg.base_classes, std::slice::from_ref(&cfg.new_classes))?.with_names(
            cfg.base_classes.iter().chain(&cfg.new_classes).map(|&c| (c, default_class_name(c))),
        );
        let painter = Painter { cfg: &cfg.world };
        let pick = |rng: &mut StreamRng, set: &[ClassId]| set[rng.random_range(0..set.len())];

        let mut rng = rng::stream(cfg.seed, "bench-base", 0);
        let base_train = (0..cfg.n_base_train)
            .map(|k| {
                let n = rng.random_range(1..=2);
                let objs: Vec<_> = (0..n).map(|_| (pick(&mut rng, &cfg.base_classes), cfg.base_scale)).collect();
                painter.paint(&format!("base{k:04}"), &objs, &mut rng)
            })
            .collect();

        let mut rng = rng::stream(cfg.seed, "bench-step", 0);
        let step_train = (0..cfg.n_step_train)
            .map(|k| {
                let mut objs = Vec::new();
                if rng.random_bool(cfg.step_old_object_prob) {
                    objs.push((pick(&mut rng, &cfg.base_classes), cfg.base_scale));
                }
                objs.push((pick(&mut rng, &cfg.new_classes), cfg.new_scale));
                painter.paint(&format!("step{k:04}"), &objs, &mut rng)
            })
            .collect();

        let mut rng = rng::stream(cfg.seed, "bench-val", 0);
        let val = (0..cfg.n_val)
            .map(|k| {
                let objs = vec![
                    (pick(&mut rng, &cfg.base_classes), cfg.base_scale),
                    (pick(&mut rng, &cfg.new_classes), cfg.new_scale),
                ];
                // alternate which object sits on top
                let objs: Vec<_> = if k % 2 == 0 { objs } else { objs.into_iter().rev().collect() };
                painter.paint(&format!("val{k:04}"), &objs, &mut rng)
            })
            .collect();
        let mut rng = rng::stream(cfg.seed, "bench-val-base", 0);
        let val_base = (0..cfg.n_val_base)
            .map(|k| {
                let n = rng.random_range(1..=2);
                let objs: Vec<_> = (0..n).map(|_| (pick(&mut rng, &cfg.base_classes), cfg.base_scale)).collect();
                painter.paint(&format!("valbase{k:04}"), &objs, &mut rng)
            })
            .collect();
        Ok(Benchmark { taxonomy, base_train, step_train, val, val_base })
    }

    /// Index entries for a split; `pixel_gt` marks pixel-supervised data.
    pub fn index(samples: &[Sample], pixel_gt: bool) -> DatasetIndex {
        DatasetIndex {
            entries: samples
                .iter()
                .filter_map(|s| {
                    let classes = present(s.gt.as_ref()?);
                    (!classes.is_empty()).then(|| IndexEntry { id: s.image.id.clone(), classes, pixel_gt })
                })
                .collect(),
        }
    }
}

pub fn default_class_name(c: ClassId) -> String {
    const NAMES: &[&str] = &["crimson", "emerald", "cobalt", "amber", "orchid", "teal", "tangerine", "umber"];
    NAMES.get(usize::from(c.0).wrapping_sub(1)).map_or_else(|| format!("class{}", c.0), |s| s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coseg::{self, Backends, CosegConfig};
    use std::sync::Arc;

    #[test]
    fn backends_are_deterministic() {
        let cfg = BenchmarkConfig { n_base_train: 2, n_step_train: 2, n_val: 1, ..Default::default() };
        let b = Benchmark::generate(&cfg).unwrap();
        let vlp = SyntheticVlp::new(cfg.world.clone(), &b.taxonomy);
        let ssl = SyntheticSsl::new(cfg.world.clone());
        let img = &b.step_train[0].image;
        assert_eq!(vlp.dense_features(img).unwrap(), vlp.dense_features(img).unwrap());
        let seed = SeedPoint { row: 3, col: 4, grid_h: 16, grid_w: 16 };
        let a = ssl.attention(img, seed).unwrap();
        assert_eq!(a, ssl.attention(img, seed).unwrap());
        assert_eq!((a.heads, a.height, a.width), (3, 16, 16));
        assert!(a.values.iter().all(|&v| v >= 0.0));
        assert!(vlp.embed_text("a photo of a amber.").is_ok());
        assert!(vlp.embed_text("a photo of a unicorn.").is_err());
    }

    #[test]
    fn pseudo_labels_recover_a_known_square() {
        // a 52x52 square (13x13 patches, ~66% of the grid) of the new class
        let world = WorldConfig { feature_noise: 0.1, feature_dropout: 0.0, ..Default::default() };
        let tax = Taxonomy::build(&[ClassId(1)], &[vec![ClassId(3)]])
            .unwrap()
            .with_names([(ClassId(1), "crimson".into()), (ClassId(3), "cobalt".into())]);
        let mut rng = rng::stream(3, "square", 0);
        let mut s = Painter { cfg: &world }.paint("sq", &[], &mut rng);
        let color = class_color(ClassId(3));
        let mut truth = Plane::filled(64, 64, 0u8);
        for i in 6..58 {
            for j in 8..60 {
                s.image.pixels.put(i, j, color);
                truth.set(i, j, 1);
            }
        }
        let backends = Backends {
            vlp: Arc::new(SyntheticVlp::new(world.clone(), &tax)),
            ssl: Arc::new(SyntheticSsl::new(world)),
        };
        let step_classes = vec![(ClassId(3), "cobalt".to_string())];
        let labels: BTreeSet<ClassId> = [ClassId(3)].into();
        let pls = coseg::generate_pseudo_labels(&s.image, &labels, &step_classes, &backends, &CosegConfig::default(), 9)
            .unwrap();
        assert_eq!(pls.source, coseg::MaskSource::Fused);
        let m = &pls.masks[&ClassId(3)];
        let inter = m.data.iter().zip(&truth.data).filter(|(&a, &b)| a == 1 && b == 1).count();
        let union = m.data.iter().zip(&truth.data).filter(|(&a, &b)| a == 1 || b == 1).count();
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.9, "iou {iou}");

        let init_only = CosegConfig { fusion: coseg::FusionOp::None, ..Default::default() };
        let pls = coseg::generate_pseudo_labels(&s.image, &labels, &step_classes, &backends, &init_only, 9).unwrap();
        assert_eq!(pls.source, coseg::MaskSource::InitOnly);
    }

    #[test]
    fn two_labels_give_two_planes() {
        let cfg = BenchmarkConfig {
            new_classes: vec![ClassId(3), ClassId(4)],
            n_base_train: 0,
            n_step_train: 0,
            n_val: 0,
            ..Default::default()
        };
        let b = Benchmark::generate(&cfg).unwrap();
        let world = cfg.world.clone();
        let mut rng = rng::stream(1, "two", 0);
        let small = ObjectScale { min: 0.3, max: 0.4 };
        let s = Painter { cfg: &world }.paint("two", &[(ClassId(3), small), (ClassId(4), small)], &mut rng);
        let backends = Backends {
            vlp: Arc::new(SyntheticVlp::new(world.clone(), &b.taxonomy)),
            ssl: Arc::new(SyntheticSsl::new(world)),
        };
        let step: Vec<(ClassId, String)> = [3u16, 4].iter().map(|&c| (ClassId(c), default_class_name(ClassId(c)))).collect();
        let labels: BTreeSet<ClassId> = [ClassId(3), ClassId(4)].into();
        let cfg = CosegConfig::default();
        let a = coseg::generate_pseudo_labels(&s.image, &labels, &step, &backends, &cfg, 5).unwrap();
        assert_eq!(a.masks.keys().copied().collect::<Vec<_>>(), vec![ClassId(3), ClassId(4)]);
        assert!(a.masks.values().all(|m| m.is_binary() && m.height == 64));
        let again = coseg::generate_pseudo_labels(&s.image, &labels, &step, &backends, &cfg, 5).unwrap();
        assert_eq!(a, again);
    }
}
