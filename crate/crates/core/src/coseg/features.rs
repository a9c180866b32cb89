//! Pixel-text score maps from a vision-language backend.

use crate::coseg::backend::VisionLanguageBackend;
use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::tensor::Tensor3;

/// Dense `h x w x d` image features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap(pub Tensor3<f32>);

impl DenseFeatureMap {
    pub fn dim(&self) -> usize {
        self.0.channels
    }
}

/// One unit-norm text embedding per class, rows in ascending class order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingMatrix {
    pub classes: Vec<ClassId>,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl TextEmbeddingMatrix {
    pub fn row(&self, k: usize) -> &[f32] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }
}

/// Per-pixel, per-class scores. Channel `k` belongs to `classes[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub classes: Vec<ClassId>,
    pub values: Tensor3<f32>,
}

impl ScoreMap {
    pub fn class_index(&self, class: ClassId) -> Result<usize> {
        self.classes.iter().position(|&c| c == class).ok_or(Error::UnknownClass(class))
    }
}

const MIN_NORM: f64 = 1e-12;

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scale `v` to unit L2 norm. Returns `None` for (near) zero vectors.
pub(crate) fn unit(v: &[f32]) -> Option<Vec<f32>> {
    let n = l2(v);
    (n >= MIN_NORM).then(|| v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// L2-normalize every channel vector.
pub fn normalize_features(raw: &DenseFeatureMap) -> Result<DenseFeatureMap> {
    let t = &raw.0;
    if t.channels == 0 {
        return Err(Error::DimMismatch { expected: 1, actual: 0 });
    }
    let mut out = t.clone();
    for p in 0..t.pixels() {
        let v = unit(t.pixel(p)).ok_or(Error::ZeroVector(p / t.width, p % t.width))?;
        out.pixel_mut(p).copy_from_slice(&v);
    }
    Ok(DenseFeatureMap(out))
}

/// Prompt-ensembled text embeddings.
///
/// Each template's `{}` is replaced by the class name; the backend embedding
/// of every filled prompt is normalized, the normalized embeddings are
/// averaged, and the mean is normalized again.
pub fn encode_text(
    backend: &dyn VisionLanguageBackend,
    classes: &[(ClassId, String)],
    templates: &[String],
) -> Result<TextEmbeddingMatrix> {
    if classes.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    if templates.is_empty() {
        return Err(Error::Config("no prompt templates".into()));
    }
    let mut sorted: Vec<&(ClassId, String)> = classes.iter().collect();
    sorted.sort_by_key(|(c, _)| *c);

    let mut dim = 0;
    let mut values = Vec::new();
    for (class, name) in &sorted {
        let mut acc: Vec<f64> = Vec::new();
        for t in templates {
            let prompt = t.replace("{}", name);
            let e = backend.embed_text(&prompt)?;
            let e = unit(&e).ok_or_else(|| Error::BackendFailure {
                endpoint: "text".into(),
                message: format!("zero embedding for prompt {prompt:?}"),
            })?;
            if acc.is_empty() {
                dim = e.len();
                acc = vec![0.0; dim];
            } else if e.len() != dim {
                return Err(Error::DimMismatch { expected: dim, actual: e.len() });
            }
            for (a, x) in acc.iter_mut().zip(&e) {
                *a += f64::from(*x);
            }
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < MIN_NORM {
            return Err(Error::BackendFailure {
                endpoint: "text".into(),
                message: format!("prompt ensemble for class {class} cancels out"),
            });
        }
        values.extend(acc.iter().map(|x| (x / n) as f32));
    }
    Ok(TextEmbeddingMatrix { classes: sorted.iter().map(|(c, _)| *c).collect(), dim, values })
}

/// Pixel-text cosine scores: `features[i, j] . text[c]` for every class.
pub fn initial_mask(features: &DenseFeatureMap, text: &TextEmbeddingMatrix) -> Result<ScoreMap> {
    let f = &features.0;
    if f.channels != text.dim {
        return Err(Error::DimMismatch { expected: f.channels, actual: text.dim });
    }
    let k = text.classes.len();
    let mut values = Tensor3::zeros(f.height, f.width, k);
    for p in 0..f.pixels() {
        let v = f.pixel(p);
        let out = values.pixel_mut(p);
        for (c, o) in out.iter_mut().enumerate() {
            let dot: f64 = v.iter().zip(text.row(c)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            *o = dot as f32;
        }
    }
    Ok(ScoreMap { classes: text.classes.clone(), values })
}
