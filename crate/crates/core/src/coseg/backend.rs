//! Foundation-model providers.
//!
//! The pipeline consumes two kinds of pretrained models as opaque services:
//! a vision-language model that yields dense image features plus text
//! embeddings, and a self-supervised model that yields per-head attention
//! maps for a query location. Three adapters ship here: precomputed tensors
//! in a directory, an HTTP service, and the procedural backends in
//! [`crate::synthetic`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use crate::coseg::cache::{Payload, PlaneFile};
use crate::coseg::features::DenseFeatureMap;
use crate::dataset::{encode_png_rgb, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const TIMEOUT_ENV: &str = "FMWISS_BACKEND_TIMEOUT_MS";
const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// Attention of one query location over the key grid, for every head.
/// `values` is head-major: `values[k * h * w + i * w + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AttentionStack {
    pub fn new(heads: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != heads * height * width {
            return Err(Error::shape(format!(
                "attention {heads}x{height}x{width} needs {} values, got {}",
                heads * height * width,
                values.len()
            )));
        }
        if heads == 0 {
            return Err(Error::shape("attention stack without heads"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::BackendFailure {
                endpoint: "attention".into(),
                message: format!("attention value {v} is negative or NaN"),
            });
        }
        Ok(AttentionStack { heads, height, width, values })
    }

    pub fn head(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }
}

/// A seed location on a `grid_h x grid_w` feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPoint {
    pub row: usize,
    pub col: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl SeedPoint {
    /// Project onto a `h x w` token grid.
    pub fn to_grid(self, h: usize, w: usize) -> (usize, usize) {
        (
            crate::tensor::nearest_index(self.row, self.grid_h, h),
            crate::tensor::nearest_index(self.col, self.grid_w, w),
        )
    }
}

/// Vision-language model: dense features and text embeddings in a joint space.
/// Implementations must be deterministic and tolerate concurrent calls.
pub trait VisionLanguageBackend: Send + Sync {
    /// Raw (unnormalized) `h x w x d` features.
    fn dense_features(&self, image: &Image) -> Result<DenseFeatureMap>;
    /// Raw `d`-dimensional embedding of one prompt.
    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>>;
}

/// Self-supervised model: last-block attention for a query location.
pub trait SelfSupervisedBackend: Send + Sync {
    fn attention(&self, image: &Image, seed: SeedPoint) -> Result<AttentionStack>;
}

/// Parsed backend selector: `synthetic`, `dir:<path>`, or `http:<url>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Synthetic,
    Dir(PathBuf),
    Http(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(BackendSpec::Synthetic)
        } else if let Some(p) = s.strip_prefix("dir:") {
            Ok(BackendSpec::Dir(PathBuf::from(p)))
        } else if let Some(u) = s.strip_prefix("http:") {
            // accept both `http:<url>` and `http://host`
            let url = if u.starts_with("//") { format!("http:{u}") } else { u.to_string() };
            Ok(BackendSpec::Http(url))
        } else {
            Err(Error::Config(format!("unknown backend spec {s:?}")))
        }
    }
}

/// Precomputed tensors on disk.
///
/// ```text
/// <dir>/<image_id>.vlp.fmwm   float planes, one per feature channel
/// <dir>/<image_id>.ssl.fmwm   float planes, (token * heads + head) over an h x w key grid
/// <dir>/text.json             {"<prompt>": [f32, ...], ...}
/// ```
pub struct DirBackend {
    root: PathBuf,
    text: Option<HashMap<String, Vec<f32>>>,
}

impl DirBackend {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingPrerequisite(root.to_path_buf()));
        }
        let text_path = root.join("text.json");
        let text = if text_path.exists() {
            let s = std::fs::read_to_string(&text_path)?;
            Some(serde_json::from_str(&s).map_err(|e| Error::format(format!("{}: {e}", text_path.display())))?)
        } else {
            None
        };
        Ok(DirBackend { root: root.to_path_buf(), text })
    }

    fn load(&self, image: &Image, kind: &str) -> Result<PlaneFile> {
        let path = self.root.join(format!("{}.{kind}.fmwm", image.id));
        let bytes = std::fs::read(&path).map_err(|e| Error::BackendFailure {
            endpoint: path.display().to_string(),
            message: e.to_string(),
        })?;
        PlaneFile::decode(&bytes)
    }
}

impl VisionLanguageBackend for DirBackend {
    fn dense_features(&self, image: &Image) -> Result<DenseFeatureMap> {
        Ok(DenseFeatureMap(self.load(image, "vlp")?.to_tensor()?))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        self.text.as_ref().and_then(|t| t.get(prompt)).cloned().ok_or_else(|| Error::BackendFailure {
            endpoint: self.root.join("text.json").display().to_string(),
            message: format!("no embedding for prompt {prompt:?}"),
        })
    }
}

impl SelfSupervisedBackend for DirBackend {
    fn attention(&self, image: &Image, seed: SeedPoint) -> Result<AttentionStack> {
        let f = self.load(image, "ssl")?;
        let (h, w) = (f.height, f.width);
        let tokens = h * w;
        if tokens == 0 || f.tags.len() % tokens != 0 {
            return Err(Error::format(format!("ssl file has {} planes for a {h}x{w} grid", f.tags.len())));
        }
        let heads = f.tags.len() / tokens;
        let (r, c) = seed.to_grid(h, w);
        let token = r * w + c;
        let Payload::Float(v) = &f.payload else {
            return Err(Error::format("ssl file must carry a float payload"));
        };
        let start = token * heads * tokens;
        AttentionStack::new(heads, h, w, v[start..start + heads * tokens].to_vec())
    }
}

/// Remote model server.
///
/// * `POST {base}/vlp/features` with PNG body -> float tensor `h x w x d`
/// * `POST {base}/vlp/text` with UTF-8 prompt body -> float tensor `1 x 1 x d`
/// * `POST {base}/ssl/attention?row=&col=&grid_h=&grid_w=` with PNG body ->
///   float tensor whose planes are the heads
///
/// Responses use the `FMWM` container with a float payload.
pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base: &str) -> Self {
        let ms = std::env::var(TIMEOUT_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_TIMEOUT_MS);
        Self::with_timeout(base, Duration::from_millis(ms))
    }

    pub fn with_timeout(base: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpBackend { base: base.trim_end_matches('/').to_string(), agent }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn post(&self, path: &str, content_type: &str, body: &[u8]) -> Result<PlaneFile> {
        let url = format!("{}{path}", self.base);
        let fail = |message: String| Error::BackendFailure { endpoint: url.clone(), message };
        let mut resp = self
            .agent
            .post(&url)
            .header("Content-Type", content_type)
            .send(body)
            .map_err(|e| fail(e.to_string()))?;
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(|e| fail(e.to_string()))?;
        PlaneFile::decode(&bytes).map_err(|e| fail(e.to_string()))
    }

    /// Cheap reachability probe used before any side effects. Any HTTP
    /// response counts as reachable; only transport failures are errors.
    pub fn probe(&self) -> Result<()> {
        let url = format!("{}/vlp/text", self.base);
        match self.agent.post(&url).header("Content-Type", "text/plain; charset=utf-8").send("probe".as_bytes()) {
            Ok(_) | Err(ureq::Error::StatusCode(_)) => Ok(()),
            Err(e) => Err(Error::BackendFailure { endpoint: url, message: e.to_string() }),
        }
    }
}

impl VisionLanguageBackend for HttpBackend {
    fn dense_features(&self, image: &Image) -> Result<DenseFeatureMap> {
        let png = encode_png_rgb(&image.pixels)?;
        Ok(DenseFeatureMap(self.post("/vlp/features", "image/png", &png)?.to_tensor()?))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        let t: Tensor3<f32> = self.post("/vlp/text", "text/plain; charset=utf-8", prompt.as_bytes())?.to_tensor()?;
        Ok(t.data)
    }
}

impl SelfSupervisedBackend for HttpBackend {
    fn attention(&self, image: &Image, seed: SeedPoint) -> Result<AttentionStack> {
        let png = encode_png_rgb(&image.pixels)?;
        let path = format!(
            "/ssl/attention?row={}&col={}&grid_h={}&grid_w={}",
            seed.row, seed.col, seed.grid_h, seed.grid_w
        );
        let f = self.post(&path, "image/png", &png)?;
        let Payload::Float(v) = f.payload else {
            return Err(Error::format("attention response must carry a float payload"));
        };
        AttentionStack::new(f.tags.len(), f.height, f.width, v)
    }
}

/// Shared handles to the two model providers.
#[derive(Clone)]
pub struct Backends {
    pub vlp: Arc<dyn VisionLanguageBackend>,
    pub ssl: Arc<dyn SelfSupervisedBackend>,
}
