use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{decode_params, encode_params};
use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::nn::{relu_backward, relu_inplace, sigmoid_map, stem, Conv2d, Param, Parameterized};
use crate::tensor::{nearest_index, Plane, RgbImage, Tensor3};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMWS";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Shape of the reference segmentation net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    /// Side of the average-pooling stem; model grid = image side / patch.
    pub patch: usize,
    pub width: usize,
    /// Dilation of the second 3x3 block.
    pub dilation: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig { patch: 4, width: 16, dilation: 2 }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.dilation == 0 {
            return Err(Error::Config("student sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Stem, two 3x3 ReLU blocks (the backbone), and a 1x1 classifier whose
/// channels follow `classes` (background first).
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub cfg: StudentConfig,
    pub classes: Vec<ClassId>,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Conv2d,
}

pub struct StudentOutput {
    input: Tensor3<f32>,
    a1: Tensor3<f32>,
    /// Backbone activations fed to the classifier (and to a teacher).
    pub features: Tensor3<f32>,
    pub logits: Tensor3<f32>,
}

impl StudentModel {
    pub fn new<R: Rng + ?Sized>(cfg: StudentConfig, classes: Vec<ClassId>, rng: &mut R) -> Self {
        let conv1 = Conv2d::init(3, cfg.width, 3, 1, rng);
        let conv2 = Conv2d::init(cfg.width, cfg.width, 3, cfg.dilation, rng);
        let head = Conv2d::init(cfg.width, classes.len(), 1, 1, rng);
        StudentModel { cfg, classes, conv1, conv2, head }
    }

    pub fn zeros(cfg: StudentConfig, classes: Vec<ClassId>) -> Self {
        StudentModel {
            conv1: Conv2d::zeros(3, cfg.width, 3, 1),
            conv2: Conv2d::zeros(cfg.width, cfg.width, 3, cfg.dilation),
            head: Conv2d::zeros(cfg.width, classes.len(), 1, 1),
            cfg,
            classes,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.cfg.width
    }

    pub fn grid(&self, image: &RgbImage) -> Result<(usize, usize)> {
        let p = self.cfg.patch;
        if !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) || image.height == 0 || image.width == 0 {
            return Err(Error::shape(format!("image {}x{} is not a multiple of patch {p}", image.height, image.width)));
        }
        Ok((image.height / p, image.width / p))
    }

    pub fn forward(&self, image: &RgbImage) -> Result<StudentOutput> {
        self.grid(image)?;
        let input = stem(image, self.cfg.patch);
        let mut a1 = self.conv1.forward(&input)?;
        relu_inplace(&mut a1);
        let mut features = self.conv2.forward(&a1)?;
        relu_inplace(&mut features);
        let logits = self.head.forward(&features)?;
        Ok(StudentOutput { input, a1, features, logits })
    }

    pub fn probs(&self, image: &RgbImage) -> Result<Tensor3<f64>> {
        Ok(sigmoid_map(&self.forward(image)?.logits))
    }

    /// Accumulate parameter gradients for a logit gradient.
    pub fn backward(&mut self, out: &StudentOutput, grad_logits: &Tensor3<f32>) {
        let mut g = self.head.backward(&out.features, grad_logits, true).expect("input grad requested");
        relu_backward(&out.features, &mut g);
        let mut g = self.conv2.backward(&out.a1, &g, true).expect("input grad requested");
        relu_backward(&out.a1, &mut g);
        self.conv1.backward(&out.input, &g, false);
    }

    /// Per-pixel argmax class id at image resolution (ties go to the lower
    /// channel, i.e. background before any foreground class).
    pub fn predict(&self, image: &RgbImage) -> Result<Plane<u16>> {
        let logits = self.forward(image)?.logits;
        let grid: Vec<u16> = (0..logits.pixels())
            .map(|p| {
                let v = logits.pixel(p);
                let best = (1..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b });
                self.classes[best].0
            })
            .collect();
        let (gh, gw) = (logits.height, logits.width);
        let mut out = Plane::filled(image.height, image.width, 0u16);
        for i in 0..image.height {
            let gi = nearest_index(i, image.height, gh);
            for j in 0..image.width {
                out.data[i * image.width + j] = grid[gi * gw + nearest_index(j, image.width, gw)];
            }
        }
        Ok(out)
    }

    /// Copy of this model whose classifier covers `classes`, a superset of
    /// the current classes. Existing channels keep their weights; added
    /// channels start at zero.
    pub fn expanded(&self, classes: Vec<ClassId>) -> Result<Self> {
        if let Some(c) = self.classes.iter().find(|c| !classes.contains(c)) {
            return Err(Error::UnknownClass(*c));
        }
        let mut out = self.clone();
        let (ic, old_oc, oc) = (self.cfg.width, self.classes.len(), classes.len());
        let mut head = Conv2d::zeros(ic, oc, 1, 1);
        for (o_old, c) in self.classes.iter().enumerate() {
            let o = classes.iter().position(|x| x == c).expect("checked above");
            head.bias.value[o] = self.head.bias.value[o_old];
            for i in 0..ic {
                head.weight.value[i * oc + o] = self.head.weight.value[i * old_oc + o_old];
            }
        }
        out.head = head;
        out.classes = classes;
        out.zero_grad();
        out.reset_momentum();
        Ok(out)
    }

    fn reset_momentum(&mut self) {
        for p in self.params_mut() {
            p.velocity.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn encode(&self, taxonomy_digest: u64) -> Vec<u8> {
        encode_params(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &[taxonomy_digest], &self.flat_values())
    }

    /// Load a checkpoint into an already-shaped model, checking the digest.
    pub fn decode_into(&mut self, bytes: &[u8], taxonomy_digest: u64) -> Result<()> {
        let (pre, values) = decode_params(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 1)?;
        if pre[0] != taxonomy_digest {
            return Err(Error::format(format!(
                "checkpoint taxonomy digest {:016x} does not match {:016x}",
                pre[0], taxonomy_digest
            )));
        }
        self.load_flat(&values)
    }
}

impl Parameterized for StudentModel {
    /// Order: conv1, conv2, head; weight before bias.
    fn params(&self) -> Vec<&Param> {
        [&self.conv1, &self.conv2, &self.head].into_iter().flat_map(|c| c.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let StudentModel { conv1, conv2, head, .. } = self;
        [conv1, conv2, head].into_iter().flat_map(|c| c.params_mut()).collect()
    }
}
