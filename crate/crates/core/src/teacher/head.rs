use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Conv2d, Param, Parameterized};
use crate::tensor::Tensor3;

/// Which activations feed the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLayer {
    /// Concatenated branch responses before the merge layer.
    #[default]
    Penultimate,
    /// The class logits themselves.
    Logits,
}

/// Plug-in teacher: parallel dilated 3x3 branches, concatenated and merged by
/// a 1x1 convolution into class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHead {
    pub branches: Vec<Conv2d>,
    pub merge: Conv2d,
    pub embedding_layer: EmbeddingLayer,
}

pub const DEFAULT_RATES: [usize; 4] = [1, 2, 4, 8];

/// Forward intermediates needed by [`TeacherHead::backward`].
pub struct TeacherOutput {
    pub logits: Tensor3<f32>,
    /// Unit-norm pixel embeddings.
    pub embeddings: Tensor3<f32>,
    concat_pre: Tensor3<f32>,
    concat_post: Tensor3<f32>,
    norms: Vec<f32>,
}

fn l2_normalize(x: &Tensor3<f32>) -> (Tensor3<f32>, Vec<f32>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.pixels());
    for p in 0..x.pixels() {
        let v = out.pixel_mut(p);
        let n = v.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt() as f32;
        norms.push(n);
        if n > 1e-12 {
            v.iter_mut().for_each(|a| *a /= n);
        }
    }
    (out, norms)
}

/// Backprop through `e = z / |z|`: `dz = (de - e (e . de)) / |z|`.
fn l2_normalize_backward(e: &Tensor3<f32>, norms: &[f32], de: &Tensor3<f32>) -> Tensor3<f32> {
    let mut dz = de.clone();
    for p in 0..e.pixels() {
        let n = norms[p];
        let ev = e.pixel(p);
        let g = dz.pixel_mut(p);
        if n <= 1e-12 {
            g.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let proj: f32 = ev.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (gv, &evv) in g.iter_mut().zip(ev) {
            *gv = (*gv - evv * proj) / n;
        }
    }
    dz
}

impl TeacherHead {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        branch_channels: usize,
        rates: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let branches: Vec<Conv2d> =
            rates.iter().map(|&r| Conv2d::init(in_channels, branch_channels, 3, r, rng)).collect();
        let merge = Conv2d::init(branch_channels * rates.len(), num_classes, 1, 1, rng);
        TeacherHead { branches, merge, embedding_layer: EmbeddingLayer::default() }
    }

    pub fn zeros(in_channels: usize, branch_channels: usize, rates: &[usize], num_classes: usize) -> Self {
        TeacherHead {
            branches: rates.iter().map(|&r| Conv2d::zeros(in_channels, branch_channels, 3, r)).collect(),
            merge: Conv2d::zeros(branch_channels * rates.len(), num_classes, 1, 1),
            embedding_layer: EmbeddingLayer::default(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.merge.out_channels
    }

    pub fn forward(&self, features: &Tensor3<f32>) -> Result<TeacherOutput> {
        if features.channels != self.in_channels() {
            return Err(Error::shape(format!(
                "teacher expects {} feature channels, got {}",
                self.in_channels(),
                features.channels
            )));
        }
        let outs = self.branches.iter().map(|b| b.forward(features)).collect::<Result<Vec<_>>>()?;
        let bc = self.branches[0].out_channels;
        let total = bc * outs.len();
        let mut concat_pre = Tensor3::zeros(features.height, features.width, total);
        for p in 0..features.pixels() {
            let dst = concat_pre.pixel_mut(p);
            for (k, o) in outs.iter().enumerate() {
                dst[k * bc..(k + 1) * bc].copy_from_slice(o.pixel(p));
            }
        }
        let mut concat_post = concat_pre.clone();
        relu_inplace(&mut concat_post);
        let logits = self.merge.forward(&concat_post)?;
        let (embeddings, norms) = match self.embedding_layer {
            EmbeddingLayer::Penultimate => l2_normalize(&concat_pre),
            EmbeddingLayer::Logits => l2_normalize(&logits),
        };
        Ok(TeacherOutput { logits, embeddings, concat_pre, concat_post, norms })
    }

    /// Accumulate parameter gradients from a logit gradient and an optional
    /// embedding gradient. The input features receive no gradient.
    pub fn backward(
        &mut self,
        features: &Tensor3<f32>,
        out: &TeacherOutput,
        grad_logits: &Tensor3<f32>,
        grad_embeddings: Option<&Tensor3<f32>>,
    ) {
        let mut grad_logits = grad_logits.clone();
        let mut extra_pre = None;
        if let Some(de) = grad_embeddings {
            let dz = l2_normalize_backward(&out.embeddings, &out.norms, de);
            match self.embedding_layer {
                EmbeddingLayer::Logits => {
                    grad_logits.data.iter_mut().zip(&dz.data).for_each(|(g, d)| *g += d);
                }
                EmbeddingLayer::Penultimate => extra_pre = Some(dz),
            }
        }
        let mut g_concat = self.merge.backward(&out.concat_post, &grad_logits, true).expect("input grad requested");
        relu_backward(&out.concat_post, &mut g_concat);
        if let Some(dz) = extra_pre {
            g_concat.data.iter_mut().zip(&dz.data).for_each(|(g, d)| *g += d);
        }
        let bc = self.branches[0].out_channels;
        for (k, branch) in self.branches.iter_mut().enumerate() {
            let slice = g_concat.select_channels(&(k * bc..(k + 1) * bc).collect::<Vec<_>>());
            branch.backward(features, &slice, false);
        }
        let _ = &out.concat_pre;
    }
}

impl Parameterized for TeacherHead {
    /// Order: each branch (weight, bias) by ascending rate, then the merge.
    fn params(&self) -> Vec<&Param> {
        self.branches.iter().flat_map(|b| b.params()).chain(self.merge.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.branches.iter_mut().flat_map(|b| b.params_mut()).chain(self.merge.params_mut()).collect()
    }
}
