//! Minimal CPU convolution stack with hand-written backward passes.
//!
//! Activations are channel-last `Tensor3<f32>`. Convolutions are "same"
//! padded (zero padding), stride 1, optionally dilated.

mod conv;
mod optim;

pub use conv::{relu_backward, relu_inplace, Conv2d};
pub use optim::{Param, Sgd, SgdConfig};

use crate::tensor::{RgbImage, Tensor3};

/// Average-pool an RGB image by `patch x patch` blocks and map intensities to
/// `[-1, 1]`. Image sides must be multiples of `patch`.
pub fn stem(image: &RgbImage, patch: usize) -> Tensor3<f32> {
    let (h, w) = (image.height / patch, image.width / patch);
    let mut out = Tensor3::zeros(h, w, 3);
    let scale = 1.0 / (patch * patch) as f32;
    for gi in 0..h {
        for gj in 0..w {
            let mut acc = [0u32; 3];
            for i in gi * patch..(gi + 1) * patch {
                for j in gj * patch..(gj + 1) * patch {
                    let px = image.rgb(i, j);
                    (0..3).for_each(|k| acc[k] += u32::from(px[k]));
                }
            }
            let o = out.pixel_mut(gi * w + gj);
            for k in 0..3 {
                o[k] = (acc[k] as f32 * scale / 255.0 - 0.5) * 2.0;
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-f64::from(z)).exp())
}

pub fn sigmoid_map(logits: &Tensor3<f32>) -> Tensor3<f64> {
    Tensor3 {
        height: logits.height,
        width: logits.width,
        channels: logits.channels,
        data: logits.data.iter().map(|&z| sigmoid(z)).collect(),
    }
}

/// Something with trainable parameters in a fixed, documented order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Concatenated parameter values.
    fn flat_values(&self) -> Vec<f32> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn load_flat(&mut self, values: &[f32]) -> crate::Result<()> {
        let n = self.param_count();
        if values.len() != n {
            return Err(crate::Error::format(format!("checkpoint has {} parameters, model needs {n}", values.len())));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let len = p.value.len();
            p.value.copy_from_slice(&values[off..off + len]);
            off += len;
        }
        Ok(())
    }
}
