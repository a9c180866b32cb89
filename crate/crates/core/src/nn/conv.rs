use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Square "same" convolution. Weights are laid out `[tap][in][out]` with
/// taps in row-major kernel order, so the output-channel loop is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight: Param::new(vec![0.0; kernel * kernel * in_channels * out_channels]),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    /// He-normal initialized weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, kernel, dilation);
        let fan_in = (kernel * kernel * in_channels) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        c.weight.value.iter_mut().for_each(|w| *w = normal.sample(rng) as f32);
        c
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let r = (self.kernel / 2) as isize;
        let d = self.dilation as isize;
        (0..self.kernel * self.kernel).map(move |t| {
            let ky = (t / self.kernel) as isize - r;
            let kx = (t % self.kernel) as isize - r;
            (t, ky * d, kx * d)
        })
    }

    fn check_input(&self, x: &Tensor3<f32>) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor3<f32>) -> Result<Tensor3<f32>> {
        self.check_input(x)?;
        let (h, w, ic, oc) = (x.height, x.width, self.in_channels, self.out_channels);
        let mut out = Tensor3::zeros(h, w, oc);
        let wt = &self.weight.value;
        for i in 0..h {
            for j in 0..w {
                let o = &mut out.data[(i * w + j) * oc..(i * w + j + 1) * oc];
                o.copy_from_slice(&self.bias.value);
                for (t, dy, dx) in self.taps() {
                    let (si, sj) = (i as isize + dy, j as isize + dx);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        continue;
                    }
                    let src = x.pixel(si as usize * w + sj as usize);
                    let wtap = &wt[t * ic * oc..(t + 1) * ic * oc];
                    for (c, &xv) in src.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let row = &wtap[c * oc..(c + 1) * oc];
                        for (ov, &wv) in o.iter_mut().zip(row) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulate parameter gradients for output gradient `gout` given the
    /// forward input `x`. Returns the input gradient when `want_input` is set.
    pub fn backward(&mut self, x: &Tensor3<f32>, gout: &Tensor3<f32>, want_input: bool) -> Option<Tensor3<f32>> {
        let (h, w, ic, oc) = (x.height, x.width, self.in_channels, self.out_channels);
        let mut gin = want_input.then(|| Tensor3::zeros(h, w, ic));
        for p in 0..h * w {
            let g = gout.pixel(p);
            for (b, &gv) in self.bias.grad.iter_mut().zip(g) {
                *b += gv;
            }
        }
        let taps: Vec<_> = self.taps().collect();
        for i in 0..h {
            for j in 0..w {
                let g = gout.pixel(i * w + j);
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for &(t, dy, dx) in &taps {
                    let (si, sj) = (i as isize + dy, j as isize + dx);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        continue;
                    }
                    let sp = si as usize * w + sj as usize;
                    let src = x.pixel(sp);
                    let base = t * ic * oc;
                    for (c, &xv) in src.iter().enumerate() {
                        let off = base + c * oc;
                        if xv != 0.0 {
                            let grow = &mut self.weight.grad[off..off + oc];
                            for (gw, &gv) in grow.iter_mut().zip(g) {
                                *gw += xv * gv;
                            }
                        }
                        if let Some(gin) = gin.as_mut() {
                            let row = &self.weight.value[off..off + oc];
                            let s: f32 = row.iter().zip(g).map(|(&a, &b)| a * b).sum();
                            gin.data[sp * ic + c] += s;
                        }
                    }
                }
            }
        }
        gin
    }
}

impl Parameterized for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu_inplace(x: &mut Tensor3<f32>) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zero the gradient where the (post-activation) output was not positive.
pub fn relu_backward(activated: &Tensor3<f32>, grad: &mut Tensor3<f32>) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
