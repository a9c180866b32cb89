use serde::{Deserialize, Serialize};

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Param { value, grad: vec![0.0; n], velocity: vec![0.0; n] }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
pub struct Sgd {
    pub cfg: SgdConfig,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd { cfg }
    }

    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) {
        let (lr, mu, wd) = (self.cfg.lr as f32, self.cfg.momentum as f32, self.cfg.weight_decay as f32);
        for p in params {
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(p.velocity.iter_mut()) {
                *v = mu * *v + (*g + wd * *w);
                *w -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update() {
        let mut p = Param::new(vec![1.0]);
        p.grad[0] = 0.5;
        let sgd = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 });
        sgd.step([&mut p]);
        assert!((p.value[0] - 0.95).abs() < 1e-7);
        sgd.step([&mut p]);
        // v = 0.9 * 0.5 + 0.5 = 0.95
        assert!((p.value[0] - 0.855).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = Param::new(vec![2.0]);
        Sgd::new(SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.1 }).step([&mut p]);
        assert!((p.value[0] - 1.9).abs() < 1e-7);
    }
}
