//! Soft-target binary cross-entropy losses and their gradients.
//!
//! Every BCE here is the mean over `classes x pixels` entries of
//! `-[t ln p + (1 - t) ln(1 - p)]`, with `p` clamped to `[EPS, 1 - EPS]`.

use std::collections::BTreeMap;

use crate::coseg::PseudoLabelSet;
use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::tensor::{BinaryPlane, Plane, Tensor3};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_pair(probs: &[f64], targets: &[f64]) -> Result<()> {
    if probs.len() != targets.len() {
        return Err(Error::shape(format!("{} probabilities vs {} targets", probs.len(), targets.len())));
    }
    if probs.is_empty() {
        return Err(Error::shape("empty loss input"));
    }
    Ok(())
}

/// Mean soft-target BCE over all entries.
pub fn soft_bce(probs: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(probs, targets)?;
    let sum: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = clamp(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Gradient of [`soft_bce`] with respect to the probabilities (zero where
/// the clamp is active).
pub fn soft_bce_grad(probs: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_pair(probs, targets)?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                return 0.0;
            }
            (-(t / p) + (1.0 - t) / (1.0 - p)) / n
        })
        .collect())
}

/// Gradient of [`soft_bce`] with respect to pre-sigmoid logits,
/// `(sigmoid(z) - t) / n`, given `probs = sigmoid(z)`.
pub fn soft_bce_logit_grad(probs: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_pair(probs, targets)?;
    let n = probs.len() as f64;
    Ok(probs.iter().zip(targets).map(|(&p, &t)| (p - t) / n).collect())
}

fn check_tensor(probs: &Tensor3<f64>, targets: &Tensor3<f64>) -> Result<()> {
    if !probs.same_shape(targets) {
        return Err(Error::shape(format!(
            "probabilities {}x{}x{} vs targets {}x{}x{}",
            probs.height, probs.width, probs.channels, targets.height, targets.width, targets.channels
        )));
    }
    Ok(())
}

/// Dense 0/1 targets for the new classes from pseudo-label masks already on
/// the model grid. Classes without a mask are absent from the image (all 0).
pub fn new_class_targets(
    height: usize,
    width: usize,
    new_classes: &[ClassId],
    masks: &BTreeMap<ClassId, BinaryPlane>,
) -> Result<Tensor3<f64>> {
    if let Some(c) = masks.keys().find(|c| !new_classes.contains(c)) {
        return Err(Error::UnknownClass(*c));
    }
    let mut t = Tensor3::zeros(height, width, new_classes.len());
    for (k, c) in new_classes.iter().enumerate() {
        if let Some(m) = masks.get(c) {
            if m.height != height || m.width != width {
                return Err(Error::shape(format!("mask {}x{} vs grid {height}x{width}", m.height, m.width)));
            }
            for (p, &v) in m.data.iter().enumerate() {
                t.data[p * new_classes.len() + k] = f64::from(v);
            }
        }
    }
    Ok(t)
}

/// New-class pixel BCE of the teacher against pseudo labels.
///
/// `probs` is `h x w x |new_classes|` with channels in `new_classes` order;
/// the pseudo labels are resampled (nearest) to `h x w`.
pub fn loss_bce_new(probs: &Tensor3<f64>, new_classes: &[ClassId], pseudo: &PseudoLabelSet) -> Result<f64> {
    if probs.channels != new_classes.len() {
        return Err(Error::shape(format!("{} channels for {} new classes", probs.channels, new_classes.len())));
    }
    let masks = pseudo.resized(probs.height, probs.width);
    let targets = new_class_targets(probs.height, probs.width, new_classes, &masks)?;
    soft_bce(&probs.data, &targets.data)
}

/// Old-class soft targets: the previous model's probabilities, with the
/// pasted class forced to 1 under the paste mask.
///
/// `old_classes` gives the channel order of `old_probs` (background first).
pub fn build_old_targets(
    old_probs: &Tensor3<f64>,
    old_classes: &[ClassId],
    paste: Option<(ClassId, &Plane<u8>)>,
) -> Result<Tensor3<f64>> {
    let mut t = old_probs.clone();
    if let Some((class, mask)) = paste {
        if class.is_background() {
            return Err(Error::NotOldClass(class));
        }
        let k = old_classes.iter().position(|&c| c == class).ok_or(Error::UnknownClass(class))?;
        if mask.height != t.height || mask.width != t.width {
            return Err(Error::shape(format!("paste mask {}x{} vs {}x{}", mask.height, mask.width, t.height, t.width)));
        }
        for (p, &m) in mask.data.iter().enumerate() {
            if m != 0 {
                t.pixel_mut(p)[k] = 1.0;
            }
        }
    }
    Ok(t)
}

/// Old-class BCE of the teacher against (augmented) previous-model targets.
pub fn loss_bce_old(probs: &Tensor3<f64>, targets: &Tensor3<f64>) -> Result<f64> {
    check_tensor(probs, targets)?;
    soft_bce(&probs.data, &targets.data)
}

/// Student BCE over every seen class against the mixed supervision.
pub fn loss_bce_all(probs: &Tensor3<f64>, q: &Tensor3<f64>) -> Result<f64> {
    check_tensor(probs, q)?;
    soft_bce(&probs.data, &q.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coseg::MaskSource;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(h: usize, w: usize, c: usize, v: Vec<f64>) -> Tensor3<f64> {
        Tensor3::from_vec(h, w, c, v).unwrap()
    }

    fn pls(h: usize, w: usize, masks: Vec<(u16, Vec<u8>)>) -> PseudoLabelSet {
        PseudoLabelSet {
            image_id: "x".into(),
            height: h,
            width: w,
            masks: masks.into_iter().map(|(c, m)| (ClassId(c), Plane::from_vec(h, w, m).unwrap())).collect(),
            source: MaskSource::Fused,
        }
    }

    #[test]
    fn single_pixel_half_probability_is_ln2() {
        let l = loss_bce_new(&t(1, 1, 1, vec![0.5]), &[ClassId(16)], &pls(1, 1, vec![(16, vec![1])])).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        let l = loss_bce_old(&t(1, 1, 1, vec![0.5]), &t(1, 1, 1, vec![0.5])).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        let l = loss_bce_all(&t(1, 2, 1, vec![0.5, 0.5]), &t(1, 2, 1, vec![0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let masks = vec![(16, vec![1, 0, 0, 1])];
        let probs = t(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]);
        let l = loss_bce_new(&probs, &[ClassId(16)], &pls(2, 2, masks)).unwrap();
        assert!(l <= 1.1e-7 && l > 0.0);
        let onehot = t(1, 1, 3, vec![0.0, 1.0, 0.0]);
        assert!(loss_bce_all(&onehot, &onehot).unwrap() <= 1.1e-7);
    }

    #[test]
    fn bce_new_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs = t(2, 2, 2, (0..8).map(|_| rng.random_range(0.01..0.99)).collect());
        let m16 = vec![1, 0, 1, 1];
        let p = pls(2, 2, vec![(16, m16.clone())]);
        let got = loss_bce_new(&probs, &[ClassId(16), ClassId(17)], &p).unwrap();
        let mut acc = 0.0;
        for px in 0..4 {
            for c in 0..2 {
                let m = if c == 0 { f64::from(m16[px]) } else { 0.0 };
                let pr = probs.data[px * 2 + c];
                acc += m * pr.ln() + (1.0 - m) * (1.0 - pr).ln();
            }
        }
        assert_abs_diff_eq!(got, -acc / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_label_downsampling_is_nearest() {
        let p = pls(4, 4, vec![(16, vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1])]);
        let targets = new_class_targets(2, 2, &[ClassId(16)], &p.resized(2, 2)).unwrap();
        assert_eq!(targets.data, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(new_class_targets(2, 2, &[ClassId(3)], &p.resized(2, 2)), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn old_targets_follow_paste_mask() {
        let old = t(1, 2, 3, vec![0.7, 0.2, 0.1, 0.6, 0.3, 0.4]);
        let classes = [ClassId(0), ClassId(3), ClassId(5)];
        assert_eq!(build_old_targets(&old, &classes, None).unwrap(), old);
        let mask = Plane::from_vec(1, 2, vec![1u8, 0]).unwrap();
        let got = build_old_targets(&old, &classes, Some((ClassId(3), &mask))).unwrap();
        // elementwise select oracle
        let expect: Vec<f64> = (0..6).map(|i| if i == 1 { 1.0 } else { old.data[i] }).collect();
        assert_eq!(got.data, expect);
        assert!(matches!(build_old_targets(&old, &classes, Some((ClassId(9), &mask))), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn shape_errors() {
        assert!(loss_bce_old(&t(1, 1, 2, vec![0.5; 2]), &t(1, 1, 1, vec![0.5])).is_err());
        assert!(loss_bce_all(&t(1, 2, 1, vec![0.5; 2]), &t(2, 1, 1, vec![0.5; 2])).is_err());
        assert!(loss_bce_new(&t(1, 1, 2, vec![0.5; 2]), &[ClassId(1)], &pls(1, 1, vec![])).is_err());
    }

    #[test]
    fn clamped_losses_are_finite() {
        let l = soft_bce(&[0.0, 1.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(l.is_finite());
        assert!(soft_bce_grad(&[0.0, 1.0], &[1.0, 0.0]).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn logit_gradient_is_chain_rule_of_prob_gradient() {
        let probs = [0.2, 0.7, 0.55];
        let targets = [1.0, 0.3, 0.0];
        let gp = soft_bce_grad(&probs, &targets).unwrap();
        let gz = soft_bce_logit_grad(&probs, &targets).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(gp[k] * probs[k] * (1.0 - probs[k]), gz[k], epsilon = 1e-12);
        }
    }
}
