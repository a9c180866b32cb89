//! Dense contrastive loss over sampled pixel embeddings.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::tensor::{BinaryPlane, Tensor3};

/// A sampled pixel: which image of the batch, which grid pixel, which class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointRef {
    pub image: usize,
    pub pixel: usize,
    pub class: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub point: PointRef,
    pub embedding: Vec<f64>,
}

/// Anchors of one mini-batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContrastBatch {
    pub anchors: Vec<Anchor>,
}

/// Sample `per_class` foreground points for every class that has any
/// foreground in the batch: uniformly without replacement when enough
/// pixels exist, with replacement otherwise. Classes are visited in
/// ascending id order.
pub fn sample_contrast_points<R: Rng + ?Sized>(
    batch_masks: &[&BTreeMap<ClassId, BinaryPlane>],
    per_class: usize,
    rng: &mut R,
) -> Result<Vec<PointRef>> {
    if per_class == 0 {
        return Err(Error::Config("per-class contrast points must be at least 1".into()));
    }
    let mut pools: BTreeMap<ClassId, Vec<(usize, usize)>> = BTreeMap::new();
    for (image, masks) in batch_masks.iter().enumerate() {
        for (&class, m) in masks.iter() {
            let pool = pools.entry(class).or_default();
            pool.extend(m.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(p, _)| (image, p)));
        }
    }
    pools.retain(|_, pool| !pool.is_empty());
    if pools.is_empty() {
        return Err(Error::NoForeground);
    }
    let mut out = Vec::with_capacity(pools.len() * per_class);
    for (class, pool) in pools {
        let picks: Vec<usize> = if pool.len() >= per_class {
            index::sample(rng, pool.len(), per_class).into_vec()
        } else {
            (0..per_class).map(|_| rng.random_range(0..pool.len())).collect()
        };
        out.extend(picks.into_iter().map(|k| PointRef { image: pool[k].0, pixel: pool[k].1, class }));
    }
    Ok(out)
}

/// Attach embeddings (one `h x w x e` field per batch image) to sampled points.
pub fn gather_anchors(points: &[PointRef], embeddings: &[&Tensor3<f32>]) -> ContrastBatch {
    ContrastBatch {
        anchors: points
            .iter()
            .map(|&point| Anchor {
                point,
                embedding: embeddings[point.image].pixel(point.pixel).iter().map(|&v| f64::from(v)).collect(),
            })
            .collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss value and gradient with respect to every anchor embedding.
///
/// For anchor `i` with positives `P` (other anchors of its class) and
/// negatives `N` (anchors of other classes):
///
/// `L_i = 1/|P| * sum_{p in P} -ln( e^{s_ip/tau} / (e^{s_ip/tau} + sum_{n in N} e^{s_in/tau}) )`
///
/// evaluated as `ln(1 + sum_n e^{(s_in - s_ip)/tau})`. The result is the mean
/// of `L_i` over anchors with at least one positive; anchors without
/// positives contribute nothing, and a batch without any yields 0.
pub fn loss_dcl_with_grad(batch: &ContrastBatch, tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::BadTemperature(tau));
    }
    let a = &batch.anchors;
    if a.is_empty() {
        return Err(Error::NoForeground);
    }
    let n = a.len();
    let dim = a[0].embedding.len();
    if let Some(bad) = a.iter().find(|x| x.embedding.len() != dim) {
        return Err(Error::DimMismatch { expected: dim, actual: bad.embedding.len() });
    }
    let sim: Vec<f64> = (0..n * n).map(|k| dot(&a[k / n].embedding, &a[k % n].embedding)).collect();
    let counted: Vec<usize> =
        (0..n).filter(|&i| (0..n).any(|j| j != i && a[j].point.class == a[i].point.class)).collect();
    let mut grad = vec![vec![0.0; dim]; n];
    if counted.is_empty() {
        return Ok((0.0, grad));
    }
    // d loss / d s_ij, accumulated then pushed to embeddings
    let mut ds = vec![0.0f64; n * n];
    let mut total = 0.0;
    let norm = counted.len() as f64;
    for &i in &counted {
        let class = a[i].point.class;
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && a[j].point.class == class).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| a[j].point.class != class).collect();
        let w = 1.0 / (pos.len() as f64 * norm);
        for &p in &pos {
            let sp = sim[i * n + p];
            let terms: Vec<f64> = neg.iter().map(|&q| ((sim[i * n + q] - sp) / tau).exp()).collect();
            let s: f64 = terms.iter().sum();
            total += w * s.ln_1p();
            let denom = tau * (1.0 + s);
            ds[i * n + p] -= w * s / denom;
            for (&q, &e) in neg.iter().zip(&terms) {
                ds[i * n + q] += w * e / denom;
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let g = ds[i * n + j];
            if g == 0.0 {
                continue;
            }
            // s_ij = e_i . e_j
            for d in 0..dim {
                grad[i][d] += g * a[j].embedding[d];
                grad[j][d] += g * a[i].embedding[d];
            }
        }
    }
    Ok((total, grad))
}

pub fn loss_dcl(batch: &ContrastBatch, tau: f64) -> Result<f64> {
    loss_dcl_with_grad(batch, tau).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Plane;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn anchor(class: u16, e: Vec<f64>) -> Anchor {
        Anchor { point: PointRef { image: 0, pixel: 0, class: ClassId(class) }, embedding: e }
    }

    #[test]
    fn one_positive_one_negative() {
        let b = ContrastBatch {
            anchors: vec![anchor(1, vec![1.0, 0.0]), anchor(1, vec![1.0, 0.0]), anchor(2, vec![0.0, 1.0])],
        };
        // anchors 0 and 1: s+ = 1, s- = 0; anchor 2 has no positive
        let expect = -((10.0f64).exp() / ((10.0f64).exp() + 1.0)).ln();
        assert_abs_diff_eq!(loss_dcl(&b, 0.1).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 4.5398899e-5, epsilon = 1e-11);
    }

    #[test]
    fn no_negatives_is_exactly_zero() {
        let b = ContrastBatch { anchors: vec![anchor(1, vec![0.6, 0.8]), anchor(1, vec![1.0, 0.0])] };
        assert_eq!(loss_dcl(&b, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn temperature_and_empty_checks() {
        let b = ContrastBatch { anchors: vec![anchor(1, vec![1.0])] };
        assert!(matches!(loss_dcl(&b, 0.0), Err(Error::BadTemperature(_))));
        assert!(matches!(loss_dcl(&b, -1.0), Err(Error::BadTemperature(_))));
        assert_eq!(loss_dcl(&b, 0.1).unwrap(), 0.0);
        assert!(loss_dcl(&ContrastBatch::default(), 0.1).is_err());
    }

    #[test]
    fn higher_positive_similarity_lowers_loss() {
        let mk = |x: f64| {
            let e = vec![x, (1.0 - x * x).sqrt()];
            ContrastBatch { anchors: vec![anchor(1, vec![1.0, 0.0]), anchor(1, e), anchor(2, vec![0.0, 1.0])] }
        };
        let mut last = f64::INFINITY;
        for x in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let l = loss_dcl(&mk(x), 0.1).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    fn masks(h: usize, w: usize, list: &[(u16, &[usize])]) -> BTreeMap<ClassId, BinaryPlane> {
        list.iter()
            .map(|&(c, on)| {
                let mut m = Plane::filled(h, w, 0u8);
                on.iter().for_each(|&p| m.data[p] = 1);
                (ClassId(c), m)
            })
            .collect()
    }

    #[test]
    fn sampling_counts_and_replacement() {
        let a = masks(4, 4, &[(16, &(0..12).collect::<Vec<_>>()), (17, &[13, 14, 15])]);
        let b = masks(4, 4, &[(16, &[0, 1])]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_contrast_points(&[&a, &b], 10, &mut rng).unwrap();
        assert_eq!(pts.len(), 20);
        assert_eq!(pts.iter().filter(|p| p.class == ClassId(16)).count(), 10);
        let c17: Vec<_> = pts.iter().filter(|p| p.class == ClassId(17)).collect();
        assert_eq!(c17.len(), 10);
        assert!(c17.iter().all(|p| p.image == 0 && [13, 14, 15].contains(&p.pixel)));
        let mut seen16: Vec<_> = pts.iter().filter(|p| p.class == ClassId(16)).map(|p| (p.image, p.pixel)).collect();
        seen16.sort();
        seen16.dedup();
        assert_eq!(seen16.len(), 10, "14 candidates: no replacement");

        let again = sample_contrast_points(&[&a, &b], 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pts, again);

        let empty = masks(2, 2, &[(16, &[])]);
        assert!(matches!(sample_contrast_points(&[&empty], 10, &mut rng), Err(Error::NoForeground)));
    }
}
