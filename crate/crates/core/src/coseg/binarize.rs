//! Top-K binarization, seed sampling, seed-guided attention, and mask fusion.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coseg::backend::{SeedPoint, SelfSupervisedBackend};
use crate::coseg::features::ScoreMap;
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::tensor::{BinaryPlane, Plane};

/// Number of pixels kept by a top-`k_percent` rule over `n` pixels:
/// `ceil(k_percent / 100 * n)`.
pub fn topk_count(k_percent: f64, n: usize) -> Result<usize> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::BadPercentage(k_percent));
    }
    if k_percent.fract() == 0.0 {
        let k = k_percent as usize;
        return Ok((k * n).div_ceil(100));
    }
    Ok(((k_percent * n as f64) / 100.0).ceil() as usize)
}

/// Keep the `ceil(K% * h * w)` largest values. Ties go to the earlier pixel
/// in row-major order; NaN ranks below everything.
pub fn binarize_topk(map: &Plane<f32>, k_percent: f64) -> Result<BinaryPlane> {
    let keep = topk_count(k_percent, map.len())?;
    let key = |v: f32| if v.is_nan() { f32::NEG_INFINITY } else { v };
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| key(map.data[b]).total_cmp(&key(map.data[a])).then(a.cmp(&b)));
    let mut out = BinaryPlane::zeros(map.height, map.width);
    for &p in &order[..keep] {
        out.data[p] = 1;
    }
    Ok(out)
}

/// Seed-sampling foreground of one class: pixels where `class` wins the
/// argmax over the score map's classes (ties to the lower class id) and
/// that survive top-`k_fg` binarization of the class's own plane.
pub fn foreground_of(init: &ScoreMap, class: ClassId, k_fg: f64) -> Result<BinaryPlane> {
    let k = init.class_index(class)?;
    let own = init.values.channel(k);
    let mut fg = binarize_topk(&own, k_fg)?;
    for p in 0..init.values.pixels() {
        let px = init.values.pixel(p);
        let winner = px
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > px[best] { i } else { best });
        if winner != k {
            fg.data[p] = 0;
        }
    }
    Ok(fg)
}

/// Draw `n` seed pixels from the foreground: without replacement when the
/// foreground has at least `n` pixels, otherwise with replacement.
pub fn sample_seeds<R: Rng + ?Sized>(fg: &BinaryPlane, n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::Config("seed count must be at least 1".into()));
    }
    let pixels: Vec<usize> = fg.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(p, _)| p).collect();
    if pixels.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let picks: Vec<usize> = if pixels.len() >= n {
        index::sample(rng, pixels.len(), n).into_iter().map(|i| pixels[i]).collect()
    } else {
        (0..n).map(|_| pixels[rng.random_range(0..pixels.len())]).collect()
    };
    Ok(picks.into_iter().map(|p| (p / fg.width, p % fg.width)).collect())
}

/// Mean attention over heads and seeds, before binarization.
pub fn mean_seed_attention(
    backend: &dyn SelfSupervisedBackend,
    image: &Image,
    seeds: &[SeedPoint],
) -> Result<Plane<f32>> {
    if seeds.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let mut acc: Vec<f64> = Vec::new();
    let (mut h, mut w) = (0, 0);
    for &seed in seeds {
        let stack = backend.attention(image, seed)?;
        if acc.is_empty() {
            (h, w) = (stack.height, stack.width);
            acc = vec![0.0; h * w];
        } else if (stack.height, stack.width) != (h, w) {
            return Err(Error::shape(format!(
                "attention grid changed from {h}x{w} to {}x{}",
                stack.height, stack.width
            )));
        }
        let mut seed_mean = vec![0.0f64; h * w];
        for k in 0..stack.heads {
            for (m, &v) in seed_mean.iter_mut().zip(stack.head(k)) {
                *m += f64::from(v);
            }
        }
        for (a, m) in acc.iter_mut().zip(seed_mean) {
            *a += m / stack.heads as f64;
        }
    }
    let n = seeds.len() as f64;
    Plane::from_vec(h, w, acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Category-aware attention mask: average the per-head attention of every
/// seed, then keep the top `k_percent` locations. Returned at the
/// backend's attention-grid resolution.
pub fn seed_attention_mask(
    backend: &dyn SelfSupervisedBackend,
    image: &Image,
    seeds: &[SeedPoint],
    k_percent: f64,
) -> Result<BinaryPlane> {
    topk_count(k_percent, 1)?;
    binarize_topk(&mean_seed_attention(backend, image, seeds)?, k_percent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionOp {
    #[default]
    Union,
    Intersection,
    None,
}

pub fn fuse_masks(init: &BinaryPlane, seeds: &BinaryPlane, op: FusionOp) -> Result<BinaryPlane> {
    if !init.same_shape(seeds) {
        return Err(Error::shape(format!(
            "fusing {}x{} with {}x{}",
            init.height, init.width, seeds.height, seeds.width
        )));
    }
    let data = match op {
        FusionOp::None => init.data.clone(),
        FusionOp::Union => init.data.iter().zip(&seeds.data).map(|(&a, &b)| a | b).collect(),
        FusionOp::Intersection => init.data.iter().zip(&seeds.data).map(|(&a, &b)| a & b).collect(),
    };
    Plane::from_vec(init.height, init.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coseg::backend::AttentionStack;
    use crate::tensor::{RgbImage, Tensor3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn plane(h: usize, w: usize, v: Vec<f32>) -> Plane<f32> {
        Plane::from_vec(h, w, v).unwrap()
    }

    #[test]
    fn topk_on_one_to_nine() {
        let m = plane(3, 3, (1..=9).map(|v| v as f32).collect());
        let b = binarize_topk(&m, 70.0).unwrap();
        // sort-and-count oracle: ceil(6.3) = 7 largest are 3..=9
        assert_eq!(b.data, vec![0, 0, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(binarize_topk(&m, 100.0).unwrap().popcount(), 9);
    }

    #[test]
    fn topk_ties_follow_row_major() {
        let m = plane(3, 3, vec![0.5; 9]);
        assert_eq!(binarize_topk(&m, 70.0).unwrap().data, vec![1, 1, 1, 1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn topk_rejects_bad_percentages() {
        let m = plane(1, 1, vec![0.0]);
        for k in [0.0, -1.0, 100.5, f64::NAN] {
            assert!(matches!(binarize_topk(&m, k), Err(Error::BadPercentage(_))));
        }
        assert_eq!(topk_count(70.0, 10).unwrap(), 7);
        assert_eq!(topk_count(12.5, 10).unwrap(), 2);
    }

    fn score_map(h: usize, w: usize, classes: &[u16], v: Vec<f32>) -> ScoreMap {
        ScoreMap {
            classes: classes.iter().map(|&c| ClassId(c)).collect(),
            values: Tensor3::from_vec(h, w, classes.len(), v).unwrap(),
        }
    }

    #[test]
    fn single_class_foreground_is_topk() {
        let vals: Vec<f32> = (0..9).map(|v| (v * 7 % 9) as f32).collect();
        let s = score_map(3, 3, &[16], vals.clone());
        assert_eq!(foreground_of(&s, ClassId(16), 70.0).unwrap(), binarize_topk(&plane(3, 3, vals), 70.0).unwrap());
        assert!(matches!(foreground_of(&s, ClassId(4), 70.0), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn foreground_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f32> = (0..18).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let s = score_map(3, 3, &[16, 17], vals.clone());
        for (k, class) in [16u16, 17].into_iter().enumerate() {
            let fg = foreground_of(&s, ClassId(class), 70.0).unwrap();
            // oracle: argmax by direct comparison, top-K by counting strictly larger values
            let own: Vec<f32> = (0..9).map(|p| vals[p * 2 + k]).collect();
            for p in 0..9 {
                let other = vals[p * 2 + (1 - k)];
                let wins = if k == 0 { own[p] >= other } else { own[p] > other };
                let rank = own.iter().filter(|&&v| v > own[p]).count();
                let expected = u8::from(wins && rank < 7);
                assert_eq!(fg.data[p], expected, "class {class} pixel {p}");
            }
        }
    }

    #[test]
    fn dominated_pixel_is_background() {
        let s = score_map(1, 2, &[16, 17], vec![0.9, 0.95, 0.1, 0.0]);
        let fg = foreground_of(&s, ClassId(16), 100.0).unwrap();
        assert_eq!(fg.data, vec![0, 1]);
    }

    #[test]
    fn seed_sampling_rules() {
        let mut fg = BinaryPlane::zeros(4, 4);
        fg.set(2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_seeds(&fg, 9, &mut rng).unwrap(), vec![(2, 1); 9]);
        assert!(matches!(sample_seeds(&BinaryPlane::zeros(2, 2), 3, &mut rng), Err(Error::EmptyForeground)));

        let full = Plane::filled(4, 4, 1u8);
        let a = sample_seeds(&full, 9, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_seeds(&full, 9, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let mut uniq = a.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 9, "enough foreground means no repeats");
    }

    struct Fixed(HashMap<(usize, usize), AttentionStack>);

    impl SelfSupervisedBackend for Fixed {
        fn attention(&self, _: &Image, seed: SeedPoint) -> Result<AttentionStack> {
            Ok(self.0[&(seed.row, seed.col)].clone())
        }
    }

    fn img() -> Image {
        Image { id: "i".into(), pixels: RgbImage::new(2, 2) }
    }

    fn seed(r: usize, c: usize) -> SeedPoint {
        SeedPoint { row: r, col: c, grid_h: 2, grid_w: 2 }
    }

    #[test]
    fn seed_attention_means() {
        let a = AttentionStack::new(2, 2, 2, vec![0.9, 0.1, 0.3, 0.0, 0.5, 0.4, 0.2, 0.1]).unwrap();
        let b = AttentionStack::new(2, 2, 2, vec![0.0, 0.2, 0.8, 0.6, 0.1, 0.0, 0.9, 0.3]).unwrap();
        let single = AttentionStack::new(1, 2, 2, vec![0.1, 0.7, 0.3, 0.2]).unwrap();
        let be = Fixed([((0, 0), a.clone()), ((1, 1), b.clone()), ((0, 1), single)].into());

        // one seed, one head: plain top-K of that map
        let m = seed_attention_mask(&be, &img(), &[seed(0, 1)], 50.0).unwrap();
        assert_eq!(m.data, vec![0, 1, 1, 0]);

        // four-map arithmetic mean oracle
        let mean: Vec<f32> = (0..4)
            .map(|p| (a.values[p] + a.values[4 + p] + b.values[p] + b.values[4 + p]) / 4.0)
            .collect();
        let got = mean_seed_attention(&be, &img(), &[seed(0, 0), seed(1, 1)]).unwrap();
        for (g, e) in got.data.iter().zip(&mean) {
            assert!((g - e).abs() < 1e-6);
        }
        assert_eq!(
            seed_attention_mask(&be, &img(), &[seed(0, 0), seed(1, 1)], 50.0).unwrap(),
            binarize_topk(&plane(2, 2, mean), 50.0).unwrap()
        );

        // duplicated seeds do not change the mean
        let once = seed_attention_mask(&be, &img(), &[seed(0, 0)], 70.0).unwrap();
        let thrice = seed_attention_mask(&be, &img(), &[seed(0, 0); 3], 70.0).unwrap();
        assert_eq!(once, thrice);
        assert!(matches!(seed_attention_mask(&be, &img(), &[], 70.0), Err(Error::EmptyForeground)));
    }

    #[test]
    fn fusion_ops() {
        let m1 = Plane::from_vec(1, 4, vec![1, 1, 0, 0]).unwrap();
        let m2 = Plane::from_vec(1, 4, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(fuse_masks(&m1, &BinaryPlane::zeros(1, 4), FusionOp::Union).unwrap(), m1);
        assert_eq!(fuse_masks(&m1, &m2, FusionOp::Union).unwrap().data, vec![1, 1, 1, 0]);
        assert_eq!(fuse_masks(&m1, &m2, FusionOp::Intersection).unwrap().data, vec![1, 0, 0, 0]);
        assert_eq!(fuse_masks(&m1, &m2, FusionOp::None).unwrap(), m1);
        assert!(fuse_masks(&m1, &BinaryPlane::zeros(2, 2), FusionOp::Union).is_err());
    }

    proptest! {
        #[test]
        fn popcount_is_exact(h in 1usize..10, w in 1usize..10, k in 1u32..=100, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = plane(h, w, (0..h * w).map(|_| rng.random_range(0..4) as f32).collect());
            let b = binarize_topk(&m, f64::from(k)).unwrap();
            prop_assert_eq!(b.popcount(), (k as usize * h * w).div_ceil(100));
            // every kept value dominates every dropped value
            let kept_min = m.data.iter().zip(&b.data).filter(|(_, &s)| s == 1).map(|(v, _)| *v).fold(f32::INFINITY, f32::min);
            let dropped_max = m.data.iter().zip(&b.data).filter(|(_, &s)| s == 0).map(|(v, _)| *v).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(kept_min >= dropped_max);
        }

        #[test]
        fn union_and_intersection_oracles(bits in prop::collection::vec((0u8..2, 0u8..2), 1..40)) {
            let n = bits.len();
            let a = Plane::from_vec(1, n, bits.iter().map(|b| b.0).collect()).unwrap();
            let b = Plane::from_vec(1, n, bits.iter().map(|b| b.1).collect()).unwrap();
            let u = fuse_masks(&a, &b, FusionOp::Union).unwrap();
            let i = fuse_masks(&a, &b, FusionOp::Intersection).unwrap();
            for p in 0..n {
                prop_assert_eq!(u.data[p], u8::from(a.data[p] == 1 || b.data[p] == 1));
                prop_assert_eq!(i.data[p], u8::from(a.data[p] == 1 && b.data[p] == 1));
                prop_assert!(u.data[p] >= a.data[p] && u.data[p] >= b.data[p]);
            }
        }
    }
}
