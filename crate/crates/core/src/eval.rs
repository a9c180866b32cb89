//! Confusion-matrix bookkeeping and grouped mIoU reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, IGNORE_LABEL};
use crate::distill::StudentModel;
use crate::error::{Error, Result};
use crate::label_space::{ClassId, Taxonomy};
use crate::tensor::Plane;

/// Square count matrix indexed by raw class id; row = ground truth,
/// column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        ConfusionMatrix { size, counts: vec![0; size * size] }
    }

    /// Large enough for every class the taxonomy knows at `step`.
    pub fn for_step(taxonomy: &Taxonomy, step: usize) -> Result<Self> {
        let max = taxonomy.classes_seen(step)?.iter().map(|c| c.0).max().unwrap_or(0);
        Ok(Self::new(max as usize + 1))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel, skipping those whose ground truth equals `ignore`.
    pub fn update(&mut self, gt: &Plane<u16>, pred: &Plane<u16>, ignore: Option<u16>) -> Result<()> {
        if !gt.same_shape(pred) {
            return Err(Error::shape(format!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.height, gt.width, pred.height, pred.width
            )));
        }
        let check = |v: u16| if (v as usize) < self.size { Ok(v as usize) } else { Err(Error::IdOutOfRange(v)) };
        let mut pending = Vec::with_capacity(gt.len());
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if Some(g) == ignore {
                continue;
            }
            pending.push(check(g)? * self.size + check(p)?);
        }
        for k in pending {
            self.counts[k] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::shape(format!("matrix size {} vs {}", self.size, other.size)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `tp / (row + col - tp)`, or `None` when the class never appears in
    /// either ground truth or prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        if class >= self.size {
            return None;
        }
        let tp = self.get(class, class);
        let row: u64 = (0..self.size).map(|j| self.get(class, j)).sum();
        let col: u64 = (0..self.size).map(|i| self.get(i, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Class name to IoU; `None` for classes with zero union.
    pub per_class: BTreeMap<String, Option<f64>>,
    /// Mean over classes with a defined IoU; `None` if there are none.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport {
    pub groups: BTreeMap<String, GroupReport>,
}

/// Per-class IoU and group means. When `count_empty` is set, classes with
/// zero union count as 0 instead of being left out of the mean.
pub fn miou(
    cm: &ConfusionMatrix,
    groups: &BTreeMap<String, BTreeSet<ClassId>>,
    names: &dyn Fn(ClassId) -> String,
    count_empty: bool,
) -> EvalReport {
    let groups = groups
        .iter()
        .map(|(g, classes)| {
            let per: Vec<(String, Option<f64>)> =
                classes.iter().map(|&c| (names(c), cm.iou(c.0 as usize))).collect();
            let vals: Vec<f64> =
                per.iter().filter_map(|(_, v)| if count_empty { Some(v.unwrap_or(0.0)) } else { *v }).collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (g.clone(), GroupReport { per_class: per.into_iter().collect(), mean })
        })
        .collect();
    EvalReport { groups }
}

/// `base` (step 0 classes), `old` (seen before `step`), `new` (introduced at
/// `step`) and `all` (background plus every seen class). `old` is omitted
/// when it would equal `base`; `new` is omitted at step 0.
pub fn step_groups(taxonomy: &Taxonomy, step: usize) -> Result<BTreeMap<String, BTreeSet<ClassId>>> {
    let mut g = BTreeMap::new();
    g.insert("base".to_string(), taxonomy.new_classes(0)?.clone());
    if step > 0 {
        let old = taxonomy.classes_seen(step - 1)?;
        if step > 1 {
            g.insert("old".to_string(), old);
        }
        g.insert("new".to_string(), taxonomy.new_classes(step)?.clone());
    }
    let mut all = taxonomy.classes_seen(step)?;
    all.insert(ClassId::BACKGROUND);
    g.insert("all".to_string(), all);
    Ok(g)
}

/// Predict every sample with `model` and score it against its labels.
/// Ground-truth ids the model has not seen yet count as background.
pub fn evaluate(
    model: &StudentModel,
    taxonomy: &Taxonomy,
    step: usize,
    samples: &[Sample],
    count_empty: bool,
) -> Result<(ConfusionMatrix, EvalReport)> {
    let seen = taxonomy.classes_seen(step)?;
    let mut cm = ConfusionMatrix::for_step(taxonomy, step)?;
    for s in samples {
        let gt = s.gt.as_ref().ok_or_else(|| Error::Config(format!("image {} has no pixel labels", s.image.id)))?;
        let mut gt = gt.clone();
        gt.data.iter_mut().for_each(|v| {
            if *v != IGNORE_LABEL && !seen.contains(&ClassId(*v)) {
                *v = 0;
            }
        });
        cm.update(&gt, &model.predict(&s.image.pixels)?, Some(IGNORE_LABEL))?;
    }
    let names = |c: ClassId| taxonomy.name(c).to_string();
    Ok((cm.clone(), miou(&cm, &step_groups(taxonomy, step)?, &names, count_empty)))
}

impl EvalReport {
    pub fn mean(&self, group: &str) -> Option<f64> {
        self.groups.get(group).and_then(|g| g.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table: one row per class, then one mean row per group.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = String::new();
        let mut rows: BTreeMap<&str, Option<f64>> = BTreeMap::new();
        for g in self.groups.values() {
            for (name, v) in &g.per_class {
                rows.insert(name, *v);
            }
        }
        let _ = writeln!(out, "{:<24} {:>8}", "class", "IoU");
        for (name, v) in rows {
            let _ = writeln!(out, "{:<24} {:>8}", name, fmt(v));
        }
        let _ = writeln!(out, "{}", "-".repeat(33));
        for (g, r) in &self.groups {
            let _ = writeln!(out, "{:<24} {:>8}", format!("mIoU {g}"), fmt(r.mean));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn plane(h: usize, w: usize, v: Vec<u16>) -> Plane<u16> {
        Plane::from_vec(h, w, v).unwrap()
    }

    fn groups(list: &[(&str, &[u16])]) -> BTreeMap<String, BTreeSet<ClassId>> {
        list.iter().map(|(n, c)| (n.to_string(), c.iter().map(|&v| ClassId(v)).collect())).collect()
    }

    fn name(c: ClassId) -> String {
        format!("c{}", c.0)
    }

    #[test]
    fn counting_and_ignore() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&plane(2, 2, vec![1; 4]), &plane(2, 2, vec![1; 4]), Some(255)).unwrap();
        assert_eq!(cm.get(1, 1), 4);
        let before = cm.clone();
        cm.update(&plane(1, 2, vec![255; 2]), &plane(1, 2, vec![2, 0]), Some(255)).unwrap();
        assert_eq!(cm, before);
        assert!(matches!(cm.update(&plane(1, 1, vec![3]), &plane(1, 1, vec![0]), None), Err(Error::IdOutOfRange(3))));
        assert!(matches!(cm.update(&plane(1, 1, vec![0]), &plane(1, 1, vec![7]), None), Err(Error::IdOutOfRange(7))));
        assert_eq!(cm, before, "failed update leaves counts alone");
    }

    #[test]
    fn hand_built_matrix() {
        let mut cm = ConfusionMatrix::new(3);
        // gt 0 0 1 1 2 2, pred 0 1 1 1 2 0
        cm.update(&plane(1, 6, vec![0, 0, 1, 1, 2, 2]), &plane(1, 6, vec![0, 1, 1, 1, 2, 0]), None).unwrap();
        let r = miou(&cm, &groups(&[("all", &[0, 1, 2]), ("fg", &[1, 2])]), &name, false);
        let g = &r.groups["all"];
        assert_abs_diff_eq!(g.per_class["c0"].unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.per_class["c1"].unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.per_class["c2"].unwrap(), 1.0 / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mean("all").unwrap(), (1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mean("fg").unwrap(), (2.0 / 3.0 + 0.5) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_disjoint_and_absent() {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&plane(1, 3, vec![0, 1, 2]), &plane(1, 3, vec![0, 1, 2]), None).unwrap();
        let r = miou(&cm, &groups(&[("all", &[0, 1, 2, 3])]), &name, false);
        assert_eq!(r.mean("all"), Some(1.0));
        assert_eq!(r.groups["all"].per_class["c3"], None);
        assert_eq!(miou(&cm, &groups(&[("all", &[0, 1, 2, 3])]), &name, true).mean("all"), Some(0.75));

        let mut cm = ConfusionMatrix::new(3);
        cm.update(&plane(1, 2, vec![1, 1]), &plane(1, 2, vec![2, 2]), None).unwrap();
        assert_eq!(cm.iou(1), Some(0.0));
        assert_eq!(cm.iou(2), Some(0.0));
    }

    #[test]
    fn report_renders() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&plane(1, 2, vec![0, 1]), &plane(1, 2, vec![0, 1]), None).unwrap();
        let r = miou(&cm, &groups(&[("all", &[0, 1]), ("new", &[1])]), &name, false);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["new"]["mean"], 1.0);
        assert_eq!(json["all"]["per_class"]["c0"], 1.0);
        let table = r.to_table();
        assert!(table.contains("mIoU new"));
        assert!(table.lines().all(|l| l.len() <= 33));
    }

    proptest! {
        #[test]
        fn update_is_additive(
            a in proptest::collection::vec((0u16..4, 0u16..4), 1..20),
            b in proptest::collection::vec((0u16..4, 0u16..4), 1..20),
        ) {
            let mk = |v: &[(u16, u16)]| (plane(1, v.len(), v.iter().map(|x| x.0).collect()),
                                         plane(1, v.len(), v.iter().map(|x| x.1).collect()));
            let (ga, pa) = mk(&a);
            let (gb, pb) = mk(&b);
            let mut one = ConfusionMatrix::new(4);
            one.update(&ga, &pa, None).unwrap();
            let mut two = ConfusionMatrix::new(4);
            two.update(&gb, &pb, None).unwrap();
            one.merge(&two).unwrap();
            let joined: Vec<_> = a.iter().chain(&b).copied().collect();
            let (gj, pj) = mk(&joined);
            let mut all = ConfusionMatrix::new(4);
            all.update(&gj, &pj, None).unwrap();
            prop_assert_eq!(one, all);
        }

        #[test]
        fn iou_is_bounded_and_permutation_invariant(v in proptest::collection::vec((0u16..4, 0u16..4), 1..30)) {
            let perm = [2u16, 0, 3, 1];
            let mut cm = ConfusionMatrix::new(4);
            let mut pm = ConfusionMatrix::new(4);
            let g = plane(1, v.len(), v.iter().map(|x| x.0).collect());
            let p = plane(1, v.len(), v.iter().map(|x| x.1).collect());
            cm.update(&g, &p, None).unwrap();
            let g2 = plane(1, v.len(), g.data.iter().map(|&x| perm[x as usize]).collect());
            let p2 = plane(1, v.len(), p.data.iter().map(|&x| perm[x as usize]).collect());
            pm.update(&g2, &p2, None).unwrap();
            for c in 0..4usize {
                if let Some(x) = cm.iou(c) {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
                prop_assert_eq!(cm.iou(c), pm.iou(perm[c] as usize));
            }
        }
    }
}
