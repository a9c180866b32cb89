use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::student::{StudentConfig, StudentModel};
use super::supervision::{combine_supervision_with, positions, total_loss, HardArgmax};
use crate::coseg::PseudoLabelSet;
use crate::dataset::{Image, Sample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::label_space::{ClassId, Taxonomy};
use crate::memory_paste::{copy_paste, extract_instances, MemoryBank};
use crate::nn::{sigmoid_map, Parameterized, Sgd, SgdConfig};
use crate::rng::stream;
use crate::teacher::{
    build_old_targets, gather_anchors, loss_dcl_with_grad, new_class_targets, sample_contrast_points, soft_bce,
    soft_bce_logit_grad, TeacherConfig, TeacherHead, TeacherOutput,
};
use crate::tensor::{BinaryPlane, Plane, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_dcl: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub per_class_points: usize,
    pub bank_capacity: usize,
    pub paste_prob: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Epochs of the pixel-supervised base step.
    pub base_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub hard_argmax: HardArgmax,
    /// Ground-truth components smaller than this are not archived.
    pub min_instance_pixels: usize,
    pub student: StudentConfig,
    pub teacher: TeacherConfig,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_dcl: 0.1,
            alpha: 0.5,
            beta: 0.9,
            tau: 0.1,
            per_class_points: 10,
            bank_capacity: 50,
            paste_prob: 0.5,
            warmup_epochs: 5,
            epochs: 40,
            base_epochs: 40,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 24,
            hard_argmax: HardArgmax::All,
            min_instance_pixels: 16,
            student: StudentConfig::default(),
            teacher: TeacherConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the 64x64 synthetic benchmark on one core. Loss weights,
    /// bank, and paste settings stay at their defaults.
    pub fn desk_scale() -> Self {
        TrainConfig { lr: 0.05, epochs: 15, base_epochs: 15, batch: 2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("paste_prob", self.paste_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("train.{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::BadTemperature(self.tau));
        }
        if !(self.lambda_dcl >= 0.0) || !self.lambda_dcl.is_finite() {
            return Err(Error::Config(format!("train.lambda_dcl = {} must be >= 0", self.lambda_dcl)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs = {} exceeds train.epochs = {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch == 0 || self.per_class_points == 0 {
            return Err(Error::Config("train.batch and train.per_class_points must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{name} = {v} must be a finite non-negative number")));
            }
        }
        self.student.validate()?;
        self.teacher.validate()
    }

    fn sgd(&self) -> Sgd {
        Sgd::new(SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay })
    }
}

/// Per-epoch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_new: f64,
    pub l_dcl: f64,
    pub l_old: f64,
    pub l_all: f64,
    pub total: f64,
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> String {
    metrics.iter().map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n").collect()
}

/// Soft one-vs-rest targets on the model grid: the fraction of each
/// `patch x patch` cell covered by each class. Ids outside `classes` count
/// as background; ignored pixels are left out of the fraction (an all-ignored
/// cell becomes background).
pub fn grid_targets(gt: &Plane<u16>, patch: usize, classes: &[ClassId]) -> Result<Tensor3<f64>> {
    if !gt.height.is_multiple_of(patch) || !gt.width.is_multiple_of(patch) {
        return Err(Error::shape(format!("labels {}x{} not a multiple of patch {patch}", gt.height, gt.width)));
    }
    let (gh, gw) = (gt.height / patch, gt.width / patch);
    let mut t = Tensor3::zeros(gh, gw, classes.len());
    let bg = classes.iter().position(|c| c.is_background()).ok_or(Error::UnknownClass(ClassId::BACKGROUND))?;
    for gi in 0..gh {
        for gj in 0..gw {
            let mut counts = vec![0usize; classes.len()];
            for i in gi * patch..(gi + 1) * patch {
                for j in gj * patch..(gj + 1) * patch {
                    let v = *gt.get(i, j);
                    if v == IGNORE_LABEL {
                        continue;
                    }
                    counts[classes.iter().position(|c| c.0 == v).unwrap_or(bg)] += 1;
                }
            }
            let n: usize = counts.iter().sum();
            let cell = t.pixel_mut(gi * gw + gj);
            if n == 0 {
                cell[bg] = 1.0;
            } else {
                cell.iter_mut().zip(&counts).for_each(|(c, &k)| *c = k as f64 / n as f64);
            }
        }
    }
    Ok(t)
}

fn to_f32(h: usize, w: usize, c: usize, v: Vec<f64>) -> Tensor3<f32> {
    Tensor3 { height: h, width: w, channels: c, data: v.into_iter().map(|x| x as f32).collect() }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> (Vec<usize>, crate::rng::StreamRng) {
    let mut rng = stream(seed, "sampling", epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    (order, rng)
}

pub struct BaseOutcome {
    pub model: StudentModel,
    pub bank: MemoryBank,
    pub metrics: Vec<EpochMetrics>,
}

/// Fully supervised training on the base classes, filling the memory bank
/// with ground-truth instances along the way.
pub fn train_base(taxonomy: &Taxonomy, samples: &[Sample], cfg: &TrainConfig) -> Result<BaseOutcome> {
    cfg.validate()?;
    let classes = taxonomy.output_classes(0)?;
    let base = taxonomy.new_classes(0)?;
    let mut model = StudentModel::new(cfg.student.clone(), classes.clone(), &mut stream(cfg.seed, "init", 0));
    let mut bank = MemoryBank::new(base.iter().copied(), cfg.bank_capacity)?;
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s.gt.as_ref().ok_or_else(|| Error::Config(format!("base image {} has no pixel labels", s.image.id)))?;
        model.grid(&s.image.pixels)?;
        for crop in extract_instances(&s.image.pixels, gt, base, cfg.min_instance_pixels)? {
            bank.insert(crop)?;
        }
        targets.push(grid_targets(gt, cfg.student.patch, &classes)?);
    }
    if samples.is_empty() {
        return Err(Error::Config("no base training images".into()));
    }
    let sgd = cfg.sgd();
    let mut metrics = Vec::with_capacity(cfg.base_epochs);
    for epoch in 0..cfg.base_epochs {
        let (order, _) = epoch_order(samples.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &k in chunk {
                let out = model.forward(&samples[k].image.pixels)?;
                let p = sigmoid_map(&out.logits);
                sum += soft_bce(&p.data, &targets[k].data)?;
                let g = soft_bce_logit_grad(&p.data, &targets[k].data)?;
                let g = to_f32(p.height, p.width, p.channels, g.into_iter().map(|v| v * scale).collect());
                model.backward(&out, &g);
            }
            sgd.step(model.params_mut());
        }
        let l_all = sum / samples.len() as f64;
        let total = total_loss(0.0, 0.0, 0.0, l_all, cfg.lambda_dcl)?;
        info!("base epoch {epoch}: l_all {l_all:.5}");
        metrics.push(EpochMetrics { epoch, l_new: 0.0, l_dcl: 0.0, l_old: 0.0, l_all, total });
    }
    Ok(BaseOutcome { model, bank, metrics })
}

pub struct StepOutcome {
    pub student: StudentModel,
    pub teacher: TeacherHead,
    pub metrics: Vec<EpochMetrics>,
}

struct Item {
    student: super::student::StudentOutput,
    teacher: TeacherOutput,
    old_probs: Tensor3<f64>,
    paste: Option<(ClassId, BinaryPlane)>,
    masks: BTreeMap<ClassId, BinaryPlane>,
}

/// One weakly supervised incremental step: teacher warm-up, then joint
/// teacher and student training. `prev` is only read.
pub fn run_incremental_step(
    prev: &StudentModel,
    taxonomy: &Taxonomy,
    step: usize,
    images: &[Image],
    pseudo: &BTreeMap<String, PseudoLabelSet>,
    bank: &MemoryBank,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    cfg.validate()?;
    if step == 0 {
        return Err(Error::StepOutOfRange { step, steps: taxonomy.num_steps() });
    }
    let classes = taxonomy.output_classes(step)?;
    let old_classes = taxonomy.output_classes(step - 1)?;
    let new_list: Vec<ClassId> = taxonomy.new_classes(step)?.iter().copied().collect();
    if prev.classes != old_classes {
        return Err(Error::shape(format!(
            "previous model has {} classes, step {} expects {}",
            prev.classes.len(),
            step - 1,
            old_classes.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Config(format!("no training images for step {step}")));
    }
    for img in images {
        if !pseudo.contains_key(&img.id) {
            return Err(Error::MissingPseudoLabels(img.id.clone()));
        }
        prev.grid(&img.pixels)?;
    }
    let new_idx = positions(&classes, new_list.iter().copied())?;
    let old_idx = positions(&classes, old_classes.iter().copied())?;

    let mut student = prev.expanded(classes.clone())?;
    let mut teacher = TeacherHead::new(
        student.feature_channels(),
        cfg.teacher.branch_channels,
        &cfg.teacher.rates,
        classes.len(),
        &mut stream(cfg.seed, "init", step as u64),
    );
    teacher.embedding_layer = cfg.teacher.embedding_layer;
    let sgd = cfg.sgd();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let joint = epoch >= cfg.warmup_epochs;
        let (order, mut sample_rng) = epoch_order(images.len(), cfg.seed, epoch);
        let mut paste_rng = stream(cfg.seed, "paste", epoch as u64);
        let (mut s_new, mut s_dcl, mut s_old, mut s_all) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            teacher.zero_grad();
            student.zero_grad();
            let mut items = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let mut img = images[k].pixels.clone();
                let pasted = copy_paste(&mut img, bank, cfg.paste_prob, &mut paste_rng)?;
                let s_out = student.forward(&img)?;
                let (gh, gw) = (s_out.logits.height, s_out.logits.width);
                let old_probs = sigmoid_map(&prev.forward(&img)?.logits);
                let paste = pasted.map(|p| (p.class, p.mask.resize_nearest(gh, gw)));
                let mut masks = pseudo[&images[k].id].resized(gh, gw);
                if let Some((_, pm)) = &paste {
                    for m in masks.values_mut() {
                        m.data.iter_mut().zip(&pm.data).for_each(|(v, &cover)| {
                            if cover != 0 {
                                *v = 0;
                            }
                        });
                    }
                }
                let t_out = teacher.forward(&s_out.features)?;
                items.push(Item { student: s_out, teacher: t_out, old_probs, paste, masks });
            }

            let mut emb_grads: Vec<Option<Tensor3<f32>>> = (0..items.len()).map(|_| None).collect();
            let refs: Vec<&BTreeMap<ClassId, BinaryPlane>> = items.iter().map(|it| &it.masks).collect();
            let l_dcl = match sample_contrast_points(&refs, cfg.per_class_points, &mut sample_rng) {
                Ok(points) => {
                    let embs: Vec<&Tensor3<f32>> = items.iter().map(|it| &it.teacher.embeddings).collect();
                    let batch = gather_anchors(&points, &embs);
                    let (l, grads) = loss_dcl_with_grad(&batch, cfg.tau)?;
                    if cfg.lambda_dcl > 0.0 {
                        for (a, g) in batch.anchors.iter().zip(grads) {
                            let e = &items[a.point.image].teacher.embeddings;
                            let slot = emb_grads[a.point.image]
                                .get_or_insert_with(|| Tensor3::zeros(e.height, e.width, e.channels));
                            for (dst, v) in slot.pixel_mut(a.point.pixel).iter_mut().zip(g) {
                                *dst += (cfg.lambda_dcl * v) as f32;
                            }
                        }
                    }
                    l
                }
                Err(Error::NoForeground) => 0.0,
                Err(e) => return Err(e),
            };
            s_dcl += l_dcl;
            batches += 1;

            let scale = 1.0 / chunk.len() as f64;
            for (it, eg) in items.iter().zip(&emb_grads) {
                let (gh, gw) = (it.teacher.logits.height, it.teacher.logits.width);
                let tp = sigmoid_map(&it.teacher.logits);
                let p_new = tp.select_channels(&new_idx);
                let t_new = new_class_targets(gh, gw, &new_list, &it.masks)?;
                s_new += soft_bce(&p_new.data, &t_new.data)?;
                let g_new = soft_bce_logit_grad(&p_new.data, &t_new.data)?;
                let p_old = tp.select_channels(&old_idx);
                let t_old = build_old_targets(&it.old_probs, &old_classes, it.paste.as_ref().map(|(c, m)| (*c, m)))?;
                s_old += soft_bce(&p_old.data, &t_old.data)?;
                let g_old = soft_bce_logit_grad(&p_old.data, &t_old.data)?;
                let mut g = Tensor3::<f32>::zeros(gh, gw, classes.len());
                for p in 0..gh * gw {
                    let dst = g.pixel_mut(p);
                    for (k, &c) in new_idx.iter().enumerate() {
                        dst[c] += (g_new[p * new_idx.len() + k] * scale) as f32;
                    }
                    for (k, &c) in old_idx.iter().enumerate() {
                        dst[c] += (g_old[p * old_idx.len() + k] * scale) as f32;
                    }
                }
                teacher.backward(&it.student.features, &it.teacher, &g, eg.as_ref());

                if joint {
                    let q = combine_supervision_with(
                        &tp,
                        &it.old_probs,
                        taxonomy,
                        step,
                        cfg.alpha,
                        cfg.beta,
                        cfg.hard_argmax,
                    )?;
                    let sp = sigmoid_map(&it.student.logits);
                    s_all += soft_bce(&sp.data, &q.data)?;
                    let gs = soft_bce_logit_grad(&sp.data, &q.data)?;
                    let gs = to_f32(gh, gw, classes.len(), gs.into_iter().map(|v| v * scale).collect());
                    student.backward(&it.student, &gs);
                }
            }
            sgd.step(teacher.params_mut());
            if joint {
                sgd.step(student.params_mut());
            }
        }
        let n = images.len() as f64;
        let (l_new, l_dcl, l_old, l_all) = (s_new / n, s_dcl / batches as f64, s_old / n, s_all / n);
        let total = total_loss(l_new, l_dcl, l_old, l_all, cfg.lambda_dcl)?;
        info!("step {step} epoch {epoch}: new {l_new:.5} dcl {l_dcl:.5} old {l_old:.5} all {l_all:.5}");
        metrics.push(EpochMetrics { epoch, l_new, l_dcl, l_old, l_all, total });
    }
    Ok(StepOutcome { student, teacher, metrics })
}
