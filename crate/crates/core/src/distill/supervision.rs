use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{ClassId, Taxonomy};
use crate::tensor::Tensor3;

/// Channels competing for the hard label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HardArgmax {
    /// Argmax over every teacher channel, background and old classes included.
    #[default]
    All,
    /// Argmax over the new-class channels only.
    NewOnly,
}

/// One-hot of the per-pixel argmax; ties go to the lowest channel.
pub fn one_hot_hard(probs: &Tensor3<f64>) -> Tensor3<f64> {
    let mut out = Tensor3::zeros(probs.height, probs.width, probs.channels);
    if probs.channels == 0 {
        return out;
    }
    for p in 0..probs.pixels() {
        let v = probs.pixel(p);
        let best = (1..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b });
        out.pixel_mut(p)[best] = 1.0;
    }
    out
}

/// Mixed soft targets for the student at `step`.
///
/// `teacher_probs` follows `taxonomy.output_classes(step)`; `old_probs`
/// follows `taxonomy.output_classes(step - 1)`. New classes get
/// `alpha * hard + (1 - alpha) * teacher`; background and old classes get
/// `beta * old + (1 - beta) * teacher`.
pub fn combine_supervision(
    teacher_probs: &Tensor3<f64>,
    old_probs: &Tensor3<f64>,
    taxonomy: &Taxonomy,
    step: usize,
    alpha: f64,
    beta: f64,
) -> Result<Tensor3<f64>> {
    combine_supervision_with(teacher_probs, old_probs, taxonomy, step, alpha, beta, HardArgmax::All)
}

pub fn combine_supervision_with(
    teacher_probs: &Tensor3<f64>,
    old_probs: &Tensor3<f64>,
    taxonomy: &Taxonomy,
    step: usize,
    alpha: f64,
    beta: f64,
    scope: HardArgmax,
) -> Result<Tensor3<f64>> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if step == 0 {
        return Err(Error::StepOutOfRange { step, steps: taxonomy.num_steps() });
    }
    let classes = taxonomy.output_classes(step)?;
    let old_classes = taxonomy.output_classes(step - 1)?;
    let new_classes = taxonomy.new_classes(step)?;
    if teacher_probs.channels != classes.len() {
        return Err(Error::shape(format!("teacher has {} channels, step needs {}", teacher_probs.channels, classes.len())));
    }
    if old_probs.channels != old_classes.len() || old_probs.height != teacher_probs.height || old_probs.width != teacher_probs.width {
        return Err(Error::shape(format!(
            "old output {}x{}x{} vs teacher {}x{} with {} old channels",
            old_probs.height,
            old_probs.width,
            old_probs.channels,
            teacher_probs.height,
            teacher_probs.width,
            old_classes.len()
        )));
    }
    let new_idx: Vec<usize> = (0..classes.len()).filter(|&k| new_classes.contains(&classes[k])).collect();
    let old_map: Vec<Option<usize>> = classes.iter().map(|c| old_classes.iter().position(|o| o == c)).collect();
    let hard = match scope {
        HardArgmax::All => one_hot_hard(teacher_probs),
        HardArgmax::NewOnly => {
            let sub = one_hot_hard(&teacher_probs.select_channels(&new_idx));
            let mut h = Tensor3::zeros(teacher_probs.height, teacher_probs.width, classes.len());
            for p in 0..h.pixels() {
                for (k, &c) in new_idx.iter().enumerate() {
                    h.pixel_mut(p)[c] = sub.pixel(p)[k];
                }
            }
            h
        }
    };
    let mut q = Tensor3::zeros(teacher_probs.height, teacher_probs.width, classes.len());
    for p in 0..q.pixels() {
        let (t, o, hd) = (teacher_probs.pixel(p), old_probs.pixel(p), hard.pixel(p));
        for (k, slot) in q.pixel_mut(p).iter_mut().enumerate() {
            let v = match old_map[k] {
                Some(ok) => beta * o[ok] + (1.0 - beta) * t[k],
                None => alpha * hd[k] + (1.0 - alpha) * t[k],
            };
            *slot = v.clamp(0.0, 1.0);
        }
    }
    Ok(q)
}

/// `l_new + lambda * l_dcl + l_old + l_all`.
pub fn total_loss(l_new: f64, l_dcl: f64, l_old: f64, l_all: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("l_new", l_new), ("l_dcl", l_dcl), ("l_old", l_old), ("l_all", l_all), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(l_new + lambda * l_dcl + l_old + l_all)
}

/// Channel positions of `subset` inside `classes`.
pub(crate) fn positions(classes: &[ClassId], subset: impl IntoIterator<Item = ClassId>) -> Result<Vec<usize>> {
    subset
        .into_iter()
        .map(|c| classes.iter().position(|&x| x == c).ok_or(Error::UnknownClass(c)))
        .collect()
}
