//! End-to-end run of the synthetic benchmark: pseudo labels, base training,
//! one incremental step, evaluation after each stage.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::coseg::{Backends, CosegConfig, Cosegmenter, PseudoLabelSet};
use crate::distill::{run_incremental_step, train_base, EpochMetrics, StudentModel, TrainConfig};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::label_space::ClassId;
use crate::memory_paste::MemoryBank;
use crate::synthetic::{Benchmark, BenchmarkConfig, SyntheticSsl, SyntheticVlp};
use crate::teacher::TeacherHead;

pub struct SyntheticRun {
    pub benchmark: Benchmark,
    pub pseudo: BTreeMap<String, PseudoLabelSet>,
    pub base_model: StudentModel,
    pub bank: MemoryBank,
    pub base_metrics: Vec<EpochMetrics>,
    pub base_report: EvalReport,
    pub student: StudentModel,
    pub teacher: TeacherHead,
    pub step_metrics: Vec<EpochMetrics>,
    pub step_report: EvalReport,
    /// Base checkpoint and stepped model on the base-only held-out split.
    pub retention_before: EvalReport,
    pub retention_after: EvalReport,
}

impl SyntheticRun {
    /// Mean IoU of the new classes after the step.
    pub fn new_iou(&self) -> f64 {
        self.step_report.mean("new").unwrap_or(0.0)
    }

    /// Base-class mean IoU after the step.
    pub fn base_iou(&self) -> f64 {
        self.step_report.mean("base").unwrap_or(0.0)
    }

    /// Base-class mean IoU of the base checkpoint.
    pub fn base_iou_before(&self) -> f64 {
        self.base_report.mean("base").unwrap_or(0.0)
    }

    /// Base-class mean IoU on images without new classes, before and after
    /// the step.
    pub fn retention(&self) -> (f64, f64) {
        (self.retention_before.mean("base").unwrap_or(0.0), self.retention_after.mean("base").unwrap_or(0.0))
    }
}

pub fn synthetic_backends(bench: &BenchmarkConfig, benchmark: &Benchmark) -> Backends {
    Backends {
        vlp: Arc::new(SyntheticVlp::new(bench.world.clone(), &benchmark.taxonomy)),
        ssl: Arc::new(SyntheticSsl::new(bench.world.clone())),
    }
}

/// Pseudo labels for every step image, using its image-level labels.
pub fn pseudo_label_step(
    benchmark: &Benchmark,
    backends: &Backends,
    coseg: &CosegConfig,
    seed: u64,
) -> Result<BTreeMap<String, PseudoLabelSet>> {
    let tax = &benchmark.taxonomy;
    let new = tax.new_classes(1)?;
    let named: Vec<(ClassId, String)> = new.iter().map(|&c| (c, tax.name(c).to_string())).collect();
    let coseg = Cosegmenter::new(backends.vlp.as_ref(), &named, coseg.clone(), seed)?;
    let index = Benchmark::index(&benchmark.step_train, false);
    let mut out = BTreeMap::new();
    for s in &benchmark.step_train {
        let Some(entry) = index.get(&s.image.id) else { continue };
        let labels = entry.classes.intersection(new).copied().collect();
        out.insert(s.image.id.clone(), coseg.generate(&s.image, &labels, backends)?);
    }
    Ok(out)
}

pub fn run_synthetic(bench: &BenchmarkConfig, coseg: &CosegConfig, train: &TrainConfig) -> Result<SyntheticRun> {
    let benchmark = Benchmark::generate(bench)?;
    let backends = synthetic_backends(bench, &benchmark);
    let pseudo = pseudo_label_step(&benchmark, &backends, coseg, train.seed)?;
    let tax = &benchmark.taxonomy;
    let base = train_base(tax, &benchmark.base_train, train)?;
    let (_, base_report) = evaluate(&base.model, tax, 0, &benchmark.val, false)?;
    let images: Vec<_> = benchmark
        .step_train
        .iter()
        .filter(|s| pseudo.contains_key(&s.image.id))
        .map(|s| s.image.clone())
        .collect();
    let step = run_incremental_step(&base.model, tax, 1, &images, &pseudo, &base.bank, train)?;
    let (_, step_report) = evaluate(&step.student, tax, 1, &benchmark.val, false)?;
    let (_, retention_before) = evaluate(&base.model, tax, 0, &benchmark.val_base, false)?;
    let (_, retention_after) = evaluate(&step.student, tax, 1, &benchmark.val_base, false)?;
    Ok(SyntheticRun {
        pseudo,
        base_model: base.model,
        bank: base.bank,
        base_metrics: base.metrics,
        base_report,
        student: step.student,
        teacher: step.teacher,
        step_metrics: step.metrics,
        step_report,
        retention_before,
        retention_after,
        benchmark,
    })
}
