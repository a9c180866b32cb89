//! Command-line runs: configuration loading, dotted-path overrides, and the
//! on-disk layout of every artifact a run produces.
//!
//! ```text
//! <output>/masks/step<N>/<id>.fmwm       pseudo labels
//! <output>/masks/step<N>/manifest.json
//! <output>/checkpoints/step<N>.fmws      student after step N (0 = base)
//! <output>/checkpoints/teacher_step<N>.fmwt
//! <output>/bank.fmwb
//! <output>/metrics/step<N>.jsonl
//! <output>/reports/eval_step<N>.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coseg::{
    parse_templates, read_mask_cache, write_mask_cache, BackendSpec, Backends, CosegConfig, Cosegmenter,
    MaskSource, PseudoLabelSet, SelfSupervisedBackend, VisionLanguageBackend,
};
use crate::coseg::backend::{DirBackend, HttpBackend};
use crate::dataset::{DatasetDir, Image, Sample};
use crate::distill::{metrics_jsonl, run_incremental_step, train_base, StudentModel, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::label_space::{split_dataset, ClassId, Protocol, Taxonomy};
use crate::memory_paste::MemoryBank;
use crate::synthetic::{default_class_name, Benchmark, BenchmarkConfig, SyntheticSsl, SyntheticVlp, WorldConfig};
use crate::teacher::{write_teacher, TeacherHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySpec {
    pub base: Vec<ClassId>,
    pub steps: Vec<Vec<ClassId>>,
    /// Class names used for prompts; missing entries fall back to the
    /// synthetic palette names.
    #[serde(default)]
    pub names: BTreeMap<ClassId, String>,
}

impl TaxonomySpec {
    pub fn build(&self) -> Result<Taxonomy> {
        let t = Taxonomy::build(&self.base, &self.steps)?;
        let names: Vec<(ClassId, String)> = t
            .class_names
            .keys()
            .map(|&c| (c, self.names.get(&c).cloned().unwrap_or_else(|| default_class_name(c))))
            .collect();
        if let Some(c) = self.names.keys().find(|c| !t.class_names.contains_key(c)) {
            return Err(Error::Config(format!("taxonomy.names mentions class {c}, which no step declares")));
        }
        Ok(t.with_names(names))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Training images of every step; pixel labels only for the base step.
    pub train: PathBuf,
    pub val: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `synthetic`, `dir:<path>`, or `http:<url>`.
    pub vlp: String,
    pub ssl: String,
    /// Generator settings for the synthetic backends.
    pub world: WorldConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig { vlp: "synthetic".into(), ssl: "synthetic".into(), world: WorldConfig::default() }
    }
}

fn default_protocol() -> Protocol {
    Protocol::Overlap
}

/// Everything a run needs. `seed` is mandatory: nothing is seeded from the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub taxonomy: TaxonomySpec,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    pub data: DataPaths,
    #[serde(default)]
    pub backends: BackendConfig,
    #[serde(default)]
    pub coseg: CosegConfig,
    /// Prompt template file; replaces `coseg.templates` when set.
    #[serde(default)]
    pub templates_file: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    pub output: PathBuf,
}

/// Apply `--a.b.c value` style overrides to a JSON document. Values parse as
/// JSON when they can and fall back to plain strings.
pub fn apply_overrides(doc: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(Error::Config(format!("bad override key {key:?}")));
            }
            let Value::Object(map) = node else {
                return Err(Error::Config(format!("override {key}: {} is not an object", parts[..i].join("."))));
            };
            if i + 1 == parts.len() {
                map.insert(part.to_string(), value.clone());
                break;
            }
            node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Split trailing `--key value` / `--key=value` arguments into pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument {a:?}")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| Error::Config(format!("override --{key} needs a value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Parse a config document, apply overrides, and resolve relative paths
    /// against `base_dir`.
    pub fn from_json(text: &str, overrides: &[(String, String)], base_dir: &Path) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        apply_overrides(&mut doc, overrides)?;
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("config: {e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.val);
        resolve(&mut cfg.output);
        if let Some(t) = cfg.templates_file.as_mut() {
            resolve(t);
        }
        for spec in [&mut cfg.backends.vlp, &mut cfg.backends.ssl] {
            if let Some(p) = spec.strip_prefix("dir:") {
                if Path::new(p).is_relative() {
                    *spec = format!("dir:{}", base_dir.join(p).display());
                }
            }
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, overrides, &base)
    }

    /// Full validation; no command touches the filesystem before this passes.
    pub fn validate(&self) -> Result<Taxonomy> {
        let tax = self.taxonomy.build()?;
        self.train.validate()?;
        self.coseg.validate()?;
        for p in [&self.data.train, &self.data.val] {
            if !p.join("index.json").is_file() {
                return Err(Error::Config(format!("dataset {} has no index.json", p.display())));
            }
        }
        if let Some(t) = &self.templates_file {
            if !t.is_file() {
                return Err(Error::Config(format!("templates file {} does not exist", t.display())));
            }
        }
        for spec in [&self.backends.vlp, &self.backends.ssl] {
            if let BackendSpec::Dir(p) = spec.parse()? {
                if !p.is_dir() {
                    return Err(Error::Config(format!("backend directory {} does not exist", p.display())));
                }
            }
        }
        Ok(tax)
    }

    pub fn coseg_config(&self) -> Result<CosegConfig> {
        let mut c = self.coseg.clone();
        if let Some(t) = &self.templates_file {
            c.templates = parse_templates(&std::fs::read_to_string(t)?)?;
        }
        Ok(c)
    }

    pub fn masks_dir(&self, step: usize) -> PathBuf {
        self.output.join("masks").join(format!("step{step}"))
    }

    pub fn student_path(&self, step: usize) -> PathBuf {
        self.output.join("checkpoints").join(format!("step{step}.fmws"))
    }

    pub fn teacher_path(&self, step: usize) -> PathBuf {
        self.output.join("checkpoints").join(format!("teacher_step{step}.fmwt"))
    }

    pub fn bank_path(&self) -> PathBuf {
        self.output.join("bank.fmwb")
    }

    pub fn metrics_path(&self, step: usize) -> PathBuf {
        self.output.join("metrics").join(format!("step{step}.jsonl"))
    }

    pub fn report_path(&self, step: usize) -> PathBuf {
        self.output.join("reports").join(format!("eval_step{step}.json"))
    }
}

fn check_step(tax: &Taxonomy, step: usize) -> Result<()> {
    if step == 0 || step >= tax.num_steps() {
        return Err(Error::Config(format!("step must be in 1..{}, got {step}", tax.num_steps())));
    }
    Ok(())
}

/// Build the two backends and check that remote ones answer.
pub fn build_backends(cfg: &RunConfig, tax: &Taxonomy) -> Result<Backends> {
    let vlp: Arc<dyn VisionLanguageBackend> = match cfg.backends.vlp.parse()? {
        BackendSpec::Synthetic => Arc::new(SyntheticVlp::new(cfg.backends.world.clone(), tax)),
        BackendSpec::Dir(p) => Arc::new(DirBackend::open(&p)?),
        BackendSpec::Http(url) => {
            let b = HttpBackend::new(&url);
            b.probe()?;
            Arc::new(b)
        }
    };
    let ssl: Arc<dyn SelfSupervisedBackend> = match cfg.backends.ssl.parse()? {
        BackendSpec::Synthetic => Arc::new(SyntheticSsl::new(cfg.backends.world.clone())),
        BackendSpec::Dir(p) => Arc::new(DirBackend::open(&p)?),
        BackendSpec::Http(url) => Arc::new(HttpBackend::new(&url)),
    };
    Ok(Backends { vlp, ssl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub classes: BTreeSet<ClassId>,
    pub source: MaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub images: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CosegSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Pseudo-label every training image of `step`. Existing cache files that
/// decode and carry the expected classes are kept unless `force`.
pub fn cmd_coseg(cfg: &RunConfig, step: usize, force: bool) -> Result<CosegSummary> {
    let tax = cfg.validate()?;
    check_step(&tax, step)?;
    let coseg_cfg = cfg.coseg_config()?;
    let data = DatasetDir::open(&cfg.data.train)?;
    let backends = build_backends(cfg, &tax)?;

    let new = tax.new_classes(step)?;
    let named: Vec<(ClassId, String)> = new.iter().map(|&c| (c, tax.name(c).to_string())).collect();
    let coseg = Cosegmenter::new(backends.vlp.as_ref(), &named, coseg_cfg, cfg.seed)?;
    let dir = cfg.masks_dir(step);
    std::fs::create_dir_all(&dir)?;

    let mut summary = CosegSummary::default();
    let mut entries = Vec::new();
    for id in split_dataset(&data.index, &tax, step, cfg.protocol)? {
        let labels: BTreeSet<ClassId> =
            data.index.get(&id).map(|e| e.classes.intersection(new).copied().collect()).unwrap_or_default();
        let file = format!("{id}.fmwm");
        let path = dir.join(&file);
        let existing = if force { None } else { read_mask_cache(&path).ok().filter(|p| p.masks.keys().eq(labels.iter())) };
        let pls = match existing {
            Some(p) => {
                summary.skipped += 1;
                p
            }
            None => {
                let p = coseg.generate(&data.load_image(&id)?, &labels, &backends)?;
                write_mask_cache(&path, &p)?;
                summary.written += 1;
                p
            }
        };
        entries.push(ManifestEntry { id, file, classes: labels, source: pls.source });
    }
    let manifest = Manifest { step, images: entries };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    info!("coseg step {step}: {} written, {} kept", summary.written, summary.skipped);
    Ok(summary)
}

fn load_pixel_samples(data: &DatasetDir, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter()
        .filter(|id| data.index.get(id).is_some_and(|e| e.pixel_gt))
        .map(|id| data.load_sample(id))
        .collect()
}

/// Train the base model on pixel labels; writes the step-0 checkpoint, the
/// memory bank, and the metrics log.
pub fn cmd_train_base(cfg: &RunConfig) -> Result<()> {
    let tax = cfg.validate()?;
    let data = DatasetDir::open(&cfg.data.train)?;
    let samples = load_pixel_samples(&data, &split_dataset(&data.index, &tax, 0, cfg.protocol)?)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("{} has no pixel-labelled base images", cfg.data.train.display())));
    }
    let out = train_base(&tax, &samples, &cfg.train)?;
    std::fs::create_dir_all(cfg.output.join("checkpoints"))?;
    std::fs::create_dir_all(cfg.output.join("metrics"))?;
    crate::binio::write_atomic(&cfg.student_path(0), &out.model.encode(tax.digest()))?;
    out.bank.write(&cfg.bank_path())?;
    std::fs::write(cfg.metrics_path(0), metrics_jsonl(&out.metrics))?;
    info!("base model trained on {} images", samples.len());
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(path.to_path_buf()))
    }
}

/// Load a student checkpoint laid out for `step`.
pub fn load_student(cfg: &RunConfig, tax: &Taxonomy, step: usize, path: &Path) -> Result<StudentModel> {
    require(path)?;
    let mut model = StudentModel::zeros(cfg.train.student.clone(), tax.output_classes(step)?);
    model.decode_into(&std::fs::read(path)?, tax.digest())?;
    Ok(model)
}

/// One incremental step from the previous checkpoint, the bank, and the
/// step's pseudo labels.
pub fn cmd_train_step(cfg: &RunConfig, step: usize) -> Result<()> {
    let tax = cfg.validate()?;
    check_step(&tax, step)?;
    let prev_path = cfg.student_path(step - 1);
    require(&prev_path)?;
    require(&cfg.bank_path())?;
    let manifest_path = cfg.masks_dir(step).join("manifest.json");
    require(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.step != step {
        return Err(Error::format(format!("{} is for step {}", manifest_path.display(), manifest.step)));
    }

    let prev = load_student(cfg, &tax, step - 1, &prev_path)?;
    let bank = MemoryBank::read(&cfg.bank_path(), Some(cfg.train.bank_capacity))?;
    let data = DatasetDir::open(&cfg.data.train)?;
    let mut images: Vec<Image> = Vec::with_capacity(manifest.images.len());
    let mut pseudo: BTreeMap<String, PseudoLabelSet> = BTreeMap::new();
    for e in &manifest.images {
        let path = cfg.masks_dir(step).join(&e.file);
        require(&path)?;
        let mut pls = read_mask_cache(&path)?;
        pls.image_id = e.id.clone();
        images.push(data.load_image(&e.id)?);
        pseudo.insert(e.id.clone(), pls);
    }
    let out = run_incremental_step(&prev, &tax, step, &images, &pseudo, &bank, &cfg.train)?;
    std::fs::create_dir_all(cfg.output.join("metrics"))?;
    crate::binio::write_atomic(&cfg.student_path(step), &out.student.encode(tax.digest()))?;
    write_teacher(&cfg.teacher_path(step), &out.teacher)?;
    std::fs::write(cfg.metrics_path(step), metrics_jsonl(&out.metrics))?;
    info!("step {step} trained on {} images", images.len());
    Ok(())
}

/// Evaluate a checkpoint on the validation set. Returns the printable table.
pub fn cmd_eval(cfg: &RunConfig, step: usize, checkpoint: Option<&Path>, count_empty: bool) -> Result<String> {
    let tax = cfg.validate()?;
    if step >= tax.num_steps() {
        return Err(Error::StepOutOfRange { step, steps: tax.num_steps() });
    }
    let path = checkpoint.map_or_else(|| cfg.student_path(step), Path::to_path_buf);
    let model = load_student(cfg, &tax, step, &path)?;
    let data = DatasetDir::open(&cfg.data.val)?;
    let samples = load_pixel_samples(&data, &data.index.entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>())?;
    let (_, report) = evaluate(&model, &tax, step, &samples, count_empty)?;
    std::fs::create_dir_all(cfg.output.join("reports"))?;
    std::fs::write(cfg.report_path(step), report.to_json() + "\n")?;
    Ok(report.to_table())
}

/// JSON summary of a bank file.
pub fn cmd_bank_inspect(path: &Path) -> Result<String> {
    require(path)?;
    let bank = MemoryBank::read(path, None)?;
    Ok(serde_json::to_string_pretty(&bank.summary()).expect("summary serializes"))
}

/// Write a synthetic benchmark (train and val datasets) plus a ready-to-run
/// config into `out`. Step images keep only image-level labels.
pub fn cmd_synth(out: &Path, bench: &BenchmarkConfig) -> Result<PathBuf> {
    let b = Benchmark::generate(bench)?;
    let mut train_index = Benchmark::index(&b.base_train, true);
    train_index.entries.extend(Benchmark::index(&b.step_train, false).entries);
    let step_images: Vec<Sample> = b.step_train.iter().map(|s| Sample { image: s.image.clone(), gt: None }).collect();
    let train: Vec<Sample> = b.base_train.iter().cloned().chain(step_images).collect();
    DatasetDir::write(&out.join("data/train"), &train_index, &train)?;
    DatasetDir::write(&out.join("data/val"), &Benchmark::index(&b.val, true), &b.val)?;

    let cfg = RunConfig {
        seed: bench.seed,
        taxonomy: TaxonomySpec {
            base: bench.base_classes.clone(),
            steps: vec![bench.new_classes.clone()],
            names: b.taxonomy.class_names.clone(),
        },
        protocol: Protocol::Disjoint,
        data: DataPaths { train: "data/train".into(), val: "data/val".into() },
        backends: BackendConfig { world: bench.world.clone(), ..Default::default() },
        coseg: CosegConfig::default(),
        templates_file: None,
        train: TrainConfig::desk_scale(),
        output: "run".into(),
    };
    let path = out.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n")?;
    Ok(path)
}

/// Read back a teacher checkpoint written by [`cmd_train_step`].
pub fn load_teacher(cfg: &RunConfig, tax: &Taxonomy, step: usize) -> Result<TeacherHead> {
    let path = cfg.teacher_path(step);
    require(&path)?;
    let classes = tax.output_classes(step)?.len();
    let mut head = TeacherHead::zeros(cfg.train.student.width, cfg.train.teacher.branch_channels, &cfg.train.teacher.rates, classes);
    head.embedding_layer = cfg.train.teacher.embedding_layer;
    crate::teacher::read_teacher_into(&path, &mut head)?;
    Ok(head)
}
