//! Incremental class taxonomy and per-step dataset splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A semantic class identifier. `ClassId::BACKGROUND` (0) is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u16> for ClassId {
    fn from(v: u16) -> Self {
        ClassId(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Pixel,
    ImageLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    pub step_index: usize,
    pub new_classes: BTreeSet<ClassId>,
    pub supervision: Supervision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub steps: Vec<StepSpec>,
    pub class_names: BTreeMap<ClassId, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Disjoint,
    Overlap,
}

impl Taxonomy {
    pub const BACKGROUND: ClassId = ClassId::BACKGROUND;

    /// Build a taxonomy from a base class list and a list of increments.
    ///
    /// Class names default to `class<id>`; use [`Taxonomy::with_names`] to
    /// attach real names.
    pub fn build(base: &[ClassId], increments: &[Vec<ClassId>]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut steps = Vec::with_capacity(increments.len() + 1);
        for (step_index, list) in std::iter::once(base).chain(increments.iter().map(Vec::as_slice)).enumerate() {
            if list.is_empty() {
                return Err(Error::EmptyStep(step_index));
            }
            let mut new_classes = BTreeSet::new();
            for &c in list {
                if c.is_background() {
                    return Err(Error::ReservedClass(c));
                }
                if !seen.insert(c) {
                    return Err(Error::DuplicateClass(c));
                }
                new_classes.insert(c);
            }
            let supervision = if step_index == 0 { Supervision::Pixel } else { Supervision::ImageLevel };
            steps.push(StepSpec { step_index, new_classes, supervision });
        }
        let class_names = seen.iter().map(|&c| (c, format!("class{c}"))).collect();
        Ok(Taxonomy { steps, class_names })
    }

    pub fn with_names(mut self, names: impl IntoIterator<Item = (ClassId, String)>) -> Self {
        for (c, n) in names {
            if let Some(slot) = self.class_names.get_mut(&c) {
                *slot = n;
            }
        }
        self
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.steps.len() {
            return Err(Error::StepOutOfRange { step, steps: self.steps.len() });
        }
        Ok(())
    }

    pub fn new_classes(&self, step: usize) -> Result<&BTreeSet<ClassId>> {
        self.check_step(step)?;
        Ok(&self.steps[step].new_classes)
    }

    /// Union of the classes introduced in steps `0..=step` (foreground only).
    pub fn classes_seen(&self, step: usize) -> Result<BTreeSet<ClassId>> {
        self.check_step(step)?;
        Ok(self.steps[..=step].iter().flat_map(|s| s.new_classes.iter().copied()).collect())
    }

    /// Model output channels at `step`: background first, then every seen
    /// class in ascending id order.
    pub fn output_classes(&self, step: usize) -> Result<Vec<ClassId>> {
        let mut out = vec![ClassId::BACKGROUND];
        out.extend(self.classes_seen(step)?);
        Ok(out)
    }

    pub fn name(&self, c: ClassId) -> &str {
        if c.is_background() {
            return "background";
        }
        self.class_names.get(&c).map_or("unknown", String::as_str)
    }

    /// 64-bit fingerprint of the class layout, embedded in checkpoints.
    pub fn digest(&self) -> u64 {
        let mut s = String::new();
        for step in &self.steps {
            s.push('|');
            for c in &step.new_classes {
                s.push_str(&c.0.to_string());
                s.push(',');
            }
        }
        crate::rng::digest(&s)
    }
}

/// One dataset entry: foreground classes present in an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub classes: BTreeSet<ClassId>,
    pub pixel_gt: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.classes.is_empty() {
                return Err(Error::Config(format!("dataset entry {} lists no classes", e.id)));
            }
            if e.classes.contains(&ClassId::BACKGROUND) {
                return Err(Error::Config(format!("dataset entry {} lists background", e.id)));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let idx: DatasetIndex =
            serde_json::from_str(s).map_err(|e| Error::format(format!("dataset index: {e}")))?;
        idx.validate()?;
        Ok(idx)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Image ids usable at `step` under `protocol`, in index order.
///
/// Overlap keeps every image containing at least one of the step's new
/// classes; disjoint additionally drops images containing a class not seen
/// by `step`.
pub fn split_dataset(
    index: &DatasetIndex,
    taxonomy: &Taxonomy,
    step: usize,
    protocol: Protocol,
) -> Result<Vec<String>> {
    let new = taxonomy.new_classes(step)?;
    let seen = taxonomy.classes_seen(step)?;
    Ok(index
        .entries
        .iter()
        .filter(|e| e.classes.iter().any(|c| new.contains(c)))
        .filter(|e| protocol == Protocol::Overlap || e.classes.is_subset(&seen))
        .map(|e| e.id.clone())
        .collect())
}
