//! Plug-in teacher head and its training losses.

mod contrast;
mod head;
mod losses;

pub use contrast::{gather_anchors, loss_dcl, loss_dcl_with_grad, sample_contrast_points, Anchor, ContrastBatch, PointRef};
pub use head::{EmbeddingLayer, TeacherHead, TeacherOutput, DEFAULT_RATES};
pub use losses::{
    build_old_targets, loss_bce_all, loss_bce_new, loss_bce_old, new_class_targets, soft_bce, soft_bce_grad,
    soft_bce_logit_grad, PROB_EPS,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{decode_params, encode_params, write_atomic};
use crate::error::{Error, Result};
use crate::nn::Parameterized;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMWT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub embedding_layer: EmbeddingLayer,
    pub branch_channels: usize,
    pub rates: Vec<usize>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            embedding_layer: EmbeddingLayer::Penultimate,
            branch_channels: 8,
            rates: DEFAULT_RATES.to_vec(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branch_channels == 0 || self.rates.is_empty() {
            return Err(Error::Config("teacher sizes must be positive".into()));
        }
        if self.rates.contains(&0) {
            return Err(Error::Config("dilation rates must be positive".into()));
        }
        Ok(())
    }
}

pub fn encode_teacher(head: &TeacherHead) -> Vec<u8> {
    encode_params(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &[], &head.flat_values())
}

/// Load checkpoint values into an already-shaped head.
pub fn decode_teacher_into(head: &mut TeacherHead, bytes: &[u8]) -> Result<()> {
    let (_, values) = decode_params(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0)?;
    head.load_flat(&values)
}

pub fn write_teacher(path: &Path, head: &TeacherHead) -> Result<()> {
    write_atomic(path, &encode_teacher(head))
}

pub fn read_teacher_into(path: &Path, head: &mut TeacherHead) -> Result<()> {
    decode_teacher_into(head, &std::fs::read(path)?)
}
