//! The `FMWM` plane container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "FMWM"          4 bytes
//! version u16 = 1
//! flags   u16            bit0 set: u8 payload (0 / 255), clear: f32 payload
//! H u32, W u32, C u16
//! C tags u16             class ids for masks, channel indices for tensors
//! source u8              0 = init_only, 1 = fused
//! C planes of H*W values, plane-major, row-major within a plane
//! ```
//!
//! Pseudo-label masks use the binary payload. Backend tensors (features,
//! attention) travel in the same container with the float payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::binio::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::tensor::{BinaryPlane, Plane, Tensor3};

pub const MAGIC: &[u8; 4] = b"FMWM";
pub const VERSION: u16 = 1;
const FLAG_BINARY: u16 = 1;

/// Bytes before the payload for `channels` planes.
pub const fn header_size(channels: usize) -> usize {
    4 + 2 + 2 + 4 + 4 + 2 + 2 * channels + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    InitOnly,
    Fused,
}

/// Per-class binary pseudo labels for one image at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub masks: BTreeMap<ClassId, BinaryPlane>,
    pub source: MaskSource,
}

impl PseudoLabelSet {
    pub fn validate(&self) -> Result<()> {
        for (c, m) in &self.masks {
            if m.height != self.height || m.width != self.width {
                return Err(Error::shape(format!("mask for class {c} is {}x{}", m.height, m.width)));
            }
            if !m.is_binary() {
                return Err(Error::format(format!("mask for class {c} is not 0/1")));
            }
        }
        Ok(())
    }

    /// Masks resampled (nearest) to a model grid.
    pub fn resized(&self, height: usize, width: usize) -> BTreeMap<ClassId, BinaryPlane> {
        self.masks.iter().map(|(&c, m)| (c, m.resize_nearest(height, width))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Binary(Vec<u8>),
    Float(Vec<f32>),
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFile {
    pub height: usize,
    pub width: usize,
    pub tags: Vec<u16>,
    pub source: u8,
    pub payload: Payload,
}

impl PlaneFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let c = self.tags.len();
        let plane = self.height * self.width;
        let h = u32::try_from(self.height).map_err(|_| Error::format("height exceeds u32"))?;
        let w = u32::try_from(self.width).map_err(|_| Error::format("width exceeds u32"))?;
        let cc = u16::try_from(c).map_err(|_| Error::format("more than 65535 planes"))?;
        let (flags, values) = match &self.payload {
            Payload::Binary(v) => (FLAG_BINARY, v.len()),
            Payload::Float(v) => (0, v.len()),
        };
        if values != c * plane {
            return Err(Error::shape(format!("payload has {values} values, header implies {}", c * plane)));
        }
        let mut out = Vec::with_capacity(header_size(c) + values * if flags == 1 { 1 } else { 4 });
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&cc.to_le_bytes());
        for t in &self.tags {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.push(self.source);
        match &self.payload {
            Payload::Binary(v) => out.extend_from_slice(v),
            Payload::Float(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic, expected FMWM"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let flags = r.u16()?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let c = r.u16()? as usize;
        let tags = (0..c).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let source = r.take(1)?[0];
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(c))
            .ok_or_else(|| Error::format("dimensions overflow"))?;
        let payload = if flags & FLAG_BINARY != 0 {
            Payload::Binary(r.take(n)?.to_vec())
        } else {
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("dimensions overflow"))?)?;
            Payload::Float(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        };
        r.finish()?;
        Ok(PlaneFile { height, width, tags, source, payload })
    }

    /// Float payload as a channel-last tensor.
    pub fn to_tensor(&self) -> Result<Tensor3<f32>> {
        let Payload::Float(v) = &self.payload else {
            return Err(Error::format("expected float payload"));
        };
        let (c, plane) = (self.tags.len(), self.height * self.width);
        let mut data = vec![0f32; v.len()];
        for k in 0..c {
            for p in 0..plane {
                data[p * c + k] = v[k * plane + p];
            }
        }
        Tensor3::from_vec(self.height, self.width, c, data)
    }

    pub fn from_tensor(t: &Tensor3<f32>) -> Self {
        let plane = t.pixels();
        let mut v = vec![0f32; t.data.len()];
        for p in 0..plane {
            for k in 0..t.channels {
                v[k * plane + p] = t.data[p * t.channels + k];
            }
        }
        PlaneFile {
            height: t.height,
            width: t.width,
            tags: (0..t.channels as u16).collect(),
            source: 0,
            payload: Payload::Float(v),
        }
    }
}

pub fn encode_masks(pls: &PseudoLabelSet) -> Result<Vec<u8>> {
    pls.validate()?;
    let mut payload = Vec::with_capacity(pls.masks.len() * pls.height * pls.width);
    for m in pls.masks.values() {
        payload.extend(m.data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
    }
    PlaneFile {
        height: pls.height,
        width: pls.width,
        tags: pls.masks.keys().map(|c| c.0).collect(),
        source: match pls.source {
            MaskSource::InitOnly => 0,
            MaskSource::Fused => 1,
        },
        payload: Payload::Binary(payload),
    }
    .encode()
}

pub fn decode_masks(image_id: &str, bytes: &[u8]) -> Result<PseudoLabelSet> {
    let f = PlaneFile::decode(bytes)?;
    let Payload::Binary(v) = f.payload else {
        return Err(Error::format("mask cache must carry a binary payload"));
    };
    let source = match f.source {
        0 => MaskSource::InitOnly,
        1 => MaskSource::Fused,
        s => return Err(Error::format(format!("unknown source byte {s}"))),
    };
    let plane = f.height * f.width;
    let mut masks = BTreeMap::new();
    for (k, &tag) in f.tags.iter().enumerate() {
        let data = v[k * plane..(k + 1) * plane]
            .iter()
            .map(|&b| match b {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::format(format!("mask byte {other} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if masks.insert(ClassId(tag), Plane::from_vec(f.height, f.width, data)?).is_some() {
            return Err(Error::format(format!("class {tag} stored twice")));
        }
    }
    Ok(PseudoLabelSet { image_id: image_id.to_string(), height: f.height, width: f.width, masks, source })
}

/// Write `pls` to `path` atomically (temp file + rename).
pub fn write_mask_cache(path: &Path, pls: &PseudoLabelSet) -> Result<()> {
    let bytes = encode_masks(pls)?;
    write_atomic(path, &bytes)
}

/// Read a mask cache; the image id is the file stem.
pub fn read_mask_cache(path: &Path) -> Result<PseudoLabelSet> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    decode_masks(&id, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> PseudoLabelSet {
        let mut masks = BTreeMap::new();
        masks.insert(ClassId(16), Plane::from_vec(2, 3, vec![1, 0, 1, 0, 0, 1]).unwrap());
        masks.insert(ClassId(18), Plane::from_vec(2, 3, vec![0, 0, 0, 1, 1, 1]).unwrap());
        PseudoLabelSet { image_id: "im7".into(), height: 2, width: 3, masks, source: MaskSource::Fused }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("im7.fmwm");
        write_mask_cache(&path, &sample()).unwrap();
        assert_eq!(read_mask_cache(&path).unwrap(), sample());
    }

    #[test]
    fn single_pixel_file_size() {
        let mut masks = BTreeMap::new();
        masks.insert(ClassId(3), Plane::from_vec(1, 1, vec![1]).unwrap());
        let pls = PseudoLabelSet { image_id: "x".into(), height: 1, width: 1, masks, source: MaskSource::InitOnly };
        let bytes = encode_masks(&pls).unwrap();
        // 4 magic + 2 version + 2 flags + 4 H + 4 W + 2 C + 2 id + 1 source = 21
        assert_eq!(header_size(1), 21);
        assert_eq!(bytes.len(), 21 + 1);
        assert_eq!(*bytes.last().unwrap(), 255);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = encode_masks(&sample()).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode_masks("a", &bytes), Err(Error::Format(_))));
        assert!(matches!(decode_masks("a", &good[..good.len() - 1]), Err(Error::Format(_))));
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(decode_masks("a", &v), Err(Error::Format(_))));
        let mut v = good.clone();
        v.push(0);
        assert!(matches!(decode_masks("a", &v), Err(Error::Format(_))));
        let mut v = good;
        let last = v.len() - 1;
        v[last] = 7;
        assert!(matches!(decode_masks("a", &v), Err(Error::Format(_))));
    }

    #[test]
    fn float_tensor_round_trip() {
        let t = Tensor3::from_vec(2, 1, 3, vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
        let f = PlaneFile::from_tensor(&t);
        let bytes = f.encode().unwrap();
        assert_eq!(bytes.len(), header_size(3) + 6 * 4);
        assert_eq!(PlaneFile::decode(&bytes).unwrap().to_tensor().unwrap(), t);
    }

    proptest! {
        #[test]
        fn rewrite_is_byte_identical(h in 1usize..6, w in 1usize..6, bits in prop::collection::vec(0u8..2, 72), c in 1usize..3) {
            let mut masks = BTreeMap::new();
            for k in 0..c {
                let data = bits.iter().cycle().skip(k * 5).take(h * w).copied().collect();
                masks.insert(ClassId(10 + k as u16), Plane::from_vec(h, w, data).unwrap());
            }
            let pls = PseudoLabelSet { image_id: "p".into(), height: h, width: w, masks, source: MaskSource::Fused };
            let first = encode_masks(&pls).unwrap();
            let back = decode_masks("p", &first).unwrap();
            prop_assert_eq!(&back, &pls);
            prop_assert_eq!(encode_masks(&back).unwrap(), first);
        }
    }
}
