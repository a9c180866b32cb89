//! Per-class archives of old-class instance crops and copy-paste augmentation.
//!
//! Bank file layout (little-endian):
//!
//! ```text
//! magic "FMWB" | version u16 | class count u16
//! per class:  class id u16 | crop count u16
//!   per crop: H u32 | W u32 | H*W*3 RGB bytes | H*W mask bytes (0 / 255)
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::binio::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::label_space::ClassId;
use crate::tensor::{BinaryPlane, Plane, RgbImage};

pub const BANK_MAGIC: &[u8; 4] = b"FMWB";
pub const BANK_VERSION: u16 = 1;

/// A tight crop around one instance: pixels plus its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCrop {
    pub class: ClassId,
    pub rgb: RgbImage,
    pub mask: BinaryPlane,
}

impl InstanceCrop {
    pub fn new(class: ClassId, rgb: RgbImage, mask: BinaryPlane) -> Result<Self> {
        if rgb.height != mask.height || rgb.width != mask.width {
            return Err(Error::shape(format!(
                "crop {}x{} with mask {}x{}",
                rgb.height, rgb.width, mask.height, mask.width
            )));
        }
        if mask.popcount() == 0 {
            return Err(Error::shape("crop mask has no foreground"));
        }
        Ok(InstanceCrop { class, rgb, mask })
    }

    fn center_cropped(&self, max_h: usize, max_w: usize) -> InstanceCrop {
        let (h, w) = (self.rgb.height.min(max_h), self.rgb.width.min(max_w));
        if (h, w) == (self.rgb.height, self.rgb.width) {
            return self.clone();
        }
        let (oi, oj) = ((self.rgb.height - h) / 2, (self.rgb.width - w) / 2);
        let mut rgb = RgbImage::new(h, w);
        let mut mask = BinaryPlane::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                rgb.put(i, j, self.rgb.rgb(oi + i, oj + j));
                mask.set(i, j, *self.mask.get(oi + i, oj + j));
            }
        }
        InstanceCrop { class: self.class, rgb, mask }
    }
}

/// FIFO archives of capacity `B`, one per old class.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    archives: BTreeMap<ClassId, VecDeque<InstanceCrop>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchiveSummary {
    pub class: ClassId,
    pub crops: usize,
    pub sizes: Vec<(usize, usize)>,
}

impl MemoryBank {
    pub fn new(old_classes: impl IntoIterator<Item = ClassId>, capacity: usize) -> Result<Self> {
        let mut archives = BTreeMap::new();
        for c in old_classes {
            if c.is_background() {
                return Err(Error::NotOldClass(c));
            }
            archives.insert(c, VecDeque::with_capacity(capacity));
        }
        Ok(MemoryBank { capacity, archives })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.archives.keys().copied()
    }

    pub fn archive(&self, class: ClassId) -> Option<&VecDeque<InstanceCrop>> {
        self.archives.get(&class)
    }

    pub fn is_empty(&self) -> bool {
        self.archives.values().all(VecDeque::is_empty)
    }

    pub fn total_crops(&self) -> usize {
        self.archives.values().map(VecDeque::len).sum()
    }

    /// Append a crop, evicting the oldest one when the archive is full.
    pub fn insert(&mut self, crop: InstanceCrop) -> Result<()> {
        let cap = self.capacity;
        let archive = self.archives.get_mut(&crop.class).ok_or(Error::NotOldClass(crop.class))?;
        if cap == 0 {
            return Ok(());
        }
        while archive.len() >= cap {
            archive.pop_front();
        }
        archive.push_back(crop);
        Ok(())
    }

    /// Uniform over classes with a non-empty archive, then uniform within it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&InstanceCrop> {
        let filled: Vec<&VecDeque<InstanceCrop>> = self.archives.values().filter(|a| !a.is_empty()).collect();
        if filled.is_empty() {
            return Err(Error::EmptyBank);
        }
        let archive = filled[rng.random_range(0..filled.len())];
        Ok(&archive[rng.random_range(0..archive.len())])
    }

    pub fn summary(&self) -> Vec<ArchiveSummary> {
        self.archives
            .iter()
            .map(|(&class, a)| ArchiveSummary {
                class,
                crops: a.len(),
                sizes: a.iter().map(|c| (c.rgb.height, c.rgb.width)).collect(),
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        let n = u16::try_from(self.archives.len()).map_err(|_| Error::format("too many classes"))?;
        out.extend_from_slice(&n.to_le_bytes());
        for (class, archive) in &self.archives {
            out.extend_from_slice(&class.0.to_le_bytes());
            let k = u16::try_from(archive.len()).map_err(|_| Error::format("too many crops"))?;
            out.extend_from_slice(&k.to_le_bytes());
            for crop in archive {
                let h = u32::try_from(crop.rgb.height).map_err(|_| Error::format("crop too tall"))?;
                let w = u32::try_from(crop.rgb.width).map_err(|_| Error::format("crop too wide"))?;
                out.extend_from_slice(&h.to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
                out.extend_from_slice(&crop.rgb.data);
                out.extend(crop.mask.data.iter().map(|&m| if m != 0 { 255u8 } else { 0 }));
            }
        }
        Ok(out)
    }

    /// Decode a bank file. `capacity` defaults to the largest stored archive.
    pub fn decode(bytes: &[u8], capacity: Option<usize>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(BANK_MAGIC)?;
        r.version(BANK_VERSION)?;
        let n = r.u16()?;
        let mut archives = BTreeMap::new();
        for _ in 0..n {
            let class = ClassId(r.u16()?);
            if class.is_background() {
                return Err(Error::NotOldClass(class));
            }
            let k = r.u16()? as usize;
            let mut archive = VecDeque::with_capacity(k);
            for _ in 0..k {
                let h = r.u32()? as usize;
                let w = r.u32()? as usize;
                let px = h.checked_mul(w).ok_or_else(|| Error::format("crop size overflow"))?;
                let rgb = RgbImage::from_vec(h, w, r.take(px * 3)?.to_vec())?;
                let mask = r
                    .take(px)?
                    .iter()
                    .map(|&b| match b {
                        0 => Ok(0u8),
                        255 => Ok(1u8),
                        other => Err(Error::format(format!("mask byte {other} is neither 0 nor 255"))),
                    })
                    .collect::<Result<Vec<u8>>>()?;
                archive.push_back(InstanceCrop::new(class, rgb, Plane::from_vec(h, w, mask)?)?);
            }
            if archives.insert(class, archive).is_some() {
                return Err(Error::format(format!("class {class} stored twice")));
            }
        }
        r.finish()?;
        let largest = archives.values().map(VecDeque::len).max().unwrap_or(0);
        let capacity = capacity.unwrap_or(largest);
        if largest > capacity {
            return Err(Error::format(format!("archive holds {largest} crops, capacity is {capacity}")));
        }
        Ok(MemoryBank { capacity, archives })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path, capacity: Option<usize>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, capacity)
    }
}

/// Split a label map into 4-connected instances of the given classes, each
/// returned as a tight bounding-box crop. Components smaller than
/// `min_pixels` are dropped. Order: raster order of each component's first
/// pixel.
pub fn extract_instances(
    image: &RgbImage,
    labels: &Plane<u16>,
    classes: &BTreeSet<ClassId>,
    min_pixels: usize,
) -> Result<Vec<InstanceCrop>> {
    if image.height != labels.height || image.width != labels.width {
        return Err(Error::shape(format!(
            "image {}x{} vs labels {}x{}",
            image.height, image.width, labels.height, labels.width
        )));
    }
    let (h, w) = (labels.height, labels.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let class = ClassId(labels.data[start]);
        if seen[start] || !classes.contains(&class) || class.is_background() {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels.data[q] == class.0 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
        if pixels.len() < min_pixels {
            continue;
        }
        let (i0, i1) = pixels.iter().fold((h, 0), |(lo, hi), &p| (lo.min(p / w), hi.max(p / w)));
        let (j0, j1) = pixels.iter().fold((w, 0), |(lo, hi), &p| (lo.min(p % w), hi.max(p % w)));
        let (ch, cw) = (i1 - i0 + 1, j1 - j0 + 1);
        let mut rgb = RgbImage::new(ch, cw);
        let mut mask = BinaryPlane::zeros(ch, cw);
        for i in 0..ch {
            for j in 0..cw {
                rgb.put(i, j, image.rgb(i0 + i, j0 + j));
            }
        }
        for &p in &pixels {
            mask.set(p / w - i0, p % w - j0, 1);
        }
        out.push(InstanceCrop { class, rgb, mask });
    }
    Ok(out)
}

/// Where a crop landed.
#[derive(Debug, Clone, PartialEq)]
pub struct PasteResult {
    pub class: ClassId,
    /// Image-resolution mask of overwritten pixels.
    pub mask: BinaryPlane,
}

/// With probability `p`, paste one sampled crop onto `image` at a uniform
/// top-left position (crops larger than the image are center-cropped).
/// An empty bank skips the paste.
pub fn copy_paste<R: Rng + ?Sized>(
    image: &mut RgbImage,
    bank: &MemoryBank,
    p: f64,
    rng: &mut R,
) -> Result<Option<PasteResult>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("paste probability {p} outside [0, 1]")));
    }
    if rng.random::<f64>() >= p {
        return Ok(None);
    }
    let crop = match bank.sample(rng) {
        Ok(c) => c.center_cropped(image.height, image.width),
        Err(Error::EmptyBank) => return Ok(None),
        Err(e) => return Err(e),
    };
    let oi = rng.random_range(0..=image.height - crop.rgb.height);
    let oj = rng.random_range(0..=image.width - crop.rgb.width);
    let mut mask = BinaryPlane::zeros(image.height, image.width);
    for i in 0..crop.rgb.height {
        for j in 0..crop.rgb.width {
            if *crop.mask.get(i, j) != 0 {
                image.put(oi + i, oj + j, crop.rgb.rgb(i, j));
                mask.set(oi + i, oj + j, 1);
            }
        }
    }
    Ok(Some(PasteResult { class: crop.class, mask }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn crop(class: u16, h: usize, w: usize, tag: u8) -> InstanceCrop {
        let rgb = RgbImage::from_vec(h, w, vec![tag; h * w * 3]).unwrap();
        let mask = Plane::from_vec(h, w, (0..h * w).map(|k| (k % 2 == 0) as u8).collect()).unwrap();
        InstanceCrop::new(ClassId(class), rgb, mask).unwrap()
    }

    #[test]
    fn fifo_keeps_last_b() {
        for cap in [1usize, 10, 50] {
            let mut bank = MemoryBank::new([ClassId(1), ClassId(2)], cap).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(cap as u64);
            let mut log: BTreeMap<u16, Vec<u8>> = BTreeMap::new();
            for k in 0..10 * cap {
                let class = rng.random_range(1..=2u16);
                let tag = (k % 251) as u8;
                bank.insert(crop(class, 1, 1, tag)).unwrap();
                log.entry(class).or_default().push(tag);
            }
            for (class, tags) in log {
                let archive = bank.archive(ClassId(class)).unwrap();
                let want = &tags[tags.len().saturating_sub(cap)..];
                let got: Vec<u8> = archive.iter().map(|c| c.rgb.data[0]).collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn insert_and_sample_errors() {
        let mut bank = MemoryBank::new([ClassId(3)], 2).unwrap();
        assert!(matches!(bank.insert(crop(4, 1, 1, 0)), Err(Error::NotOldClass(_))));
        assert!(matches!(bank.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::EmptyBank)));
        assert!(MemoryBank::new([ClassId(0)], 2).is_err());
        let mut zero = MemoryBank::new([ClassId(3)], 0).unwrap();
        zero.insert(crop(3, 1, 1, 0)).unwrap();
        assert!(zero.is_empty());
    }

    #[test]
    fn sampling_is_uniform_over_classes_first() {
        let mut bank = MemoryBank::new([ClassId(1), ClassId(2)], 50).unwrap();
        for _ in 0..40 {
            bank.insert(crop(1, 1, 1, 1)).unwrap();
        }
        bank.insert(crop(2, 1, 1, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hits = (0..4000).filter(|_| bank.sample(&mut rng).unwrap().class == ClassId(2)).count();
        assert!((1800..2200).contains(&hits), "{hits}");
    }

    #[test]
    fn paste_writes_only_masked_pixels() {
        let mut bank = MemoryBank::new([ClassId(5)], 4).unwrap();
        bank.insert(crop(5, 3, 3, 200)).unwrap();
        let mut img = RgbImage::new(6, 6);
        let before = img.clone();
        let res = copy_paste(&mut img, &bank, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().unwrap();
        assert_eq!(res.class, ClassId(5));
        assert_eq!(res.mask.popcount(), 5);
        for i in 0..6 {
            for j in 0..6 {
                let want = if *res.mask.get(i, j) != 0 { [200; 3] } else { before.rgb(i, j) };
                assert_eq!(img.rgb(i, j), want);
            }
        }
        assert!(copy_paste(&mut img, &bank, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().is_none());
        let empty = MemoryBank::new([ClassId(5)], 4).unwrap();
        assert!(copy_paste(&mut img, &empty, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().is_none());
        assert!(copy_paste(&mut img, &bank, 1.5, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn oversized_crops_are_center_cropped() {
        let mut bank = MemoryBank::new([ClassId(5)], 4).unwrap();
        let rgb = RgbImage::from_vec(1, 5, (0..15).map(|v| v as u8).collect()).unwrap();
        bank.insert(InstanceCrop::new(ClassId(5), rgb, Plane::filled(1, 5, 1)).unwrap()).unwrap();
        let mut img = RgbImage::new(1, 3);
        copy_paste(&mut img, &bank, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().unwrap();
        assert_eq!(img.data, (3..12).collect::<Vec<u8>>());
    }

    #[test]
    fn paste_frequency_tracks_probability() {
        let mut bank = MemoryBank::new([ClassId(5)], 4).unwrap();
        bank.insert(crop(5, 1, 1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut img = RgbImage::new(4, 4);
        let n = (0..4000).filter(|_| copy_paste(&mut img, &bank, 0.5, &mut rng).unwrap().is_some()).count();
        assert!((1850..2150).contains(&n), "{n}");
    }

    #[test]
    fn components_are_split_and_tight() {
        #[rustfmt::skip]
        let labels = Plane::from_vec(4, 5, vec![
            1, 1, 0, 2, 2,
            0, 1, 0, 0, 2,
            1, 0, 0, 3, 0,
            1, 1, 0, 3, 3,
        ]).unwrap();
        let mut img = RgbImage::new(4, 5);
        for p in 0..20 {
            img.put(p / 5, p % 5, [p as u8; 3]);
        }
        let classes: BTreeSet<ClassId> = [ClassId(1), ClassId(2)].into();
        let crops = extract_instances(&img, &labels, &classes, 1).unwrap();
        let dims: Vec<_> = crops.iter().map(|c| (c.class.0, c.rgb.height, c.rgb.width, c.mask.popcount())).collect();
        assert_eq!(dims, vec![(1, 2, 2, 3), (2, 2, 2, 3), (1, 2, 2, 3)]);
        assert_eq!(crops[0].mask.data, vec![1, 1, 0, 1]);
        assert_eq!(crops[0].rgb.rgb(1, 1), [6; 3]);
        assert_eq!(extract_instances(&img, &labels, &classes, 4).unwrap().len(), 0);
    }

    #[test]
    fn bank_file_layout() {
        let mut bank = MemoryBank::new([ClassId(2), ClassId(7)], 3).unwrap();
        bank.insert(crop(2, 1, 2, 9)).unwrap();
        let bytes = bank.encode().unwrap();
        // 4+2+2 header, class 2: 2+2 + (4+4+6+2), class 7: 2+2
        assert_eq!(bytes.len(), 8 + 4 + 16 + 4);
        assert_eq!(&bytes[..4], b"FMWB");
        assert_eq!(&bytes[bytes.len() - 4..], &[7, 0, 0, 0]);
        let back = MemoryBank::decode(&bytes, Some(3)).unwrap();
        assert_eq!(back, bank);
        assert!(MemoryBank::decode(&bytes, Some(0)).is_err());
        assert!(MemoryBank::decode(&bytes[..bytes.len() - 1], None).is_err());
    }

    proptest! {
        #[test]
        fn bank_rewrite_is_byte_identical(
            crops in proptest::collection::vec((1u16..4, 1usize..5, 1usize..5, any::<u8>()), 0..12),
        ) {
            let mut bank = MemoryBank::new([ClassId(1), ClassId(2), ClassId(3)], 5).unwrap();
            for (c, h, w, t) in crops {
                bank.insert(crop(c, h, w, t)).unwrap();
            }
            let a = bank.encode().unwrap();
            let b = MemoryBank::decode(&a, None).unwrap().encode().unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
