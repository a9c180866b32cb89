//! Images, label maps, and the on-disk dataset layout.
//!
//! ```text
//! <root>/index.json          DatasetIndex
//! <root>/images/<id>.png     RGB image
//! <root>/labels/<id>.png     8-bit class-id map (only when pixel_gt = true)
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label_space::DatasetIndex;
use crate::tensor::{Plane, RgbImage};

/// Label value skipped by evaluation.
pub const IGNORE_LABEL: u16 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub id: String,
    pub pixels: RgbImage,
}

/// An image and, for pixel-supervised data, its class-id map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub gt: Option<Plane<u16>>,
}

pub struct DatasetDir {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let index_path = root.join("index.json");
        if !index_path.exists() {
            return Err(Error::MissingPrerequisite(index_path));
        }
        Ok(DatasetDir { root: root.to_path_buf(), index: DatasetIndex::load(&index_path)? })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.png"))
    }

    pub fn load_image(&self, id: &str) -> Result<Image> {
        Ok(Image { id: id.to_string(), pixels: read_png_rgb(&self.image_path(id))? })
    }

    pub fn load_sample(&self, id: &str) -> Result<Sample> {
        let image = self.load_image(id)?;
        let has_gt = self.index.get(id).is_some_and(|e| e.pixel_gt);
        let gt = if has_gt { Some(read_png_labels(&self.label_path(id))?) } else { None };
        Ok(Sample { image, gt })
    }

    /// Write a dataset directory from in-memory samples.
    pub fn write(root: &Path, index: &DatasetIndex, samples: &[Sample]) -> Result<Self> {
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::create_dir_all(root.join("labels"))?;
        let dir = DatasetDir { root: root.to_path_buf(), index: index.clone() };
        for s in samples {
            write_png_rgb(&dir.image_path(&s.image.id), &s.image.pixels)?;
            if let Some(gt) = &s.gt {
                write_png_labels(&dir.label_path(&s.image.id), gt)?;
            }
        }
        std::fs::write(root.join("index.json"), index.to_json())?;
        Ok(dir)
    }
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(format!("{}: {other}", path.display())),
    }
}

pub fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_vec(h as usize, w as usize, img.into_raw())
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::format(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn read_png_labels(path: &Path) -> Result<Plane<u16>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Plane::from_vec(h as usize, w as usize, img.into_raw().into_iter().map(u16::from).collect())
}

pub fn write_png_labels(path: &Path, labels: &Plane<u16>) -> Result<()> {
    let bytes = labels
        .data
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::IdOutOfRange(v)))
        .collect::<Result<Vec<u8>>>()?;
    image::save_buffer(path, &bytes, labels.width as u32, labels.height as u32, image::ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::{ClassId, IndexEntry};

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(3, 4);
        img.put(1, 2, [10, 20, 30]);
        let gt = Plane::from_vec(3, 4, vec![0, 1, 2, 255, 0, 0, 0, 0, 3, 3, 3, 3]).unwrap();
        let index = DatasetIndex {
            entries: vec![IndexEntry { id: "a".into(), classes: [ClassId(1)].into(), pixel_gt: true }],
        };
        let s = Sample { image: Image { id: "a".into(), pixels: img }, gt: Some(gt) };
        DatasetDir::write(dir.path(), &index, std::slice::from_ref(&s)).unwrap();
        let d = DatasetDir::open(dir.path()).unwrap();
        assert_eq!(d.load_sample("a").unwrap(), s);
    }
}
