//! Dense containers shared by every stage of the pipeline.
//!
//! All grids are row-major. Multi-channel grids are channel-last, so the
//! channel vector of a pixel is a contiguous slice.

use crate::error::{Error, Result};

/// A single-channel `height x width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// A 0/1 mask.
pub type BinaryPlane = Plane<u8>;

impl<T: Clone> Plane<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Plane { height, width, data: vec![value; height * width] }
    }
}

impl<T> Plane<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane { height, width, data })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.width + j] = v;
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl BinaryPlane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Plane::filled(height, width, 0)
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

impl<T: Copy> Plane<T> {
    /// Nearest-neighbour resampling to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Plane<T> {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            let si = nearest_index(i, height, self.height);
            for j in 0..width {
                let sj = nearest_index(j, width, self.width);
                data.push(self.data[si * self.width + sj]);
            }
        }
        Plane { height, width, data }
    }
}

/// Source index for nearest-neighbour resampling (pixel-centre aligned).
#[inline]
pub fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// A `height x width x channels` grid stored channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Clone + Default> Tensor3<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor3 { height, width, channels, data: vec![T::default(); height * width * channels] }
    }
}

impl<T> Tensor3<T> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Tensor3 { height, width, channels, data })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.width + j) * self.channels + k
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> &T {
        &self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn same_shape<U>(&self, other: &Tensor3<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

impl<T: Copy> Tensor3<T> {
    /// Extract channel `k` as a plane.
    pub fn channel(&self, k: usize) -> Plane<T> {
        let data = self.data.chunks_exact(self.channels).map(|px| px[k]).collect();
        Plane { height: self.height, width: self.width, data }
    }

    /// Keep only the listed channels, in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> Tensor3<T> {
        let mut data = Vec::with_capacity(self.pixels() * keep.len());
        for px in self.data.chunks_exact(self.channels) {
            data.extend(keep.iter().map(|&k| px[k]));
        }
        Tensor3 { height: self.height, width: self.width, channels: keep.len(), data }
    }
}

/// An 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage { height, width, data: vec![0; height * width * 3] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "rgb image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(RgbImage { height, width, data })
    }

    #[inline]
    pub fn rgb(&self, i: usize, j: usize) -> [u8; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn put(&mut self, i: usize, j: usize, px: [u8; 3]) {
        let o = (i * self.width + j) * 3;
        self.data[o..o + 3].copy_from_slice(&px);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_upsample_then_downsample_is_identity() {
        let p = Plane::from_vec(2, 3, vec![1u8, 0, 1, 0, 1, 1]).unwrap();
        let up = p.resize_nearest(8, 12);
        assert_eq!(up.resize_nearest(2, 3), p);
        assert_eq!(*up.get(7, 11), 1);
        assert_eq!(*up.get(0, 4), 0);
    }

    #[test]
    fn channel_selection() {
        let t = Tensor3::from_vec(1, 2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(t.select_channels(&[2, 0]).data, vec![2, 0, 5, 3]);
        assert_eq!(t.channel(1).data, vec![1, 4]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(Plane::from_vec(2, 2, vec![0u8; 3]).is_err());
        assert!(RgbImage::from_vec(1, 1, vec![0; 2]).is_err());
    }
}
