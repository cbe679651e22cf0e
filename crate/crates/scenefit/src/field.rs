//! Image and per-pixel grid containers.
//!
//! [`Image`] and [`DepthMap`] hold concrete `f64` data with validated
//! invariants; [`Field`] is the generic single-channel grid used where the
//! pipeline carries tape variables instead of plain numbers.

use crate::{Error, Result, Scalar};

/// Row-major image with 1 (grayscale) or 3 (RGB) channels, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Domain(format!("image value {bad} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Mean over channels at a pixel.
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let base = (y * self.width + x) * self.channels;
        let mut sum = 0.0;
        for c in 0..self.channels {
            sum += self.data[base + c];
        }
        sum / self.channels as f64
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// 2x box downsampling (exact 2x2 block means, trailing odd row/column
    /// dropped). Used by the multi-scale smoothness schedule.
    pub fn downsample2(&self) -> Image {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    if self.width < 2 || self.height < 2 {
                        data.push(self.get(x.min(self.width - 1), y.min(self.height - 1), c));
                        continue;
                    }
                    let s = self.get(2 * x, 2 * y, c)
                        + self.get(2 * x + 1, 2 * y, c)
                        + self.get(2 * x, 2 * y + 1, c)
                        + self.get(2 * x + 1, 2 * y + 1, c);
                    data.push(s * 0.25);
                }
            }
        }
        Image {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }
}

/// Per-pixel positive depth for a frame, in scene units.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "depth data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::Domain(format!("depth value {bad} is not positive")));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        DepthMap::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn as_field(&self) -> Field<f64> {
        Field {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }
}

/// Generic single-channel grid over any [`Scalar`] carrier.
#[derive(Clone, Debug)]
pub struct Field<S> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Field<S> {
    pub fn from_data(width: usize, height: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), width * height);
        Field {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> S {
        self.data[y * self.width + x]
    }

    pub fn downsample2(&self) -> Field<S> {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                if self.width < 2 || self.height < 2 {
                    data.push(self.get(x.min(self.width - 1), y.min(self.height - 1)));
                    continue;
                }
                let s = self.get(2 * x, 2 * y)
                    + self.get(2 * x + 1, 2 * y)
                    + self.get(2 * x, 2 * y + 1)
                    + self.get(2 * x + 1, 2 * y + 1);
                data.push(s * 0.25);
            }
        }
        Field {
            width: w,
            height: h,
            data,
        }
    }
}

/// Per-pixel record of whether a warped sample can contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validity {
    Valid,
    /// Projected outside the source image bounds.
    OutOfView,
    /// Projected point at or behind the camera plane.
    BehindCamera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<Validity>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, data: Vec<Validity>) -> Self {
        assert_eq!(data.len(), width * height);
        ValidityMask {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[Validity] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Validity {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == Validity::Valid
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|v| **v == Validity::Valid).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(2, 1, 1, vec![0.0, 1.2]).is_err());
        assert!(Image::new(2, 1, 1, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(2, 1, 2, vec![0.0; 4]).is_err());
    }

    #[test]
    fn depth_rejects_nonpositive() {
        assert!(DepthMap::new(2, 1, vec![1.0, 0.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, -3.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn downsample_is_block_mean() {
        let img = Image::new(4, 2, 1, vec![0.0, 0.4, 0.8, 1.0, 0.2, 0.6, 0.0, 0.2]).unwrap();
        let half = img.downsample2();
        assert_eq!(half.width(), 2);
        assert_eq!(half.height(), 1);
        assert!((half.get(0, 0, 0) - 0.3).abs() < 1e-15);
        assert!((half.get(1, 0, 0) - 0.5).abs() < 1e-15);
    }
}
