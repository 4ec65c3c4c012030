//! Pixel grids: binary masks, radiograph images and the resampling helpers shared by the
//! preprocessing and segmenter stages.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(row, col)` pixel coordinate.
pub type Coord = (usize, usize);

/// Row-major linear index, the tie-break key used throughout clustering and prompting.
#[inline]
pub fn linear_index((row, col): Coord, cols: usize) -> usize {
    row * cols + col
}

/// A strictly binary 2-D mask with explicit `(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask(Array2<bool>);

impl BinaryMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self(Array2::from_elem((rows, cols), false))
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self(Array2::from_elem((rows, cols), true))
    }

    pub fn from_array(data: Array2<bool>) -> Self {
        Self(data)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(Coord) -> bool) -> Self {
        Self(Array2::from_shape_fn((rows, cols), f))
    }

    /// Pixels at or above `threshold` become foreground.
    pub fn from_threshold(values: &Array2<f32>, threshold: f32) -> Self {
        Self(values.mapv(|v| v >= threshold))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    #[inline]
    pub fn get(&self, (r, c): Coord) -> bool {
        self.0[[r, c]]
    }

    #[inline]
    pub fn set(&mut self, (r, c): Coord, value: bool) {
        self.0[[r, c]] = value;
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn into_array(self) -> Array2<bool> {
        self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&v| v)
    }

    /// Foreground coordinates in row-major order.
    pub fn ones(&self) -> Vec<Coord> {
        self.0
            .indexed_iter()
            .filter_map(|(idx, &v)| v.then_some(idx))
            .collect()
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.0.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    pub fn complement(&self) -> Self {
        Self(self.0.mapv(|v| !v))
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        Ok(Self(ndarray::Zip::from(&self.0)
            .and(&other.0)
            .map_collect(|&a, &b| a && b)))
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        Ok(Self(ndarray::Zip::from(&self.0)
            .and(&other.0)
            .map_collect(|&a, &b| a || b)))
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && ndarray::Zip::from(&self.0)
                .and(&other.0)
                .all(|&a, &b| !a || b)
    }

    pub fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Nearest-neighbour resampling on pixel centres.
    pub fn resize_nearest(&self, (rows, cols): (usize, usize)) -> Self {
        let (src_rows, src_cols) = self.dims();
        let map = |dst: usize, src_len: usize, dst_len: usize| {
            let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
            pos.min(src_len - 1)
        };
        Self::from_fn(rows, cols, |(r, c)| {
            self.0[[map(r, src_rows, rows), map(c, src_cols, cols)]]
        })
    }

    /// Reads a single-channel mask; any value ≥ 128 is foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_owned(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |(r, c)| {
            img.get_pixel(c as u32, r as u32)[0] >= 128
        }))
    }

    /// Writes the mask as a single-channel PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (rows, cols) = self.dims();
        let img: GrayImage = ImageBuffer::from_fn(cols as u32, rows as u32, |x, y| {
            Luma([if self.0[[y as usize, x as usize]] { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
    }
}

/// Radiograph pixels as `(rows, cols, channels)` with one or three 8-bit channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CxrImage(Array3<u8>);

impl CxrImage {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        match data.dim().2 {
            1 | 3 => Ok(Self(data)),
            c => Err(Error::invalid(format!(
                "image must have 1 or 3 channels, got {c}"
            ))),
        }
    }

    pub fn from_gray(gray: &Array2<u8>) -> Self {
        Self(gray.clone().insert_axis(Axis(2)))
    }

    /// Gray replicated to three channels, the layout of the public CXR datasets.
    pub fn gray_in_rgb(gray: &Array2<u8>) -> Self {
        let (rows, cols) = gray.dim();
        Self(Array3::from_shape_fn((rows, cols, 3), |(r, c, _)| {
            gray[[r, c]]
        }))
    }

    pub fn dims(&self) -> (usize, usize) {
        let (r, c, _) = self.0.dim();
        (r, c)
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn as_array(&self) -> &Array3<u8> {
        &self.0
    }

    /// Unweighted channel mean.
    pub fn gray_f32(&self) -> Array2<f32> {
        let channels = self.channels() as f32;
        self.0
            .map_axis(Axis(2), |px| px.iter().map(|&v| v as f32).sum::<f32>() / channels)
    }

    /// Three-channel view; single-channel images are replicated.
    pub fn to_rgb(&self) -> Array3<u8> {
        if self.channels() == 3 {
            return self.0.clone();
        }
        let (rows, cols) = self.dims();
        Array3::from_shape_fn((rows, cols, 3), |(r, c, _)| self.0[[r, c, 0]])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let dynamic = image::open(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?;
        let data = if dynamic.color().has_color() {
            let rgb = dynamic.into_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        } else {
            let gray = dynamic.into_luma8();
            let (w, h) = gray.dimensions();
            Array3::from_shape_vec((h as usize, w as usize, 1), gray.into_raw())
        }
        .expect("image buffer length matches its dimensions");
        Ok(Self(data))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (rows, cols) = self.dims();
        let result = if self.channels() == 3 {
            let img: RgbImage = ImageBuffer::from_fn(cols as u32, rows as u32, |x, y| {
                let (r, c) = (y as usize, x as usize);
                Rgb([self.0[[r, c, 0]], self.0[[r, c, 1]], self.0[[r, c, 2]]])
            });
            img.save(path)
        } else {
            let img: GrayImage = ImageBuffer::from_fn(cols as u32, rows as u32, |x, y| {
                Luma([self.0[[y as usize, x as usize, 0]]])
            });
            img.save(path)
        };
        result.map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping (no antialiasing).
pub fn resize_bilinear(src: &Array2<f32>, (rows, cols): (usize, usize)) -> Array2<f32> {
    let (src_rows, src_cols) = src.dim();
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let scale = src_len as f64 / dst_len as f64;
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let row_taps: Vec<_> = (0..rows).map(|r| axis(r, src_rows, rows)).collect();
    let col_taps: Vec<_> = (0..cols).map(|c| axis(c, src_cols, cols)).collect();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1, fr) = row_taps[r];
        let (c0, c1, fc) = col_taps[c];
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Foreground pixels grouped into 8-connected components, each in row-major order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<Coord>> {
    let (rows, cols) = mask.dims();
    let mut seen = Array2::from_elem((rows, cols), false);
    let mut components = Vec::new();
    for start in mask.ones() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut component = Vec::new();
        while let Some((r, c)) = stack.pop() {
            component.push((r, c));
            for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    if mask.get((nr, nc)) && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}
