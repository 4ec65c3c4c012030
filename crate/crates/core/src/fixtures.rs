//! Synthetic chest-radiograph fixtures: two elliptical lung fields and an elliptical heart
//! shadow on a brighter body, with uniform noise. Geometry is in fractions of the image so the
//! same fixture renders at mask resolution (128²) and image resolution (512²).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{file_stem_for, CxrSample, DatasetId};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Coord, CxrImage};

pub const FIXTURE_DIMS: (usize, usize) = (512, 512);

const BODY: f64 = 200.0;
const LUNG: f64 = 70.0;
const HEART: f64 = 140.0;
const NOISE: f64 = 6.0;

/// Axis-aligned ellipse in fractional image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub radii: (f64, f64),
}

impl Ellipse {
    /// Whether the centre of pixel `(r, c)` lies inside, for an image of size `dims`.
    pub fn contains_pixel(&self, (r, c): Coord, (rows, cols): (usize, usize)) -> bool {
        let y = (r as f64 + 0.5) / rows as f64;
        let x = (c as f64 + 0.5) / cols as f64;
        let dy = (y - self.center.0) / self.radii.0;
        let dx = (x - self.center.1) / self.radii.1;
        dy * dy + dx * dx <= 1.0
    }

    fn mask(&self, dims: (usize, usize)) -> BinaryMask {
        BinaryMask::from_fn(dims.0, dims.1, |p| self.contains_pixel(p, dims))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureGeometry {
    /// Patient's right lung, on the image's left.
    pub right_lung: Ellipse,
    pub left_lung: Ellipse,
    pub heart: Ellipse,
}

impl FixtureGeometry {
    pub fn nominal() -> Self {
        Self {
            right_lung: Ellipse {
                center: (0.50, 0.32),
                radii: (0.29, 0.16),
            },
            left_lung: Ellipse {
                center: (0.50, 0.68),
                radii: (0.29, 0.16),
            },
            heart: Ellipse {
                center: (0.68, 0.58),
                radii: (0.15, 0.17),
            },
        }
    }

    /// Nominal geometry with every centre shifted by up to ±0.02 and every radius scaled
    /// by a factor in [0.92, 1.08].
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |e: Ellipse| Ellipse {
            center: (
                e.center.0 + rng.random_range(-0.02..=0.02),
                e.center.1 + rng.random_range(-0.02..=0.02),
            ),
            radii: (
                e.radii.0 * rng.random_range(0.92..=1.08),
                e.radii.1 * rng.random_range(0.92..=1.08),
            ),
        };
        let n = Self::nominal();
        Self {
            right_lung: jitter(n.right_lung),
            left_lung: jitter(n.left_lung),
            heart: jitter(n.heart),
        }
    }

    /// Lung fields with the heart shadow removed, as in the public annotations.
    pub fn lung_mask(&self, dims: (usize, usize)) -> BinaryMask {
        BinaryMask::from_fn(dims.0, dims.1, |p| {
            (self.right_lung.contains_pixel(p, dims) || self.left_lung.contains_pixel(p, dims))
                && !self.heart.contains_pixel(p, dims)
        })
    }

    pub fn heart_mask(&self, dims: (usize, usize)) -> BinaryMask {
        self.heart.mask(dims)
    }

    /// Gray-in-RGB radiograph: body with a vertical gradient, dark lungs, heart drawn on top.
    pub fn render(&self, dims: (usize, usize), noise_seed: u64) -> CxrImage {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let gray = Array2::from_shape_fn(dims, |p| {
            let base = if self.heart.contains_pixel(p, dims) {
                HEART
            } else if self.right_lung.contains_pixel(p, dims) || self.left_lung.contains_pixel(p, dims) {
                LUNG
            } else {
                BODY - 10.0 + 20.0 * p.0 as f64 / dims.0 as f64
            };
            (base + rng.random_range(-NOISE..=NOISE)).round().clamp(0.0, 255.0) as u8
        });
        CxrImage::gray_in_rgb(&gray)
    }
}

/// The `index`-th fixture of a family seeded by `seed`, at `FIXTURE_DIMS`.
pub fn synthetic_sample(index: usize, seed: u64) -> CxrSample {
    let geometry_seed = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let g = FixtureGeometry::random(geometry_seed);
    CxrSample::new(
        format!("other/synth_{index:03}"),
        g.render(FIXTURE_DIMS, geometry_seed ^ 0x5eed),
        g.lung_mask(FIXTURE_DIMS),
        Some(g.heart_mask(FIXTURE_DIMS)),
        DatasetId::Other,
    )
    .expect("fixture masks match image dims")
}

pub fn synthetic_dataset(n: usize, seed: u64) -> Vec<CxrSample> {
    (0..n).map(|i| synthetic_sample(i, seed)).collect()
}

/// Writes samples in the dataset layout: `root/images`, `root/lung_masks`, and heart masks
/// under `root/heart_masks`.
pub fn write_dataset(root: &Path, samples: &[CxrSample]) -> Result<()> {
    let dirs = ["images", "lung_masks", "heart_masks"].map(|d| root.join(d));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        let stem = s.id.rsplit('/').next().unwrap_or(&s.id);
        let name = format!("{}.png", file_stem_for(stem));
        s.image.save_png(&dirs[0].join(&name))?;
        s.lung_mask.save_png(&dirs[1].join(&name))?;
        if let Some(h) = &s.heart_mask {
            h.save_png(&dirs[2].join(&name))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic_and_varies() {
        assert_eq!(synthetic_sample(3, 1), synthetic_sample(3, 1));
        assert_ne!(synthetic_sample(3, 1).lung_mask, synthetic_sample(4, 1).lung_mask);
    }

    #[test]
    fn lungs_exclude_heart_and_heart_overlaps_left_lung() {
        let g = FixtureGeometry::nominal();
        let dims = (128, 128);
        let lung = g.lung_mask(dims);
        let heart = g.heart_mask(dims);
        assert!(lung.and(&heart).unwrap().is_empty());
        let left = g.left_lung.mask(dims);
        assert!(!left.and(&heart).unwrap().is_empty());
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synthetic_dataset(3, 9);
        write_dataset(dir.path(), &samples).unwrap();
        let loaded =
            crate::dataset::load_dataset(dir.path(), Some(&dir.path().join("heart_masks"))).unwrap();
        assert_eq!(loaded.samples, samples);
    }
}
