//! Morphological cleanup of the segmenter output: erosion followed by dilation.
//!
//! Pixels outside the image count as background for both operations.

use serde::{Deserialize, Serialize};

use crate::grid::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuringElement {
    /// 3×3 all-ones (8-connectivity).
    #[default]
    Square3,
}

impl StructuringElement {
    fn radius(self) -> usize {
        match self {
            StructuringElement::Square3 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorphConfig {
    pub erode_iters: usize,
    pub dilate_iters: usize,
    pub element: StructuringElement,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            erode_iters: 3,
            dilate_iters: 3,
            element: StructuringElement::Square3,
        }
    }
}

// One pass: `all == true` is erosion (every neighbour set), otherwise dilation (any set).
fn pass(mask: &BinaryMask, element: StructuringElement, all: bool) -> BinaryMask {
    let (rows, cols) = mask.dims();
    let rad = element.radius() as isize;
    let src = mask.as_array();
    BinaryMask::from_fn(rows, cols, |(r, c)| {
        let mut any = false;
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                let v = nr >= 0
                    && nc >= 0
                    && (nr as usize) < rows
                    && (nc as usize) < cols
                    && src[[nr as usize, nc as usize]];
                if all && !v {
                    return false;
                }
                any |= v;
            }
        }
        all || any
    })
}

pub fn erode(mask: &BinaryMask, iters: usize, element: StructuringElement) -> BinaryMask {
    (0..iters).fold(mask.clone(), |m, _| pass(&m, element, true))
}

pub fn dilate(mask: &BinaryMask, iters: usize, element: StructuringElement) -> BinaryMask {
    (0..iters).fold(mask.clone(), |m, _| pass(&m, element, false))
}

/// `dilate(erode(mask))`; with equal iteration counts this is an opening, which removes
/// every component narrower than `2 * erode_iters + 1` pixels in either direction.
pub fn clean_mask(mask: &BinaryMask, config: &MorphConfig) -> BinaryMask {
    let eroded = erode(mask, config.erode_iters, config.element);
    dilate(&eroded, config.dilate_iters, config.element)
}
