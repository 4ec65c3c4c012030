use ksam_core::grid::connected_components;
use ksam_core::postprocess::{clean_mask, dilate, erode, MorphConfig, StructuringElement};
use ksam_core::BinaryMask;
use proptest::prelude::*;

const SIDE: usize = 16;
const SQ: StructuringElement = StructuringElement::Square3;

fn mask() -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), SIDE * SIDE)
        .prop_map(|bits| BinaryMask::from_fn(SIDE, SIDE, |(r, c)| bits[r * SIDE + c]))
}

// Value of the 3×3 neighbourhood, with out-of-image pixels as background.
fn neighbourhood(m: &BinaryMask, (r, c): (usize, usize)) -> Vec<bool> {
    let mut out = Vec::with_capacity(9);
    for dr in [-1i64, 0, 1] {
        for dc in [-1i64, 0, 1] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            let inside = nr >= 0 && nc >= 0 && nr < SIDE as i64 && nc < SIDE as i64;
            out.push(inside && m.get((nr as usize, nc as usize)));
        }
    }
    out
}

fn oracle_erode(m: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(SIDE, SIDE, |p| neighbourhood(m, p).iter().all(|&v| v))
}

fn oracle_dilate(m: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(SIDE, SIDE, |p| neighbourhood(m, p).iter().any(|&v| v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_neighbourhood_oracle(m in mask(), iters in 0usize..4) {
        let (mut e, mut d) = (m.clone(), m.clone());
        for _ in 0..iters {
            e = oracle_erode(&e);
            d = oracle_dilate(&d);
        }
        prop_assert_eq!(erode(&m, iters, SQ), e);
        prop_assert_eq!(dilate(&m, iters, SQ), d);
    }

    #[test]
    fn opening_is_idempotent_and_anti_extensive(m in mask(), iters in 1usize..4) {
        let cfg = MorphConfig { erode_iters: iters, dilate_iters: iters, element: SQ };
        let once = clean_mask(&m, &cfg);
        prop_assert_eq!(clean_mask(&once, &cfg), once.clone());
        prop_assert!(once.is_subset_of(&m));
    }

    #[test]
    fn erosion_shrinks_dilation_grows(m in mask()) {
        prop_assert!(erode(&m, 1, SQ).is_subset_of(&m));
        prop_assert!(m.is_subset_of(&dilate(&m, 1, SQ)));
    }
}

#[test]
fn opening_removes_specks_and_keeps_blob() {
    let (rows, cols) = (64, 64);
    let blob = |(r, c): (usize, usize)| (10..40).contains(&r) && (10..40).contains(&c);
    // Specks with smallest side 1..=6 pixels, all far from the blob.
    let specks = [(50, 2, 1, 9), (50, 14, 3, 3), (50, 24, 6, 10), (2, 50, 9, 6), (20, 50, 5, 12)];
    let m = BinaryMask::from_fn(rows, cols, |p| {
        blob(p)
            || specks
                .iter()
                .any(|&(r0, c0, h, w)| (r0..r0 + h).contains(&p.0) && (c0..c0 + w).contains(&p.1))
    });
    let cleaned = clean_mask(&m, &MorphConfig::default());
    assert_eq!(cleaned, BinaryMask::from_fn(rows, cols, blob));
    assert_eq!(connected_components(&cleaned).len(), 1);
}

#[test]
fn seven_wide_structure_survives() {
    let m = BinaryMask::from_fn(32, 32, |(r, c)| (10..17).contains(&r) && (5..25).contains(&c));
    assert_eq!(clean_mask(&m, &MorphConfig::default()), m);
}
