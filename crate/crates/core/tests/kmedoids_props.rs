use ksam_core::clustering::{k_medoids, PointSet};
use ksam_core::Coord;
use proptest::prelude::*;

const GRID: usize = 10;

fn cost(points: &[Coord], medoids: &[Coord]) -> f64 {
    points
        .iter()
        .map(|&(r, c)| {
            medoids
                .iter()
                .map(|&(mr, mc)| ((r as f64 - mr as f64).powi(2) + (c as f64 - mc as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn point_set() -> impl Strategy<Value = (Vec<Coord>, usize)> {
    (1usize..=3, proptest::collection::btree_set((0..GRID, 0..GRID), 3..=12))
        .prop_map(|(k, pts)| (pts.into_iter().collect(), k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn medoids_are_input_points_and_cost_is_consistent((points, k) in point_set()) {
        let set = PointSet::new(points.clone(), (GRID, GRID)).unwrap();
        let res = k_medoids(&set, k, 0, 100).unwrap();
        prop_assert_eq!(res.medoids.len(), k);
        for (m, &i) in res.medoids.iter().zip(&res.medoid_indices) {
            prop_assert_eq!(*m, points[i]);
        }
        let mut uniq = res.medoid_indices.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), k);
        prop_assert!((res.total_cost - cost(&points, &res.medoids)).abs() <= 1e-9);
    }

    #[test]
    fn cost_never_increases_across_swaps((points, k) in point_set()) {
        let res = k_medoids(&PointSet::new(points, (GRID, GRID)).unwrap(), k, 0, 100).unwrap();
        prop_assert_eq!(res.cost_trace.len(), res.iterations + 1);
        for w in res.cost_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        prop_assert_eq!(*res.cost_trace.last().unwrap(), res.total_cost);
    }

    #[test]
    fn no_single_swap_improves((points, k) in point_set()) {
        let res = k_medoids(&PointSet::new(points.clone(), (GRID, GRID)).unwrap(), k, 0, 100).unwrap();
        for i in 0..k {
            for (h, &p) in points.iter().enumerate() {
                if res.medoid_indices.contains(&h) {
                    continue;
                }
                let mut swapped = res.medoids.clone();
                swapped[i] = p;
                prop_assert!(cost(&points, &swapped) >= res.total_cost - 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_and_seed_independent((points, k) in point_set(), seed in any::<u64>()) {
        let set = PointSet::new(points, (GRID, GRID)).unwrap();
        prop_assert_eq!(k_medoids(&set, k, 0, 100).unwrap(), k_medoids(&set, k, seed, 100).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scaling_coordinates_scales_cost((points, k) in point_set(), factor in 2usize..=5) {
        let base = k_medoids(&PointSet::new(points.clone(), (GRID, GRID)).unwrap(), k, 0, 100).unwrap();
        let scaled: Vec<Coord> = points.iter().map(|&(r, c)| (r * factor, c * factor)).collect();
        let bounds = (GRID * factor, GRID * factor);
        let res = k_medoids(&PointSet::new(scaled, bounds).unwrap(), k, 0, 100).unwrap();
        prop_assert_eq!(&res.medoid_indices, &base.medoid_indices);
        prop_assert!((res.total_cost - factor as f64 * base.total_cost).abs() <= 1e-9 * res.total_cost.max(1.0));
    }
}

#[test]
fn handles_a_region_sized_point_set() {
    let pts: Vec<Coord> = (0..64).flat_map(|r| (0..64).map(move |c| (r, c))).filter(|&(r, c)| (r * 7 + c * 3) % 5 != 0).collect();
    let n = pts.len();
    let res = k_medoids(&PointSet::new(pts, (64, 64)).unwrap(), 5, 0, 100).unwrap();
    assert_eq!(res.medoids.len(), 5);
    assert!(n > 3000);
}

#[test]
fn rejects_bad_k() {
    let set = PointSet::new(vec![(0, 0), (1, 1)], (2, 2)).unwrap();
    assert!(k_medoids(&set, 0, 0, 10).is_err());
    assert!(k_medoids(&set, 3, 0, 10).is_err());
    assert!(k_medoids(&PointSet::empty((2, 2)), 1, 0, 10).is_err());
}
