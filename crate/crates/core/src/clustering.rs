//! K-medoids (PAM) and k-means over 2-D pixel coordinates.
//!
//! Distances are Euclidean on `(row, col)`. Wherever two candidates score equally (within a
//! relative tolerance of `1e-10`, so float summation order never decides) the one with the
//! lower row-major linear index wins.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Coord};

const REL_TOL: f64 = 1e-10;

/// Background regions are subsampled to this many pixels before clustering.
pub const DEFAULT_SUBSAMPLE_CAP: usize = 2000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Coord>,
    bounds: (usize, usize),
}

impl PointSet {
    /// Fails if a point lies outside `bounds` or appears twice.
    pub fn new(points: Vec<Coord>, bounds: (usize, usize)) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.0 >= bounds.0 || p.1 >= bounds.1) {
            return Err(Error::invalid(format!(
                "point {p:?} outside bounds {bounds:?}"
            )));
        }
        let mut sorted = points.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("point set contains duplicates"));
        }
        Ok(Self { points, bounds })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            points: mask.ones(),
            bounds: mask.dims(),
        }
    }

    pub fn empty(bounds: (usize, usize)) -> Self {
        Self {
            points: Vec::new(),
            bounds,
        }
    }

    pub fn points(&self) -> &[Coord] {
        &self.points
    }

    pub fn bounds(&self) -> (usize, usize) {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: Coord) -> bool {
        self.points.contains(&p)
    }
}

/// Euclidean distance between pixels of one grid, read from a table of square roots of the
/// possible squared distances. Bit-identical to computing `sqrt` directly.
struct GridMetric {
    roots: Vec<f64>,
}

impl GridMetric {
    fn new((rows, cols): (usize, usize)) -> Self {
        let max = rows.saturating_sub(1).pow(2) + cols.saturating_sub(1).pow(2);
        Self {
            roots: (0..=max).map(|s| (s as f64).sqrt()).collect(),
        }
    }

    #[inline]
    fn dist(&self, a: Coord, b: Coord) -> f64 {
        let dr = a.0.abs_diff(b.0);
        let dc = a.1.abs_diff(b.1);
        self.roots[dr * dr + dc * dc]
    }
}

fn check_k(points: &PointSet, k: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("cannot cluster an empty point set"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!(
            "k must be in 1..={}, got {k}",
            points.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedoidResult {
    pub medoid_indices: Vec<usize>,
    pub medoids: Vec<Coord>,
    /// Sum over points of the distance to the nearest medoid.
    pub total_cost: f64,
    /// Number of swaps applied.
    pub iterations: usize,
    /// Total cost after BUILD and after every applied swap.
    pub cost_trace: Vec<f64>,
}

struct Assignment {
    nearest: Vec<usize>,
    d_near: Vec<f64>,
    d_second: Vec<f64>,
    cost: f64,
}

fn assign(metric: &GridMetric, points: &[Coord], medoids: &[usize]) -> Assignment {
    let n = points.len();
    let mut nearest = vec![0; n];
    let mut d_near = vec![f64::INFINITY; n];
    let mut d_second = vec![f64::INFINITY; n];
    // Medoids are visited in ascending linear order so the strict `<` keeps the lowest.
    let mut order: Vec<usize> = (0..medoids.len()).collect();
    order.sort_unstable_by_key(|&m| points[medoids[m]]);
    for (j, &p) in points.iter().enumerate() {
        for &m in &order {
            let d = metric.dist(p, points[medoids[m]]);
            if d < d_near[j] {
                d_second[j] = d_near[j];
                d_near[j] = d;
                nearest[j] = m;
            } else if d < d_second[j] {
                d_second[j] = d;
            }
        }
    }
    let cost = d_near.iter().sum();
    Assignment {
        nearest,
        d_near,
        d_second,
        cost,
    }
}

/// Index of the best value under `better`, breaking near-ties by lowest coordinate.
fn pick<I>(candidates: I, points: &[Coord], minimize: bool, scale: f64) -> Option<(usize, f64)>
where
    I: IntoIterator<Item = (usize, f64)>,
{
    let cands: Vec<(usize, f64)> = candidates.into_iter().collect();
    let best = cands.iter().map(|c| c.1).fold(
        if minimize { f64::INFINITY } else { f64::NEG_INFINITY },
        |a, b| if minimize { a.min(b) } else { a.max(b) },
    );
    let tol = REL_TOL * scale.abs().max(best.abs());
    cands
        .into_iter()
        .filter(|&(_, v)| if minimize { v <= best + tol } else { v >= best - tol })
        .min_by_key(|&(i, _)| points[i])
}

fn build(metric: &GridMetric, points: &[Coord], k: usize) -> Vec<usize> {
    let n = points.len();
    // Each pair once; every sum still accumulates in ascending order of the other point.
    let mut sums = vec![0.0f64; n];
    for i in 0..n {
        let (head, tail) = sums.split_at_mut(i + 1);
        let pi = points[i];
        let mut acc = head[i];
        for (s, &pj) in tail.iter_mut().zip(&points[i + 1..]) {
            let d = metric.dist(pi, pj);
            acc += d;
            *s += d;
        }
        head[i] = acc;
    }
    let (first, _) = pick(sums.into_iter().enumerate(), points, true, 0.0).expect("non-empty");
    let mut medoids = vec![first];
    let mut d_near: Vec<f64> = points.iter().map(|&p| metric.dist(p, points[first])).collect();
    while medoids.len() < k {
        let gains: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .filter(|h| !medoids.contains(h))
            .map(|h| {
                let g = points
                    .iter()
                    .zip(&d_near)
                    .map(|(&p, &dn)| (dn - metric.dist(p, points[h])).max(0.0))
                    .sum();
                (h, g)
            })
            .collect();
        let scale: f64 = d_near.iter().sum();
        let (next, _) = pick(gains, points, false, scale).expect("k <= n");
        for (dn, &p) in d_near.iter_mut().zip(points) {
            *dn = dn.min(metric.dist(p, points[next]));
        }
        medoids.push(next);
    }
    medoids
}

/// PAM: greedy BUILD, then repeatedly apply the single medoid/non-medoid swap with the
/// largest cost decrease until no swap strictly improves or `max_iter` swaps were made.
///
/// PAM is deterministic; `seed` is accepted so both clusterers share one signature.
pub fn k_medoids(points: &PointSet, k: usize, _seed: u64, max_iter: usize) -> Result<MedoidResult> {
    check_k(points, k)?;
    let pts = points.points();
    let n = pts.len();
    let metric = GridMetric::new(points.bounds());
    let mut medoids = build(&metric, pts, k);
    let mut state = assign(&metric, pts, &medoids);
    let mut cost_trace = vec![state.cost];
    let mut iterations = 0;

    while iterations < max_iter {
        let is_medoid = {
            let mut v = vec![false; n];
            medoids.iter().for_each(|&m| v[m] = true);
            v
        };
        // For candidate h: delta(i, h) = shared(h) + own[i](h), O(n) for all i at once.
        let deltas: Vec<(usize, Vec<f64>)> = (0..n)
            .into_par_iter()
            .filter(|&h| !is_medoid[h])
            .map(|h| {
                let mut shared = 0.0;
                let mut own = vec![0.0; k];
                let ph = pts[h];
                let per_point = pts
                    .iter()
                    .zip(&state.d_near)
                    .zip(&state.d_second)
                    .zip(&state.nearest);
                for (((&p, &dn), &ds), &near) in per_point {
                    let d = metric.dist(p, ph);
                    let stay = (d - dn).min(0.0);
                    shared += stay;
                    own[near] += d.min(ds) - dn - stay;
                }
                (h, own.into_iter().map(|o| shared + o).collect())
            })
            .collect();

        let mut best: Option<(f64, Coord, Coord, usize, usize)> = None;
        let tol = REL_TOL * state.cost;
        let min_delta = deltas
            .iter()
            .flat_map(|(_, ds)| ds.iter().copied())
            .fold(f64::INFINITY, f64::min);
        for (h, ds) in &deltas {
            for (i, &delta) in ds.iter().enumerate() {
                if delta > min_delta + tol {
                    continue;
                }
                let key = (delta, pts[*h], pts[medoids[i]], i, *h);
                let replace = match &best {
                    None => true,
                    Some(b) => (key.1, key.2) < (b.1, b.2),
                };
                if replace {
                    best = Some(key);
                }
            }
        }
        match best {
            Some((delta, _, _, i, h)) if delta < -tol => {
                medoids[i] = h;
                state = assign(&metric, pts, &medoids);
                cost_trace.push(state.cost);
                iterations += 1;
            }
            _ => break,
        }
    }

    Ok(MedoidResult {
        medoids: medoids.iter().map(|&m| pts[m]).collect(),
        medoid_indices: medoids,
        total_cost: state.cost,
        iterations,
        cost_trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<(f64, f64)>,
    /// Centroids rounded to the nearest in-bounds pixel.
    pub snapped: Vec<Coord>,
    pub iterations: usize,
}

/// Lloyd iteration from a seeded k-means++ start. An empty cluster is re-seeded from the point
/// farthest from its assigned centroid.
pub fn k_means(points: &PointSet, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    check_k(points, k)?;
    let pts: Vec<(f64, f64)> = points
        .points()
        .iter()
        .map(|&(r, c)| (r as f64, c as f64))
        .collect();
    let n = pts.len();
    let d2 = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![pts[rand::Rng::random_range(&mut rng, 0..n)]];
    while centroids.len() < k {
        let weights: Vec<f64> = pts
            .iter()
            .map(|&p| centroids.iter().map(|&c| d2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let idx = WeightedIndex::new(&weights)
            .map_err(|e| Error::invalid(format!("k-means++ seeding: {e}")))?
            .sample(&mut rng);
        centroids.push(pts[idx]);
    }

    let nearest = |p: (f64, f64), centroids: &[(f64, f64)]| {
        let mut best = (0, f64::INFINITY);
        for (i, &c) in centroids.iter().enumerate() {
            let d = d2(p, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    };

    let mut labels: Vec<usize> = pts.iter().map(|&p| nearest(p, &centroids).0).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &l) in pts.iter().zip(&labels) {
            sums[l].0 += p.0;
            sums[l].1 += p.1;
            sums[l].2 += 1;
        }
        let mut reseeded = Vec::new();
        for (i, s) in sums.iter().enumerate() {
            if s.2 > 0 {
                centroids[i] = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            } else {
                let far = (0..n)
                    .filter(|j| !reseeded.contains(j))
                    .max_by(|&a, &b| {
                        let da = d2(pts[a], centroids[labels[a]]);
                        let db = d2(pts[b], centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("k <= n");
                reseeded.push(far);
                centroids[i] = pts[far];
            }
        }
        let next: Vec<usize> = pts.iter().map(|&p| nearest(p, &centroids).0).collect();
        let converged = next == labels && reseeded.is_empty();
        labels = next;
        if converged {
            break;
        }
    }

    let (rows, cols) = points.bounds();
    let snapped = centroids
        .iter()
        .map(|&(r, c)| {
            (
                (r.round().max(0.0) as usize).min(rows - 1),
                (c.round().max(0.0) as usize).min(cols - 1),
            )
        })
        .collect();
    Ok(KMeansResult {
        centroids,
        snapped,
        iterations,
    })
}

/// Uniform random subset of at most `cap` points, kept in input order.
pub fn subsample(points: &PointSet, cap: usize, seed: u64) -> PointSet {
    let cap = cap.max(1);
    if points.len() <= cap {
        return points.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), cap).into_vec();
    idx.sort_unstable();
    PointSet {
        points: idx.into_iter().map(|i| points.points[i]).collect(),
        bounds: points.bounds,
    }
}

/// Which algorithm turns a region into representative pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clusterer {
    #[default]
    Kmedoids,
    Kmeans,
}

impl Clusterer {
    pub const MAX_ITER: usize = 100;

    /// `k` representative pixels: medoids, or snapped k-means centroids.
    pub fn representatives(self, points: &PointSet, k: usize, seed: u64) -> Result<Vec<Coord>> {
        match self {
            Clusterer::Kmedoids => Ok(k_medoids(points, k, seed, Self::MAX_ITER)?.medoids),
            Clusterer::Kmeans => Ok(k_means(points, k, seed, Self::MAX_ITER)?.snapped),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Clusterer::Kmedoids => "kmedoids",
            Clusterer::Kmeans => "kmeans",
        }
    }
}

impl std::fmt::Display for Clusterer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Clusterer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmedoids" => Ok(Clusterer::Kmedoids),
            "kmeans" => Ok(Clusterer::Kmeans),
            other => Err(Error::invalid(format!("unknown clusterer {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[Coord]) -> PointSet {
        PointSet::new(points.to_vec(), (64, 64)).unwrap()
    }

    #[test]
    fn medoid_of_three_on_a_line() {
        let r = k_medoids(&set(&[(0, 0), (1, 0), (5, 0)]), 1, 0, 100).unwrap();
        assert_eq!(r.medoids, vec![(1, 0)]);
        assert_eq!(r.medoid_indices, vec![1]);
        assert_eq!(r.total_cost, 5.0);
    }

    #[test]
    fn every_point_a_medoid_when_k_is_n() {
        let pts = [(3, 4), (10, 2), (7, 7), (0, 9)];
        let r = k_medoids(&set(&pts), 4, 0, 100).unwrap();
        let mut idx = r.medoid_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn medoid_is_a_member_not_the_mean() {
        let s = set(&[(0, 0), (2, 0), (0, 2), (10, 10)]);
        let r = k_medoids(&s, 1, 0, 100).unwrap();
        assert!(s.contains(r.medoids[0]));
        assert_ne!(r.medoids[0], (3, 3));
    }

    #[test]
    fn errors_on_bad_k_and_empty() {
        let s = set(&[(0, 0), (1, 1)]);
        assert!(k_medoids(&s, 3, 0, 10).is_err());
        assert!(k_medoids(&s, 0, 0, 10).is_err());
        assert!(k_medoids(&PointSet::empty((4, 4)), 1, 0, 10).is_err());
        assert!(k_means(&s, 3, 0, 10).is_err());
    }

    #[test]
    fn kmeans_mean_of_line() {
        let r = k_means(&set(&[(0, 0), (1, 0), (5, 0)]), 1, 7, 100).unwrap();
        assert_eq!(r.centroids, vec![(2.0, 0.0)]);
        assert_eq!(r.snapped, vec![(2, 0)]);
    }

    #[test]
    fn kmeans_k_equals_n_reproduces_points() {
        let pts = [(3, 4), (10, 2), (7, 7), (0, 9), (5, 5)];
        let r = k_means(&set(&pts), 5, 3, 100).unwrap();
        let mut got = r.snapped.clone();
        got.sort_unstable();
        let mut want = pts.to_vec();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn outlier_drags_mean_but_not_medoid() {
        let s = set(&[(0, 0), (1, 0), (0, 1), (10, 10)]);
        let medoid = k_medoids(&s, 1, 0, 100).unwrap().medoids[0];
        assert!([(0, 0), (1, 0), (0, 1)].contains(&medoid));
        let mean = k_means(&s, 1, 0, 100).unwrap().centroids[0];
        let mean_dist = (mean.0 * mean.0 + mean.1 * mean.1).sqrt();
        let medoid_dist = ((medoid.0 * medoid.0 + medoid.1 * medoid.1) as f64).sqrt();
        assert!(mean_dist > medoid_dist);
    }

    #[test]
    fn subsample_identity_and_cardinality() {
        let small = PointSet::from_mask(&BinaryMask::from_fn(10, 10, |_| true));
        assert_eq!(subsample(&small, 1000, 1), small);

        let big = PointSet::from_mask(&BinaryMask::full(128, 128));
        let a = subsample(&big, 2000, 42);
        assert_eq!(a.len(), 2000);
        let mut uniq = a.points().to_vec();
        uniq.dedup();
        assert_eq!(uniq.len(), 2000);
        assert_eq!(a, subsample(&big, 2000, 42));
        assert_ne!(a, subsample(&big, 2000, 43));
    }

    #[test]
    fn rejects_duplicates_and_out_of_bounds() {
        assert!(PointSet::new(vec![(1, 1), (1, 1)], (4, 4)).is_err());
        assert!(PointSet::new(vec![(4, 0)], (4, 4)).is_err());
    }

    #[test]
    fn clusterer_parses() {
        assert_eq!("kmeans".parse::<Clusterer>().unwrap(), Clusterer::Kmeans);
        assert!("pam".parse::<Clusterer>().is_err());
    }
}
