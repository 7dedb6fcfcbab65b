//! Point clouds and the non-differentiable structural kernels of the encoder:
//! farthest point sampling, ball query and relative grouping.

use std::cmp::Ordering;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

/// Ordered list of 3D points.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Centroid and scale that map this cloud into the unit ball.
    pub fn normalization(&self) -> (Point, f64) {
        let c = self.centroid();
        let r = self.points.iter().map(|p| dist2(p, &c)).fold(0.0, f64::max).sqrt();
        (c, if r > 0.0 { r } else { 1.0 })
    }

    pub fn apply_normalization(&self, center: Point, scale: f64) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale, (p[2] - center[2]) / scale])
            .collect();
        Self { points }
    }

    /// Centroid to the origin, farthest point at distance 1.
    pub fn normalized(&self) -> Self {
        let (c, s) = self.normalization();
        self.apply_normalization(c, s)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self { points: indices.iter().map(|&i| self.points[i]).collect() }
    }

    /// `N × 3` tensor of the coordinates.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.points.iter().flatten().map(|&v| T::of(v)).collect();
        Tensor::new(vec![self.points.len(), 3], data).expect("non-empty cloud")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::Shape(format!("expected N×3 coordinates, got {:?}", t.shape())));
        }
        let points = t
            .data()
            .chunks_exact(3)
            .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
            .collect();
        Self::new(points)
    }
}

/// Greedy max-min sampling of `m` indices.
///
/// The first pick is the point farthest from the centroid, so the result does
/// not depend on input order. Exact distance ties go to the lexicographically
/// smallest coordinate, then to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n == 0 || m == 0 || m > n {
        return Err(Error::Geometry(format!("cannot sample {m} of {n} points")));
    }
    let pts = &cloud.points;
    let better = |i: usize, di: f64, j: usize, dj: f64| -> bool {
        match di.total_cmp(&dj) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => lex_cmp(&pts[i], &pts[j]).then(i.cmp(&j)) == Ordering::Less,
        }
    };
    let c = cloud.centroid();
    let mut best = 0;
    let mut best_d = dist2(&pts[0], &c);
    for (i, p) in pts.iter().enumerate().skip(1) {
        let d = dist2(p, &c);
        if better(i, d, best, best_d) {
            best = i;
            best_d = d;
        }
    }

    let mut picked = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = best;
    loop {
        picked.push(cur);
        taken[cur] = true;
        if picked.len() == m {
            break;
        }
        let cp = pts[cur];
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&pts[i], &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if next == usize::MAX || better(i, min_d[i], next, next_d) {
                next = i;
                next_d = min_d[i];
            }
        }
        cur = next;
    }
    Ok(picked)
}

/// Per-center member lists of fixed size `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodIndex {
    pub center_indices: Vec<usize>,
    /// Row-major `M × k`.
    pub member_indices: Vec<usize>,
    pub k: usize,
    pub radius: f64,
}

impl NeighborhoodIndex {
    pub fn centers(&self) -> usize {
        self.center_indices.len()
    }

    pub fn members(&self, c: usize) -> &[usize] {
        &self.member_indices[c * self.k..(c + 1) * self.k]
    }
}

/// Up to `k` nearest members within `radius` of each center, nearest first
/// (ties by index). Short balls are padded with copies of their nearest
/// member placed next to it; an empty ball falls back to the nearest point
/// overall.
pub fn ball_query(cloud: &PointCloud, center_indices: &[usize], radius: f64, k: usize) -> Result<NeighborhoodIndex> {
    if cloud.is_empty() {
        return Err(Error::Geometry("ball query on an empty cloud".into()));
    }
    if radius.is_nan() || radius <= 0.0 || k == 0 {
        return Err(Error::Geometry(format!("invalid ball query radius {radius} / k {k}")));
    }
    if let Some(&bad) = center_indices.iter().find(|&&c| c >= cloud.len()) {
        return Err(Error::Geometry(format!("center index {bad} out of range")));
    }
    let r2 = radius * radius;
    let mut members = Vec::with_capacity(center_indices.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(cloud.len());
    for &ci in center_indices {
        let c = cloud.points[ci];
        scratch.clear();
        let mut nearest = (f64::INFINITY, 0usize);
        for (i, p) in cloud.points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest.0 {
                nearest = (d, i);
            }
            if d <= r2 {
                scratch.push((d, i));
            }
        }
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if scratch.len() > k {
            scratch.select_nth_unstable_by(k - 1, by_dist);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(by_dist);
        if scratch.is_empty() {
            scratch.push(nearest);
        }
        // Copies of the nearest member sit right after it, keeping the row
        // sorted by distance.
        let nearest_member = scratch[0].1;
        members.extend(std::iter::repeat(nearest_member).take(k - scratch.len() + 1));
        members.extend(scratch[1..].iter().map(|&(_, i)| i));
    }
    Ok(NeighborhoodIndex { center_indices: center_indices.to_vec(), member_indices: members, k, radius })
}

/// Relative member coordinates, `M·k × 3`, member minus center.
pub fn relative_coords<T: Real>(cloud: &PointCloud, neigh: &NeighborhoodIndex) -> Result<Tensor<T>> {
    let n = cloud.len();
    let mut data = Vec::with_capacity(neigh.member_indices.len() * 3);
    for (c, &ci) in neigh.center_indices.iter().enumerate() {
        if ci >= n {
            return Err(Error::Geometry(format!("center index {ci} out of range")));
        }
        let cp = cloud.points[ci];
        for &mi in neigh.members(c) {
            let p = cloud.points.get(mi).ok_or_else(|| Error::Geometry(format!("member index {mi} out of range")))?;
            data.extend([p[0] - cp[0], p[1] - cp[1], p[2] - cp[2]].map(T::of));
        }
    }
    Tensor::new(vec![neigh.member_indices.len(), 3], data)
}

/// Grouped tensor `M × k × (3 + D)`: relative coordinates of each member,
/// followed by its row of `feats` when given.
pub fn group_relative<T: Real>(
    cloud: &PointCloud,
    neigh: &NeighborhoodIndex,
    feats: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let rel = relative_coords::<T>(cloud, neigh)?;
    let d = match feats {
        Some(f) => {
            if f.rows() != cloud.len() {
                return Err(Error::Geometry(format!("{} feature rows for {} points", f.rows(), cloud.len())));
            }
            f.row_len()
        }
        None => 0,
    };
    let mut data = Vec::with_capacity(rel.rows() * (3 + d));
    for (r, &mi) in neigh.member_indices.iter().enumerate() {
        data.extend_from_slice(rel.row(r));
        if let Some(f) = feats {
            data.extend_from_slice(f.row(mi));
        }
    }
    Tensor::new(vec![neigh.centers(), neigh.k, 3 + d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[Point]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud(&(0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect::<Vec<_>>())
    }

    fn min_pairwise(c: &PointCloud, idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min(dist2(&c.points[i], &c.points[j]));
            }
        }
        best
    }

    #[test]
    fn fps_square_picks_a_diagonal() {
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [1., 1., 0.]]);
        let picked = farthest_point_sample(&c, 2).unwrap();
        // Brute force: the best 2-subset maximizes the pair distance.
        let mut best = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                best = f64::max(best, dist2(&c.points[i], &c.points[j]));
            }
        }
        assert_eq!(dist2(&c.points[picked[0]], &c.points[picked[1]]), best);
        // All corners tie on the centroid distance; lexicographic rule picks (0,0).
        assert_eq!(picked, vec![0, 3]);
    }

    #[test]
    fn fps_full_is_permutation_and_single_is_farthest() {
        let c = random_cloud(1, 40);
        let mut all = farthest_point_sample(&c, 40).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());

        let first = farthest_point_sample(&c, 1).unwrap()[0];
        let cen = c.centroid();
        let far = (0..40).max_by(|&a, &b| dist2(&c.points[a], &cen).total_cmp(&dist2(&c.points[b], &cen))).unwrap();
        assert_eq!(first, far);
    }

    #[test]
    fn fps_rejects_oversampling() {
        assert!(farthest_point_sample(&random_cloud(2, 5), 6).is_err());
    }

    #[test]
    fn ball_query_isolated_point_is_padded() {
        let c = cloud(&[[0., 0., 0.], [5., 0., 0.], [0., 5., 0.]]);
        let nb = ball_query(&c, &[0], 1.0, 4).unwrap();
        assert_eq!(nb.members(0), &[0, 0, 0, 0]);
    }

    #[test]
    fn ball_query_infinite_radius_sorts_everything() {
        let c = random_cloud(3, 30);
        let nb = ball_query(&c, &[7], f64::INFINITY, 30).unwrap();
        let mut oracle: Vec<usize> = (0..30).collect();
        oracle.sort_by(|&a, &b| dist2(&c.points[a], &c.points[7]).total_cmp(&dist2(&c.points[b], &c.points[7])));
        assert_eq!(nb.members(0), oracle.as_slice());
    }

    #[test]
    fn ball_query_coincident_points_come_first() {
        let c = cloud(&[[0.1, 0., 0.], [0., 0., 0.], [0.05, 0., 0.], [0., 0., 0.]]);
        let nb = ball_query(&c, &[1], 1.0, 4).unwrap();
        assert_eq!(&nb.members(0)[..2], &[1, 3]);
        assert_eq!(&nb.members(0)[2..], &[2, 0]);
        assert!(ball_query(&PointCloud::default(), &[], 1.0, 1).is_err());
    }

    #[test]
    fn group_relative_by_hand() {
        let c = cloud(&[[0., 0., 0.], [1., 2., 3.], [-1., 0.5, 0.], [4., 4., 4.], [0.2, 0.1, -0.3]]);
        let feats = Tensor::<f64>::from_rows(&[[10.], [11.], [12.], [13.], [14.]]).unwrap();
        let nb = NeighborhoodIndex { center_indices: vec![2], member_indices: vec![2, 4, 1], k: 3, radius: 10.0 };
        let g = group_relative(&c, &nb, Some(&feats)).unwrap();
        assert_eq!(g.shape(), &[1, 3, 4]);
        let expected = [0., 0., 0., 12., 1.2, -0.4, -0.3, 14., 2., 1.5, 3., 11.];
        for (a, b) in g.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = NeighborhoodIndex { center_indices: vec![0], member_indices: vec![9], k: 1, radius: 1.0 };
        assert!(group_relative::<f64>(&c, &bad, None).is_err());
    }

    #[test]
    fn group_relative_is_translation_invariant() {
        let c = random_cloud(4, 20);
        let centers = farthest_point_sample(&c, 5).unwrap();
        let nb = ball_query(&c, &centers, 0.8, 6).unwrap();
        let shifted = cloud(&c.points.iter().map(|p| [p[0] + 3.0, p[1] - 7.0, p[2] + 0.5]).collect::<Vec<_>>());
        let a = group_relative::<f64>(&c, &nb, None).unwrap();
        let b = group_relative::<f64>(&shifted, &nb, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = random_cloud(5, 50).apply_normalization([0.3, 0.0, -2.0], 0.1);
        let n1 = c.normalized();
        let n2 = n1.normalized();
        let cen = n1.centroid();
        assert!(cen.iter().all(|v| v.abs() < 1e-12));
        let r = n1.points.iter().map(|p| dist2(p, &[0.0; 3])).fold(0.0, f64::max).sqrt();
        assert!((r - 1.0).abs() < 1e-12);
        for (a, b) in n1.points.iter().zip(&n2.points) {
            assert!(dist2(a, b) < 1e-24);
        }
    }

    proptest! {
        #[test]
        fn fps_greedy_max_min(seed in any::<u64>(), n in 3usize..48, m in 2usize..12) {
            let m = m.min(n);
            let c = random_cloud(seed, n);
            let picked = farthest_point_sample(&c, m).unwrap();
            // Each greedy pick maximizes the distance to the already-picked set.
            for t in 1..m {
                let chosen = &picked[..t];
                let d_of = |i: usize| chosen.iter().map(|&j| dist2(&c.points[i], &c.points[j])).fold(f64::INFINITY, f64::min);
                let best = (0..n).filter(|i| !chosen.contains(i)).map(d_of).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(d_of(picked[t]), best);
            }
            // Min pairwise distance never increases as the set grows.
            for t in 3..=m {
                prop_assert!(min_pairwise(&c, &picked[..t]) <= min_pairwise(&c, &picked[..t - 1]));
            }
        }

        #[test]
        fn fps_is_permutation_invariant(seed in any::<u64>(), n in 2usize..64, m in 1usize..16) {
            let m = m.min(n);
            let c = random_cloud(seed, n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
            let shuffled = c.select(&perm);
            let a: Vec<Point> = farthest_point_sample(&c, m).unwrap().iter().map(|&i| c.points[i]).collect();
            let b: Vec<Point> = farthest_point_sample(&shuffled, m).unwrap().iter().map(|&i| shuffled.points[i]).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ball_members_sorted_and_within_radius(seed in any::<u64>(), radius in 0.05f64..1.5, k in 1usize..10) {
            let c = random_cloud(seed, 40);
            let centers = farthest_point_sample(&c, 6).unwrap();
            let nb = ball_query(&c, &centers, radius, k).unwrap();
            for (ci, &center) in centers.iter().enumerate() {
                let ds: Vec<f64> = nb.members(ci).iter().map(|&m| dist2(&c.points[m], &c.points[center])).collect();
                prop_assert!(ds.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(ds.iter().all(|&d| d <= radius * radius));
                let in_ball = c.points.iter().filter(|p| dist2(p, &c.points[center]) <= radius * radius).count();
                let pad = k.saturating_sub(in_ball);
                // Padding repeats the nearest member.
                prop_assert!(nb.members(ci)[..=pad].iter().all(|&m| m == nb.members(ci)[0]));
            }
        }
    }
}
