//! Chamfer distance, exact and auction-approximated EMD, and the composite
//! training objective.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::geometry::{dist2, PointCloud};

/// Weight of the Chamfer term against EMD.
pub const LAMBDA: f64 = 10.0;
/// Per-point Chamfer distances are reported multiplied by this.
pub const CD_REPORT_SCALE: f64 = 1e4;

fn nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Loss("empty point cloud".into()));
    }
    Ok(())
}

/// Nearest neighbour of every point of `a` in `b` and of every point of `b`
/// in `a`, with squared distances. Ties go to the lower index.
pub fn nearest_both_ways(a: &PointCloud, b: &PointCloud) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let mut ab = vec![(0, f64::INFINITY); a.len()];
    let mut ba = vec![(0, f64::INFINITY); b.len()];
    for (i, p) in a.points.iter().enumerate() {
        for (j, q) in b.points.iter().enumerate() {
            let d = dist2(p, q);
            if d < ab[i].1 {
                ab[i] = (j, d);
            }
            if d < ba[j].1 {
                ba[j] = (i, d);
            }
        }
    }
    (ab, ba)
}

/// `mean_i min_j ‖a_i − b_j‖² + mean_j min_i ‖a_i − b_j‖²`.
pub fn chamfer_value(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    nonempty(pred, gt)?;
    let (ab, ba) = nearest_both_ways(pred, gt);
    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    Ok(mean(&ab) + mean(&ba))
}

fn mean_sq_dist<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.reduce_sum(sq, 1)?;
    g.mean_all(s)
}

/// Differentiable Chamfer distance of an `N × 3` prediction against a fixed
/// target; nearest-neighbour assignments are held constant.
pub fn chamfer<T: Real>(g: &mut Graph<T>, pred: Var, gt: &PointCloud) -> Result<Var> {
    let pc = PointCloud::from_tensor(g.value(pred))?;
    nonempty(&pc, gt)?;
    let (ab, ba) = nearest_both_ways(&pc, gt);
    let target = g.constant(gt.to_tensor());
    let to_gt: Vec<usize> = ab.iter().map(|x| x.0).collect();
    let to_pred: Vec<usize> = ba.iter().map(|x| x.0).collect();
    let matched_gt = g.gather(target, &to_gt)?;
    let forward = mean_sq_dist(g, pred, matched_gt)?;
    let matched_pred = g.gather(pred, &to_pred)?;
    let backward = mean_sq_dist(g, matched_pred, target)?;
    g.add(forward, backward)
}

/// A bijection from prediction indices to target indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub assignment: Vec<usize>,
    /// Mean Euclidean distance under `assignment`.
    pub cost: f64,
    /// False when the auction hit its round cap.
    pub converged: bool,
}

fn equal_sizes(a: &PointCloud, b: &PointCloud) -> Result<()> {
    nonempty(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Loss(format!("EMD needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn matching_cost(pred: &PointCloud, gt: &PointCloud, assignment: &[usize]) -> f64 {
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| dist2(&pred.points[i], &gt.points[j]).sqrt()).sum();
    total / assignment.len() as f64
}

/// Optimal assignment by the O(n³) Hungarian method with potentials.
pub fn emd_exact(pred: &PointCloud, gt: &PointCloud) -> Result<Matching> {
    equal_sizes(pred, gt)?;
    let n = pred.len();
    let cost = |i: usize, j: usize| dist2(&pred.points[i], &gt.points[j]).sqrt();
    // 1-based rows/columns; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    let cost = matching_cost(pred, gt, &assignment);
    Ok(Matching { assignment, cost, converged: true })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuctionConfig {
    /// Final bid increment, in distance units.
    pub eps: f64,
    /// Cap on the total number of bids over all scaling phases.
    pub max_bids: usize,
    /// Ratio between successive eps phases.
    pub scaling: f64,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        Self { eps: 1e-3, max_bids: 4_000_000, scaling: 4.0 }
    }
}

/// Forward auction with eps-scaling on `−distance`. Exactly coincident pairs
/// are matched up front, so identical clouds cost exactly 0. If the bid cap
/// is hit, still-unassigned predictions take the nearest free targets and
/// `converged` is false.
pub fn emd_approx(pred: &PointCloud, gt: &PointCloud, cfg: &AuctionConfig) -> Result<Matching> {
    equal_sizes(pred, gt)?;
    if !(cfg.eps > 0.0) || !(cfg.scaling > 1.0) {
        return Err(Error::Loss("auction needs eps > 0 and scaling > 1".into()));
    }
    let n = pred.len();
    let mut assignment = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    let mut by_coords: std::collections::HashMap<[u64; 3], Vec<usize>> = std::collections::HashMap::new();
    for (j, q) in gt.points.iter().enumerate() {
        by_coords.entry(q.map(f64::to_bits)).or_default().push(j);
    }
    for (i, p) in pred.points.iter().enumerate() {
        if let Some(js) = by_coords.get_mut(&p.map(f64::to_bits)) {
            if let Some(j) = js.pop() {
                assignment[i] = j;
                taken[j] = true;
            }
        }
    }
    let persons: Vec<usize> = (0..n).filter(|&i| assignment[i] == usize::MAX).collect();
    let objects: Vec<usize> = (0..n).filter(|&j| !taken[j]).collect();
    let m = persons.len();
    let mut converged = true;
    if m > 0 {
        let mut benefit = Vec::with_capacity(m * m);
        for &i in &persons {
            benefit.extend(objects.iter().map(|&j| -dist2(&pred.points[i], &gt.points[j]).sqrt() as f32));
        }
        let spread = benefit.iter().fold(0.0f32, |a, &b| a.max(-b)) as f64;
        let (local, ok) = auction(&benefit, m, spread, cfg);
        converged = ok;
        for (a, &i) in persons.iter().enumerate() {
            assignment[i] = objects[local[a]];
        }
    }
    let cost = matching_cost(pred, gt, &assignment);
    Ok(Matching { assignment, cost, converged })
}

/// Dense `m × m` benefit maximization; returns person → object.
fn auction(benefit: &[f32], m: usize, spread: f64, cfg: &AuctionConfig) -> (Vec<usize>, bool) {
    const FREE: usize = usize::MAX;
    let mut prices = vec![0.0f32; m];
    let mut owner = vec![FREE; m];
    let mut assigned = vec![FREE; m];
    let mut bids = 0usize;
    let mut eps = (spread / cfg.scaling).max(cfg.eps);
    loop {
        owner.iter_mut().for_each(|o| *o = FREE);
        assigned.iter_mut().for_each(|a| *a = FREE);
        let mut queue: std::collections::VecDeque<usize> = (0..m).collect();
        while let Some(p) = queue.pop_front() {
            if bids >= cfg.max_bids {
                queue.push_front(p);
                finish_greedy(benefit, m, &mut owner, &mut assigned);
                return (assigned, false);
            }
            bids += 1;
            let row = &benefit[p * m..(p + 1) * m];
            let (mut best, mut best_v, mut second_v) = (0, f32::NEG_INFINITY, f32::NEG_INFINITY);
            for (j, (&b, &pr)) in row.iter().zip(&prices).enumerate() {
                let v = b - pr;
                if v > best_v {
                    second_v = best_v;
                    best_v = v;
                    best = j;
                } else if v > second_v {
                    second_v = v;
                }
            }
            let increment = if second_v.is_finite() { best_v - second_v + eps as f32 } else { eps as f32 };
            prices[best] += increment;
            if owner[best] != FREE {
                let evicted = owner[best];
                assigned[evicted] = FREE;
                queue.push_back(evicted);
            }
            owner[best] = p;
            assigned[p] = best;
        }
        if eps <= cfg.eps {
            return (assigned, true);
        }
        eps = (eps / cfg.scaling).max(cfg.eps);
    }
}

fn finish_greedy(benefit: &[f32], m: usize, owner: &mut [usize], assigned: &mut [usize]) {
    for p in 0..m {
        if assigned[p] != usize::MAX {
            continue;
        }
        let row = &benefit[p * m..(p + 1) * m];
        let j = (0..m)
            .filter(|&j| owner[j] == usize::MAX)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .expect("a free object exists for every free person");
        owner[j] = p;
        assigned[p] = j;
    }
}

/// Mean matched distance with the matching held constant.
pub fn emd<T: Real>(g: &mut Graph<T>, pred: Var, gt: &PointCloud, matching: &Matching) -> Result<Var> {
    if matching.assignment.len() != g.shape(pred)[0] {
        return Err(Error::Loss("matching size differs from prediction".into()));
    }
    let target = g.constant(gt.to_tensor());
    let matched = g.gather(target, &matching.assignment)?;
    let d = g.sub(pred, matched)?;
    let sq = g.mul(d, d)?;
    let s = g.reduce_sum(sq, 1)?;
    let dist = g.sqrt(s)?;
    g.mean_all(dist)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Both,
    CdOnly,
    EmdOnly,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Both => "both",
            LossKind::CdOnly => "cd_only",
            LossKind::EmdOnly => "emd_only",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [LossKind::Both, LossKind::CdOnly, LossKind::EmdOnly]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}` (both, cd_only, emd_only)")))
    }
}

/// Loss values of one sample or a batch mean.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossReport {
    pub cd: f64,
    /// `None` when excluded by [`LossKind::CdOnly`].
    pub emd: Option<f64>,
    /// `emd + λ·cd` over the terms in use.
    pub total: f64,
    /// Coarse-level Chamfer distances, seed level first.
    pub per_level_cd: Vec<f64>,
    /// `total` plus the coarse-level terms in use; what is minimized.
    pub objective: f64,
    pub emd_converged: bool,
}

impl LossReport {
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let levels = reports.first().map_or(0, |r| r.per_level_cd.len());
        LossReport {
            cd: reports.iter().map(|r| r.cd).sum::<f64>() / n,
            emd: reports.iter().map(|r| r.emd).sum::<Option<f64>>().map(|s| s / n),
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            per_level_cd: (0..levels).map(|l| reports.iter().map(|r| r.per_level_cd[l]).sum::<f64>() / n).collect(),
            objective: reports.iter().map(|r| r.objective).sum::<f64>() / n,
            emd_converged: reports.iter().all(|r| r.emd_converged),
        }
    }

    /// `step cd emd total lr`.
    pub fn log_line(&self, step: usize, lr: f64) -> String {
        let emd = self.emd.map_or_else(|| "excluded".to_string(), |e| format!("{e:.6e}"));
        format!("{step} {:.6e} {emd} {:.6e} {lr:e}", self.cd, self.total)
    }
}

/// Builds the objective for one sample: `emd + λ·cd + Σ cd(coarse_l, gt_l)`.
/// [`LossKind::CdOnly`] drops the EMD term; [`LossKind::EmdOnly`] drops every
/// Chamfer term, though the final Chamfer distance is still reported.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    final_pred: Var,
    coarse: &[Var],
    gt: &PointCloud,
    coarse_gt: &[PointCloud],
    kind: LossKind,
    auction: &AuctionConfig,
) -> Result<(Var, LossReport)> {
    if coarse.len() != coarse_gt.len() {
        return Err(Error::Loss(format!("{} coarse predictions but {} coarse targets", coarse.len(), coarse_gt.len())));
    }
    let cd = chamfer(g, final_pred, gt)?;
    let cd_v = g.value(cd).item().as_f64();
    let mut report = LossReport { cd: cd_v, emd_converged: true, ..LossReport::default() };

    let mut terms = Vec::new();
    if kind != LossKind::CdOnly {
        let pc = PointCloud::from_tensor(g.value(final_pred))?;
        let matching = emd_approx(&pc, gt, auction)?;
        report.emd_converged = matching.converged;
        let e = emd(g, final_pred, gt, &matching)?;
        report.emd = Some(g.value(e).item().as_f64());
        terms.push(e);
    }
    if kind != LossKind::EmdOnly {
        terms.push(g.scale(cd, LAMBDA)?);
    }
    report.total = report.emd.unwrap_or(0.0) + if kind == LossKind::EmdOnly { 0.0 } else { LAMBDA * cd_v };

    let mut coarse_sum = 0.0;
    for (&c, target) in coarse.iter().zip(coarse_gt) {
        let l = chamfer(g, c, target)?;
        let v = g.value(l).item().as_f64();
        report.per_level_cd.push(v);
        if kind != LossKind::EmdOnly {
            coarse_sum += v;
            terms.push(l);
        }
    }
    report.objective = report.total + coarse_sum;

    let mut objective = terms[0];
    for &t in &terms[1..] {
        objective = g.add(objective, t)?;
    }
    Ok((objective, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_params;
    use crate::autodiff::{Ctx, ParamStore};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()).unwrap()
    }

    fn naive_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
        let dir = |x: &PointCloud, y: &PointCloud| {
            let mut s = 0.0;
            for p in &x.points {
                let mut best = f64::INFINITY;
                for q in &y.points {
                    let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
                    if d < best {
                        best = d;
                    }
                }
                s += best;
            }
            s / x.len() as f64
        };
        dir(a, b) + dir(b, a)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_emd(a: &PointCloud, b: &PointCloud) -> f64 {
        permutations(a.len()).iter().map(|p| matching_cost(a, b, p)).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn chamfer_single_pair_and_self() {
        let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer_value(&a, &b).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(20, &mut rng);
        assert_eq!(chamfer_value(&x, &x).unwrap(), 0.0);
        assert!(chamfer_value(&x, &PointCloud::default()).is_err());
    }

    #[test]
    fn chamfer_matches_double_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..=16 {
            let (a, b) = (cloud(n, &mut rng), cloud(n, &mut rng));
            assert_eq!(chamfer_value(&a, &b).unwrap(), naive_chamfer(&a, &b));
            let mut g = Graph::<f64>::new();
            let p = g.constant(a.to_tensor());
            let c = chamfer(&mut g, p, &b).unwrap();
            assert!((g.value(c).item() - naive_chamfer(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn emd_two_point_swap() {
        let a = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let b = PointCloud::new(vec![[1.1, 0.0, 0.0], [0.0, 0.2, 0.0]]).unwrap();
        let m = emd_exact(&a, &b).unwrap();
        let expected = ((0.2f64) + (0.1f64)) / 2.0;
        assert_eq!(m.assignment, vec![1, 0]);
        assert!((m.cost - expected).abs() < 1e-15);
    }

    #[test]
    fn emd_identical_clouds_any_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(30, &mut rng);
        let mut idx: Vec<usize> = (0..30).collect();
        idx.shuffle(&mut rng);
        let b = a.select(&idx);
        assert_eq!(emd_exact(&a, &b).unwrap().cost, 0.0);
        let m = emd_approx(&a, &b, &AuctionConfig::default()).unwrap();
        assert_eq!(m.cost, 0.0);
        for (i, &j) in m.assignment.iter().enumerate() {
            assert_eq!(a.points[i], b.points[j]);
        }
        assert!(emd_exact(&a, &cloud(29, &mut rng)).is_err());
    }

    #[test]
    fn emd_exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=6 {
            for _ in 0..5 {
                let (a, b) = (cloud(n, &mut rng), cloud(n, &mut rng));
                let exact = emd_exact(&a, &b).unwrap().cost;
                assert!((exact - brute_emd(&a, &b)).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn auction_bid_cap_still_returns_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (cloud(40, &mut rng), cloud(40, &mut rng));
        let m = emd_approx(&a, &b, &AuctionConfig { max_bids: 10, ..AuctionConfig::default() }).unwrap();
        assert!(!m.converged);
        let mut seen = m.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn auction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (cloud(64, &mut rng), cloud(64, &mut rng));
        let cfg = AuctionConfig::default();
        assert_eq!(emd_approx(&a, &b, &cfg).unwrap(), emd_approx(&a, &b, &cfg).unwrap());
    }

    #[test]
    fn emd_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=8 {
            let (a, b, c) = (cloud(n, &mut rng), cloud(n, &mut rng), cloud(n, &mut rng));
            let ab = emd_exact(&a, &b).unwrap().cost;
            let bc = emd_exact(&b, &c).unwrap().cost;
            let ac = emd_exact(&a, &c).unwrap().cost;
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = cloud(32, &mut rng);
        let coarse_gt = gt.select(&[0, 3, 5, 9]);
        let mut g = Graph::<f64>::new();
        let p = g.constant(gt.to_tensor());
        let c = g.constant(coarse_gt.to_tensor());
        let (obj, report) = total_loss(&mut g, p, &[c], &gt, &[coarse_gt], LossKind::Both, &AuctionConfig::default()).unwrap();
        assert_eq!(g.value(obj).item(), 0.0);
        assert_eq!(report.total, 0.0);
        assert_eq!(report.emd, Some(0.0));
    }

    #[test]
    fn loss_kind_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = cloud(16, &mut rng);
        let pred = cloud(16, &mut rng);
        let cgt = gt.select(&[0, 1]);
        let cp = pred.select(&[2, 3]);
        let run = |kind| {
            let mut g = Graph::<f64>::new();
            let p = g.constant(pred.to_tensor());
            let c = g.constant(cp.to_tensor());
            let (obj, r) = total_loss(&mut g, p, &[c], &gt, &[cgt.clone()], kind, &AuctionConfig::default()).unwrap();
            (g.value(obj).item(), r)
        };
        let (cd_obj, cd_only) = run(LossKind::CdOnly);
        assert_eq!(cd_only.emd, None);
        assert!((cd_only.total - LAMBDA * cd_only.cd).abs() < 1e-15);
        assert!((cd_obj - (cd_only.total + cd_only.per_level_cd[0])).abs() < 1e-12);
        assert!(cd_only.log_line(3, 1e-4).split(' ').nth(2) == Some("excluded"));

        let (emd_obj, emd_only) = run(LossKind::EmdOnly);
        assert_eq!(emd_only.total, emd_only.emd.unwrap());
        assert!((emd_obj - emd_only.total).abs() < 1e-15);
        assert!(emd_only.cd > 0.0);

        let (both_obj, both) = run(LossKind::Both);
        assert!((both.total - (both.emd.unwrap() + LAMBDA * both.cd)).abs() < 1e-12);
        assert!((both_obj - both.objective).abs() < 1e-12);
        assert_eq!(both.log_line(7, 1e-4).split(' ').count(), 5);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gt = cloud(12, &mut rng);
        let mut store = ParamStore::new();
        store.insert("p", cloud(12, &mut rng).to_tensor::<f64>());
        let report = check_params(&store, 1e-6, 36, 11, |ctx: &mut Ctx<f64>| {
            let p = ctx.param("p")?;
            let (obj, _) = total_loss(&mut ctx.graph, p, &[], &gt, &[], LossKind::Both, &AuctionConfig { eps: 1e-9, ..AuctionConfig::default() })?;
            Ok(obj)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn report_mean_averages_fields() {
        let r = |cd: f64, emd: Option<f64>| LossReport { cd, emd, total: cd, per_level_cd: vec![cd], objective: cd, emd_converged: true };
        let m = LossReport::mean(&[r(1.0, Some(2.0)), r(3.0, Some(4.0))]);
        assert_eq!((m.cd, m.emd, m.per_level_cd.clone()), (2.0, Some(3.0), vec![2.0]));
        assert_eq!(LossReport::mean(&[r(1.0, None), r(1.0, Some(1.0))]).emd, None);
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_permutation_invariant(n in 1usize..12, m in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (cloud(n, &mut rng), cloud(m, &mut rng));
            let ab = chamfer_value(&a, &b).unwrap();
            prop_assert!((ab - chamfer_value(&b, &a).unwrap()).abs() < 1e-12);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            prop_assert!((ab - chamfer_value(&a.select(&idx), &b).unwrap()).abs() < 1e-12);
            prop_assert!(ab > 0.0);
        }

        #[test]
        fn auction_is_within_ten_percent_of_exact(n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (cloud(n, &mut rng), cloud(n, &mut rng));
            let exact = emd_exact(&a, &b).unwrap().cost;
            let approx = emd_approx(&a, &b, &AuctionConfig::default()).unwrap();
            prop_assert!(approx.converged);
            prop_assert!(approx.cost >= exact - 1e-12);
            prop_assert!(approx.cost <= 1.1 * exact);
        }
    }
}
