//! Point set distances and generation-quality metrics.
//!
//! Chamfer distance here is the squared-L2, mean-aggregated, symmetric sum:
//! `mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2`. Earth mover's distance
//! is the mean Euclidean cost of the optimal one-to-one matching.

mod assignment;
mod kdtree;

use std::fmt;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::{sample_surface, DistanceAccelerator, PointCloud, TriangleMesh, Vec3};

use kdtree::{dist2, KdTree};

/// Largest matching solved exactly; larger ones use the auction algorithm.
pub const EMD_EXACT_LIMIT: usize = 512;
/// Auction tolerance relative to a lower bound on the mean matching cost.
const AUCTION_REL_EPS: f64 = 2e-3;
pub const MMD_CD_SCALE: f64 = 1e3;
pub const MMD_EMD_SCALE: f64 = 1e2;

fn mean_nearest_sq(from: &[Vec3], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest_dist2(p)).sum::<f64>() / from.len() as f64
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.count() == 0 || b.count() == 0 {
        return Err(invalid("chamfer distance of an empty cloud"));
    }
    let ta = KdTree::new(a.points());
    let tb = KdTree::new(b.points());
    Ok(mean_nearest_sq(a.points(), &tb) + mean_nearest_sq(b.points(), &ta))
}

/// Which solver [`emd`] used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmdMode {
    Exact,
    Auction,
}

pub fn emd_mode(n: usize) -> EmdMode {
    if n <= EMD_EXACT_LIMIT {
        EmdMode::Exact
    } else {
        EmdMode::Auction
    }
}

/// Optimal matching for two equal-size clouds: `assign[i]` is the point of
/// `b` matched to `a[i]`.
pub fn emd_matching(a: &PointCloud, b: &PointCloud, mode: EmdMode) -> Result<Vec<usize>> {
    let n = a.count();
    if n != b.count() {
        return Err(Error::CountMismatch(n, b.count()));
    }
    if n == 0 {
        return Err(invalid("earth mover's distance of an empty cloud"));
    }
    let cost: Vec<f64> = a
        .points()
        .par_iter()
        .flat_map_iter(|p| b.points().iter().map(move |q| dist2(p, q).sqrt()))
        .collect();
    Ok(match mode {
        EmdMode::Exact => assignment::hungarian(&cost, n),
        EmdMode::Auction => {
            // mean nearest distance bounds the mean matching cost from below
            let lower = (0..n)
                .map(|i| {
                    cost[i * n..(i + 1) * n]
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / n as f64;
            assignment::auction(&cost, n, AUCTION_REL_EPS * lower)
        }
    })
}

/// Mean matching cost, exact up to [`EMD_EXACT_LIMIT`] points.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    emd_with(a, b, emd_mode(a.count()))
}

pub fn emd_with(a: &PointCloud, b: &PointCloud, mode: EmdMode) -> Result<f64> {
    let m = emd_matching(a, b, mode)?;
    let (pa, pb) = (a.points(), b.points());
    Ok(m.iter()
        .enumerate()
        .map(|(i, &j)| dist2(&pa[i], &pb[j]).sqrt())
        .sum::<f64>()
        / m.len() as f64)
}

/// Two-sided point-to-surface Chamfer: `n` area-uniform samples are drawn
/// on each mesh and measured against the other mesh exactly.
pub fn mesh_chamfer(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let (sq, _) = mesh_distances(a, b, n, seed)?;
    Ok(sq)
}

/// Mean (unsquared) two-sided point-to-surface distance, same sampling as
/// [`mesh_chamfer`].
pub fn mesh_mean_distance(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let (_, d) = mesh_distances(a, b, n, seed)?;
    Ok(d)
}

fn mesh_distances(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<(f64, f64)> {
    let one_side = |from: &TriangleMesh, to: &TriangleMesh, seed: u64| -> Result<(f64, f64)> {
        let pts = sample_surface(from, n, seed)?;
        let acc = DistanceAccelerator::build(to)?;
        let d2: Vec<f64> = pts
            .points()
            .par_iter()
            .map(|p| acc.distance_sq(p))
            .collect();
        let sq = d2.iter().sum::<f64>() / n as f64;
        let lin = d2.iter().map(|d| d.sqrt()).sum::<f64>() / n as f64;
        Ok((sq, lin))
    };
    let (s1, l1) = one_side(a, b, seed)?;
    let (s2, l2) = one_side(b, a, seed.wrapping_add(1))?;
    Ok((s1 + s2, l1 + l2))
}

/// MMD / COV / 1-NNA under both point set distances.
#[derive(Debug, Clone, PartialEq)]
pub struct GenEvalReport {
    /// Scaled by [`MMD_CD_SCALE`].
    pub mmd_cd: f64,
    /// Scaled by [`MMD_EMD_SCALE`].
    pub mmd_emd: f64,
    pub cov_cd: f64,
    pub cov_emd: f64,
    pub nna_cd: f64,
    pub nna_emd: f64,
    pub generated: usize,
    pub reference: usize,
    pub points: usize,
    pub seed: u64,
}

impl GenEvalReport {
    pub const FIELDS: [&'static str; 10] = [
        "mmd_cd",
        "mmd_emd",
        "cov_cd",
        "cov_emd",
        "nna_cd",
        "nna_emd",
        "generated",
        "reference",
        "points",
        "seed",
    ];

    /// One line, fields in [`GenEvalReport::FIELDS`] order, space separated as `key=value`.
    pub fn record(&self) -> String {
        format!(
            "mmd_cd={:.6} mmd_emd={:.6} cov_cd={:.6} cov_emd={:.6} nna_cd={:.6} nna_emd={:.6} generated={} reference={} points={} seed={}",
            self.mmd_cd,
            self.mmd_emd,
            self.cov_cd,
            self.cov_emd,
            self.nna_cd,
            self.nna_emd,
            self.generated,
            self.reference,
            self.points,
            self.seed
        )
    }
}

impl fmt::Display for GenEvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>14}{:>14}", "", "CD", "EMD")?;
        writeln!(
            f,
            "{:<10}{:>14.4}{:>14.4}",
            "MMD", self.mmd_cd, self.mmd_emd
        )?;
        writeln!(
            f,
            "{:<10}{:>13.2}%{:>13.2}%",
            "COV",
            100.0 * self.cov_cd,
            100.0 * self.cov_emd
        )?;
        writeln!(
            f,
            "{:<10}{:>13.2}%{:>13.2}%",
            "1-NNA",
            100.0 * self.nna_cd,
            100.0 * self.nna_emd
        )?;
        write!(
            f,
            "({} generated, {} reference, {} points each; MMD-CD x1e3, MMD-EMD x1e2)",
            self.generated, self.reference, self.points
        )
    }
}

/// Row-major `rows.len() x cols.len()` matrix of `dist(rows[i], cols[j])`.
fn distance_matrix(
    rows: &[PointCloud],
    cols: &[PointCloud],
    dist: &(dyn Fn(&PointCloud, &PointCloud) -> Result<f64> + Sync),
) -> Result<Vec<f64>> {
    let pairs: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|i| (0..cols.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| dist(&rows[i], &cols[j]))
        .collect()
}

struct SetMetrics {
    mmd: f64,
    cov: f64,
    nna: f64,
}

/// `gr[g * nr + r]`, `gg` and `rr` are the within-set matrices.
fn set_metrics(gr: &[f64], gg: &[f64], rr: &[f64], ng: usize, nr: usize) -> SetMetrics {
    // MMD: for each reference, nearest generated
    let mmd = (0..nr)
        .map(|r| {
            (0..ng)
                .map(|g| gr[g * nr + r])
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / nr as f64;
    // COV: references chosen as nearest by some generated; ties to lowest index
    let mut hit = vec![false; nr];
    for g in 0..ng {
        let mut best = 0;
        for r in 1..nr {
            if gr[g * nr + r] < gr[g * nr + best] {
                best = r;
            }
        }
        hit[best] = true;
    }
    let cov = hit.iter().filter(|&&h| h).count() as f64 / nr as f64;
    // 1-NNA over the union; label 0 = reference, 1 = generated.
    // Candidate order: distance, then reference before generated, then index.
    let mut correct = 0usize;
    for (label, n) in [(1usize, ng), (0usize, nr)] {
        for i in 0..n {
            let mut best: Option<(f64, usize, usize)> = None;
            let mut consider = |d: f64, l: usize, j: usize| {
                let cand = (d, l, j);
                let better = match best {
                    None => true,
                    Some(b) => d < b.0 || (d == b.0 && (l, j) < (b.1, b.2)),
                };
                if better {
                    best = Some(cand);
                }
            };
            for j in 0..nr {
                if label == 0 && j == i {
                    continue;
                }
                let d = if label == 1 {
                    gr[i * nr + j]
                } else {
                    rr[i * nr + j]
                };
                consider(d, 0, j);
            }
            for j in 0..ng {
                if label == 1 && j == i {
                    continue;
                }
                let d = if label == 1 {
                    gg[i * ng + j]
                } else {
                    gr[j * nr + i]
                };
                consider(d, 1, j);
            }
            if let Some((_, l, _)) = best {
                if l == label {
                    correct += 1;
                }
            }
        }
    }
    let nna = correct as f64 / (ng + nr) as f64;
    SetMetrics { mmd, cov, nna }
}

/// Compares a generated set against a reference set.
///
/// All clouds must have the same point count. `seed` is recorded in the
/// report; every computation here is deterministic.
pub fn evaluate_generation(
    generated: &[PointCloud],
    reference: &[PointCloud],
    seed: u64,
) -> Result<GenEvalReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(invalid("generated and reference sets must be nonempty"));
    }
    let points = reference[0].count();
    if let Some(c) = generated
        .iter()
        .chain(reference)
        .find(|c| c.count() != points)
    {
        return Err(invalid(format!(
            "all clouds need {points} points, found one with {}",
            c.count()
        )));
    }
    let (ng, nr) = (generated.len(), reference.len());
    let cd = |a: &PointCloud, b: &PointCloud| chamfer(a, b);
    let em = |a: &PointCloud, b: &PointCloud| emd(a, b);
    let mut out = [0.0f64; 6];
    for (k, dist) in [
        &cd as &(dyn Fn(&PointCloud, &PointCloud) -> Result<f64> + Sync),
        &em,
    ]
    .into_iter()
    .enumerate()
    {
        let gr = distance_matrix(generated, reference, dist)?;
        let gg = distance_matrix(generated, generated, dist)?;
        let rr = distance_matrix(reference, reference, dist)?;
        let m = set_metrics(&gr, &gg, &rr, ng, nr);
        out[k] = m.mmd;
        out[2 + k] = m.cov;
        out[4 + k] = m.nna;
    }
    Ok(GenEvalReport {
        mmd_cd: out[0] * MMD_CD_SCALE,
        mmd_emd: out[1] * MMD_EMD_SCALE,
        cov_cd: out[2],
        cov_emd: out[3],
        nna_cd: out[4],
        nna_emd: out[5],
        generated: ng,
        reference: nr,
        points,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                .collect(),
        )
        .unwrap()
    }

    fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
        let side = |x: &PointCloud, y: &PointCloud| {
            x.points()
                .iter()
                .map(|p| {
                    y.points()
                        .iter()
                        .map(|q| dist2(p, q))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / x.count() as f64
        };
        side(a, b) + side(b, a)
    }

    #[test]
    fn chamfer_basics() {
        let a = cloud(50, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let p = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let q = PointCloud::new(vec![Vec3::x()]).unwrap();
        assert_eq!(chamfer(&p, &q).unwrap(), 2.0);
        let b = cloud(50, 2);
        assert!((chamfer(&a, &b).unwrap() - brute_chamfer(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn emd_basics() {
        let a = cloud(20, 3);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        let p = PointCloud::new(vec![Vec3::zeros(), Vec3::x()]).unwrap();
        let q = PointCloud::new(vec![Vec3::x() * 1.1, Vec3::x() * 0.1]).unwrap();
        let straight: f64 = (1.1 + 0.9) / 2.0;
        let crossed = (0.1f64 + 0.1) / 2.0;
        assert!((emd(&p, &q).unwrap() - straight.min(crossed)).abs() < 1e-15);
        assert!(matches!(
            emd(&a, &cloud(19, 4)),
            Err(Error::CountMismatch(20, 19))
        ));
    }

    #[test]
    fn auction_within_one_percent_of_exact() {
        for (n, seed) in [(128, 5), (300, 6), (512, 7)] {
            let a = cloud(n, seed);
            let b = cloud(n, seed + 100);
            let exact = emd_with(&a, &b, EmdMode::Exact).unwrap();
            let approx = emd_with(&a, &b, EmdMode::Auction).unwrap();
            assert!(approx >= exact - 1e-12);
            assert!(approx <= exact * 1.01, "{n}: {approx} vs {exact}");
        }
    }

    #[test]
    fn identical_sets() {
        let set: Vec<PointCloud> = (0..4).map(|s| cloud(32, s)).collect();
        let r = evaluate_generation(&set, &set, 0).unwrap();
        assert_eq!(r.mmd_cd, 0.0);
        assert_eq!(r.mmd_emd, 0.0);
        assert_eq!(r.cov_cd, 1.0);
        assert_eq!(r.cov_emd, 1.0);
    }

    #[test]
    fn mesh_chamfer_of_a_mesh_with_itself_is_zero() {
        let m = crate::shapes::icosphere(0.3, 2);
        assert!(mesh_chamfer(&m, &m, 500, 1).unwrap() < 1e-20);
        let n = crate::shapes::icosphere(0.35, 2);
        let d = mesh_mean_distance(&m, &n, 500, 1).unwrap();
        assert!((d - 0.1).abs() < 0.01, "{d}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn distances_are_symmetric_and_bounded(seed in 0u64..100_000, n in 1usize..24) {
            let a = cloud(n, seed);
            let b = cloud(n, seed ^ 0xabcdef);
            let ab = chamfer(&a, &b).unwrap();
            prop_assert_eq!(ab, chamfer(&b, &a).unwrap());
            prop_assert!(ab > 0.0);
            let e = emd(&a, &b).unwrap();
            prop_assert!((e - emd(&b, &a).unwrap()).abs() < 1e-12);
            let identity = a.points().iter().zip(b.points()).map(|(p, q)| (p - q).norm()).sum::<f64>() / n as f64;
            prop_assert!(e >= 0.0 && e <= identity + 1e-12);
            prop_assert!((chamfer(&a, &b).unwrap() - brute_chamfer(&a, &b)).abs() == 0.0);
        }

        #[test]
        fn cov_and_nna_are_permutation_invariant(seed in 0u64..10_000) {
            let g: Vec<PointCloud> = (0..4).map(|s| cloud(16, seed * 31 + s)).collect();
            let r: Vec<PointCloud> = (0..5).map(|s| cloud(16, seed * 31 + 10 + s)).collect();
            let base = evaluate_generation(&g, &r, 0).unwrap();
            let mut g2 = g.clone();
            g2.reverse();
            let mut r2 = r.clone();
            r2.rotate_left(2);
            let perm = evaluate_generation(&g2, &r2, 0).unwrap();
            prop_assert_eq!(base.cov_cd, perm.cov_cd);
            prop_assert_eq!(base.cov_emd, perm.cov_emd);
            prop_assert_eq!(base.nna_cd, perm.nna_cd);
            prop_assert_eq!(base.nna_emd, perm.nna_emd);
        }
    }
}
