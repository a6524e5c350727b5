//! Bounding-volume hierarchy for exact nearest-triangle distance queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{TriangleMesh, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_LEAF_SIZE: usize = 8;

/// Squared distance from `p` to the closest point of triangle `abc`.
///
/// Region-based closest-point evaluation; handles degenerate triangles.
pub fn point_triangle_distance_sq(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm_squared();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm_squared();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm_squared();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm_squared();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm_squared();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * w).norm_squared();
    }
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        // Collinear corners: fall back to the three edges.
        return [(a, b), (b, c), (c, a)]
            .iter()
            .map(|(s, e)| point_segment_distance_sq(p, s, e))
            .fold(f64::INFINITY, f64::min);
    }
    let v = vb / denom;
    let w = vc / denom;
    (ap - ab * v - ac * w).norm_squared()
}

fn point_segment_distance_sq(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm_squared();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm_squared()
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn distance_sq(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        bounds: Aabb,
        start: usize,
        end: usize,
    },
    Inner {
        bounds: Aabb,
        left: usize,
        right: usize,
    },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Immutable BVH over a mesh's triangles. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct DistanceAccelerator {
    corners: Vec<[Vec3; 3]>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

struct Candidate {
    dist_sq: f64,
    node: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.dist_sq == other.dist_sq && self.node == other.node
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    // Reversed so the BinaryHeap pops the nearest box first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist_sq
            .total_cmp(&self.dist_sq)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl DistanceAccelerator {
    pub fn build(mesh: &TriangleMesh) -> Result<Self> {
        Self::with_leaf_size(mesh, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(mesh: &TriangleMesh, leaf_size: usize) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::DegenerateGeometry(
                "cannot build a distance accelerator without triangles".into(),
            ));
        }
        let leaf_size = leaf_size.max(1);
        let mut corners: Vec<[Vec3; 3]> = (0..mesh.triangle_count())
            .map(|t| mesh.corners(t))
            .collect();
        let mut centroids: Vec<Vec3> = corners.iter().map(|[a, b, c]| (a + b + c) / 3.0).collect();
        let mut nodes = Vec::with_capacity(2 * corners.len() / leaf_size + 1);
        build_node(&mut corners, &mut centroids, 0, leaf_size, &mut nodes);
        Ok(Self {
            corners,
            nodes,
            leaf_size,
        })
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn triangle_count(&self) -> usize {
        self.corners.len()
    }

    /// Exact unsigned distance from `query` to the mesh.
    pub fn unsigned_distance(&self, query: &Vec3) -> f64 {
        self.distance_sq(query).sqrt()
    }

    /// Exact squared distance, best-first with pruning by the current best.
    pub fn distance_sq(&self, query: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut heap = BinaryHeap::new();
        heap.push(Candidate {
            dist_sq: self.nodes[0].bounds().distance_sq(query),
            node: 0,
        });
        while let Some(Candidate { dist_sq, node }) = heap.pop() {
            if dist_sq >= best {
                break;
            }
            match &self.nodes[node] {
                Node::Leaf { start, end, .. } => {
                    for [a, b, c] in &self.corners[*start..*end] {
                        let d = point_triangle_distance_sq(query, a, b, c);
                        if d < best {
                            best = d;
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    for child in [*left, *right] {
                        let d = self.nodes[child].bounds().distance_sq(query);
                        if d < best {
                            heap.push(Candidate {
                                dist_sq: d,
                                node: child,
                            });
                        }
                    }
                }
            }
        }
        best
    }

    /// Reference implementation: minimum over every triangle.
    pub fn brute_force_distance_sq(&self, query: &Vec3) -> f64 {
        self.corners
            .iter()
            .map(|[a, b, c]| point_triangle_distance_sq(query, a, b, c))
            .fold(f64::INFINITY, f64::min)
    }
}

fn build_node(
    corners: &mut [[Vec3; 3]],
    centroids: &mut [Vec3],
    offset: usize,
    leaf_size: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for (tri, c) in corners.iter().zip(centroids.iter()) {
        tri.iter().for_each(|p| bounds.grow(p));
        cbounds.grow(c);
    }
    let idx = nodes.len();
    let n = corners.len();
    let spread = cbounds.max - cbounds.min;
    if n <= leaf_size || spread.max() <= 0.0 {
        nodes.push(Node::Leaf {
            bounds,
            start: offset,
            end: offset + n,
        });
        return idx;
    }
    let axis = spread.imax();
    // Median split on centroids along the widest axis.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| centroids[i][axis].total_cmp(&centroids[j][axis]));
    let sorted_corners: Vec<[Vec3; 3]> = order.iter().map(|&i| corners[i]).collect();
    let sorted_centroids: Vec<Vec3> = order.iter().map(|&i| centroids[i]).collect();
    corners.copy_from_slice(&sorted_corners);
    centroids.copy_from_slice(&sorted_centroids);
    let mid = n / 2;
    nodes.push(Node::Leaf {
        bounds,
        start: 0,
        end: 0,
    });
    let (lc, rc) = corners.split_at_mut(mid);
    let (lm, rm) = centroids.split_at_mut(mid);
    let left = build_node(lc, lm, offset, leaf_size, nodes);
    let right = build_node(rc, rm, offset + mid, leaf_size, nodes);
    nodes[idx] = Node::Inner {
        bounds,
        left,
        right,
    };
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perpendicular_foot_inside_triangle() {
        let tri = shapes::single_triangle();
        let acc = DistanceAccelerator::build(&tri).unwrap();
        let d = acc.unsigned_distance(&Vec3::new(0.25, 0.25, 1.0));
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distance_on_vertex_is_zero() {
        let m = shapes::icosphere(1.0, 2);
        let acc = DistanceAccelerator::build(&m).unwrap();
        for v in m.vertices().iter().take(20) {
            assert_eq!(acc.unsigned_distance(v), 0.0);
        }
    }

    #[test]
    fn icosphere_center_distance() {
        let m = shapes::icosphere(1.0, 4);
        let acc = DistanceAccelerator::build(&m).unwrap();
        let fast = acc.unsigned_distance(&Vec3::zeros());
        let brute = acc.brute_force_distance_sq(&Vec3::zeros()).sqrt();
        assert_eq!(fast, brute);
        assert!((fast - 1.0).abs() < 2e-3, "{fast}");
    }

    #[test]
    fn matches_brute_force_on_random_batch() {
        let m = shapes::torus(0.3, 0.1, 12, 8);
        assert!(m.triangle_count() <= 200);
        let acc = DistanceAccelerator::build(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = Vec3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            let a = acc.distance_sq(&q).sqrt();
            let b = acc.brute_force_distance_sq(&q).sqrt();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn edge_and_vertex_regions() {
        let (a, b, c) = (
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        );
        // Beyond vertex b.
        let d = point_triangle_distance_sq(&Vec3::new(2.0, -1.0, 0.0), &a, &b, &c);
        assert!((d - 2.0).abs() < 1e-15);
        // Opposite the hypotenuse.
        let d = point_triangle_distance_sq(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((d - 0.5).abs() < 1e-15);
        // Degenerate (collinear) triangle.
        let d = point_triangle_distance_sq(&Vec3::new(0.5, 1.0, 0.0), &a, &b, &(b * 0.5));
        assert!((d - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn distance_is_one_lipschitz(
            p in prop::array::uniform3(-0.7f64..0.7),
            q in prop::array::uniform3(-0.7f64..0.7),
        ) {
            let m = shapes::icosphere(0.35, 1);
            let acc = DistanceAccelerator::build(&m).unwrap();
            let (p, q) = (Vec3::from(p), Vec3::from(q));
            let dp = acc.unsigned_distance(&p);
            let dq = acc.unsigned_distance(&q);
            prop_assert!((dp - dq).abs() <= (p - q).norm() + 1e-12);
        }
    }
}
