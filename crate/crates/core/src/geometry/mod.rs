//! Triangle meshes, point clouds and exact unsigned distance queries.

mod bvh;
mod io;
mod sample;

use std::collections::HashMap;

pub use bvh::{point_triangle_distance_sq, DistanceAccelerator};
pub use io::{load_mesh, obj_string, parse_obj, parse_ply, write_obj, MeshFormat};
pub use sample::sample_surface;

use crate::error::{invalid, Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Triangles with area at or below this are treated as degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

pub const DEFAULT_MARGIN: f64 = 0.05;

/// An indexed triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Builds a mesh, checking that every index refers to a vertex.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(invalid(format!(
                "triangle {t:?} references a vertex beyond {n}"
            )));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(invalid("non-finite vertex coordinate"));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertices_mut(&mut self) -> &mut [Vec3] {
        &mut self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Drops triangles whose area is at or below `min_area`.
    pub fn without_degenerate(mut self, min_area: f64) -> Self {
        let keep: Vec<[usize; 3]> = (0..self.triangles.len())
            .filter(|&t| self.triangle_area(t) > min_area)
            .map(|t| self.triangles[t])
            .collect();
        self.triangles = keep;
        self
    }

    /// Axis-aligned bounds `(min, max)` over all vertices.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    /// Centers the bounding box at the origin and scales its longest edge to
    /// `1 - 2 * margin`, preserving aspect ratio.
    pub fn normalize_to_unit_cube(&self, margin: f64) -> Result<Self> {
        if !(0.0..=0.4).contains(&margin) {
            return Err(invalid(format!("margin {margin} outside [0, 0.4]")));
        }
        let (lo, hi) = self
            .bounds()
            .ok_or_else(|| Error::DegenerateGeometry("mesh has no vertices".into()))?;
        let extent = (hi - lo).max();
        if !(extent > 0.0) {
            return Err(Error::DegenerateGeometry(
                "bounding box has zero extent".into(),
            ));
        }
        let center = (lo + hi) * 0.5;
        let scale = (1.0 - 2.0 * margin) / extent;
        let vertices = self.vertices.iter().map(|v| (v - center) * scale).collect();
        Ok(Self {
            vertices,
            triangles: self.triangles.clone(),
        })
    }

    /// Appends another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }

    fn edge_use_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Number of distinct undirected edges used by exactly one triangle.
    pub fn boundary_edge_count(&self) -> usize {
        self.edge_use_counts().values().filter(|&&c| c == 1).count()
    }

    /// `V - E + F` counting only vertices referenced by some triangle.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        let e = self.edge_use_counts().len() as i64;
        v - e + self.triangles.len() as i64
    }
}

/// A finite, non-empty set of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(invalid("point cloud contains a non-finite coordinate"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Parses whitespace-separated `x y z` lines; blank lines and `#` comments are skipped.
    pub fn parse_xyz(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() < 3 {
                return Err(Error::Parse(format!(
                    "line {}: expected 3 coordinates",
                    lineno + 1
                )));
            }
            points.push(Vec3::new(vals[0], vals[1], vals[2]));
        }
        Self::new(points).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_xyz(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 40);
        for p in &self.points {
            s.push_str(&format!("{:e} {:e} {:e}\n", p.x, p.y, p.z));
        }
        s
    }
}
