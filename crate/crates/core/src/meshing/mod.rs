//! Surface extraction from unsigned distance volumes.
//!
//! The zero set of a UDF has no sign change to contour, so we contour the
//! offset level `U = tau` instead (a closed double cover around the
//! surface), pull its vertices back down the distance gradient, and weld
//! the two covers where they meet.
//!
//! Contouring uses marching tetrahedra on the six-tetrahedron split of each
//! cell along its main diagonal. That split is consistent across cells, so
//! the extracted surface has no cracks and needs no case tables.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, Vec3, MIN_TRIANGLE_AREA};
use crate::volume::UdfVolume;

pub const DEFAULT_ISO_FACTOR: f64 = 1.5;
pub const DEFAULT_PROJECT_STEPS: usize = 10;
pub const DEFAULT_DAMPING: f64 = 0.8;
pub const DEFAULT_WELD_FACTOR: f64 = 0.25;
const MIN_GRADIENT: f64 = 1e-8;

/// Extraction settings. Distances left as `None` scale with the voxel
/// spacing of the target volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    /// Offset level; default `1.5 * spacing`, capped at half the truncation
    /// on coarse grids where that would reach the truncation.
    pub iso: Option<f64>,
    pub project_steps: usize,
    pub damping: f64,
    /// Weld tolerance; default `0.25 * spacing`.
    pub weld_tol: Option<f64>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            iso: None,
            project_steps: DEFAULT_PROJECT_STEPS,
            damping: DEFAULT_DAMPING,
            weld_tol: None,
        }
    }
}

impl ExtractionConfig {
    pub fn iso_for(&self, udf: &UdfVolume) -> f64 {
        self.iso
            .unwrap_or((DEFAULT_ISO_FACTOR * udf.spacing()).min(0.5 * udf.truncation()))
    }

    pub fn weld_for(&self, udf: &UdfVolume) -> f64 {
        self.weld_tol.unwrap_or(DEFAULT_WELD_FACTOR * udf.spacing())
    }

    pub fn validate(&self, udf: &UdfVolume) -> Result<()> {
        let tau = self.iso_for(udf);
        if !(tau > 0.0 && tau < udf.truncation()) {
            return Err(Error::InvalidParameter(format!(
                "iso level {tau} must lie in (0, truncation = {})",
                udf.truncation()
            )));
        }
        if self.project_steps == 0 {
            return Err(Error::InvalidParameter(
                "project_steps must be positive".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damping {} must lie in (0, 1]",
                self.damping
            )));
        }
        if !(self.weld_for(udf) >= 0.0) {
            return Err(Error::InvalidParameter(
                "weld tolerance must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Kuhn split of the unit cell: corner `c` is `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

type EdgeKey = (u32, u32);

fn edge_key(a: usize, b: usize) -> EdgeKey {
    (a.min(b) as u32, a.max(b) as u32)
}

/// Triangulated `{U = tau}`, with "inside" meaning `U < tau`. Triangles face
/// away from the inside.
pub fn extract_offset_surface(udf: &UdfVolume, tau: f64) -> Result<TriangleMesh> {
    if !(tau > 0.0 && tau < udf.truncation()) {
        return Err(Error::InvalidParameter(format!(
            "iso level {tau} must lie in (0, truncation = {})",
            udf.truncation()
        )));
    }
    if udf.min_value() >= tau {
        return Err(Error::EmptyLevelSet(format!(
            "minimum value {} is not below the iso level {tau}",
            udf.min_value()
        )));
    }
    let [nx, ny, nz] = udf.resolution();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::EmptyLevelSet("volume has no cells".into()));
    }
    let values = udf.values();
    let value = |i: usize| values[i] as f64;
    let grid_pos = |i: usize| udf.position(i % nx, (i / nx) % ny, i / (nx * ny));

    let slabs: Vec<Vec<[EdgeKey; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    let corner: [usize; 8] = std::array::from_fn(|c| {
                        udf.index(x + (c & 1), y + ((c >> 1) & 1), z + ((c >> 2) & 1))
                    });
                    let inside: [bool; 8] = std::array::from_fn(|c| value(corner[c]) < tau);
                    if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                        continue;
                    }
                    for tet in TETS {
                        let ids = tet.map(|c| corner[c]);
                        let ins = tet.map(|c| inside[c]);
                        polygonize(ids, ins, &grid_pos, &mut tris);
                    }
                }
            }
            tris
        })
        .collect();

    let mut index: HashMap<EdgeKey, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let t = tri.map(|k| {
            *index.entry(k).or_insert_with(|| {
                let (a, b) = (k.0 as usize, k.1 as usize);
                let (va, vb) = (value(a), value(b));
                let s = ((tau - va) / (vb - va)).clamp(0.0, 1.0);
                vertices.push(grid_pos(a) + (grid_pos(b) - grid_pos(a)) * s);
                vertices.len() - 1
            })
        });
        triangles.push(t);
    }
    let mesh = TriangleMesh::new(vertices, triangles)?;
    Ok(mesh.without_degenerate(MIN_TRIANGLE_AREA))
}

fn polygonize(
    ids: [usize; 4],
    inside: [bool; 4],
    pos: &impl Fn(usize) -> Vec3,
    out: &mut Vec<[EdgeKey; 3]>,
) {
    let ins: Vec<usize> = (0..4).filter(|&i| inside[i]).collect();
    let outs: Vec<usize> = (0..4).filter(|&i| !inside[i]).collect();
    let cut = |i: usize, o: usize| edge_key(ids[i], ids[o]);
    let inner = ins.iter().map(|&i| pos(ids[i])).sum::<Vec3>() / ins.len().max(1) as f64;
    let outer = outs.iter().map(|&i| pos(ids[i])).sum::<Vec3>() / outs.len().max(1) as f64;
    let away = outer - inner;
    // the facet geometry is approximated by cut-edge midpoints for orientation
    let mid = |k: EdgeKey| (pos(k.0 as usize) + pos(k.1 as usize)) * 0.5;
    let mut emit = |mut t: [EdgeKey; 3]| {
        let n = (mid(t[1]) - mid(t[0])).cross(&(mid(t[2]) - mid(t[0])));
        if n.dot(&away) < 0.0 {
            t.swap(1, 2);
        }
        out.push(t);
    };
    match ins.len() {
        1 | 3 => {
            let (lone, others) = if ins.len() == 1 {
                (ins[0], outs.clone())
            } else {
                (outs[0], ins.clone())
            };
            emit([
                cut(lone, others[0]),
                cut(lone, others[1]),
                cut(lone, others[2]),
            ]);
        }
        2 => {
            let (a, b) = (ins[0], ins[1]);
            let (c, d) = (outs[0], outs[1]);
            // quad a-c, a-d, b-d, b-c
            let q = [cut(a, c), cut(a, d), cut(b, d), cut(b, c)];
            emit([q[0], q[1], q[2]]);
            emit([q[0], q[2], q[3]]);
        }
        _ => {}
    }
}

/// Central-difference gradient of the trilinear field, one-sided where a
/// probe would leave the volume.
pub fn udf_gradient(udf: &UdfVolume, p: &Vec3, h: f64) -> Vec3 {
    let lo = udf.origin();
    let hi = udf.extent_max();
    let mut g = Vec3::zeros();
    for a in 0..3 {
        let mut plus = *p;
        let mut minus = *p;
        plus[a] += h;
        minus[a] -= h;
        let up_ok = plus[a] <= hi[a];
        let dn_ok = minus[a] >= lo[a];
        g[a] = match (up_ok, dn_ok) {
            (true, true) => (udf.trilinear(&plus) - udf.trilinear(&minus)) / (2.0 * h),
            (true, false) => (udf.trilinear(&plus) - udf.trilinear(p)) / h,
            (false, true) => (udf.trilinear(p) - udf.trilinear(&minus)) / h,
            (false, false) => 0.0,
        };
    }
    g
}

/// Moves every vertex `steps` times by `-damping * U * grad U / |grad U|`.
pub fn project_to_zero_set(
    mesh: &TriangleMesh,
    udf: &UdfVolume,
    config: &ExtractionConfig,
) -> TriangleMesh {
    let h = udf.spacing();
    let moved: Vec<Vec3> = mesh
        .vertices()
        .par_iter()
        .map(|v| {
            let mut p = udf.clamp_to_bounds(v);
            for _ in 0..config.project_steps {
                let u = udf.trilinear(&p);
                let g = udf_gradient(udf, &p, h);
                let norm = g.norm();
                if norm < MIN_GRADIENT || u == 0.0 {
                    continue;
                }
                p = udf.clamp_to_bounds(&(p - g * (config.damping * u / norm)));
            }
            p
        })
        .collect();
    TriangleMesh::new(moved, mesh.triangles().to_vec()).expect("topology unchanged")
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Merges vertices closer than `tolerance`, then drops zero-area and
/// duplicate triangles. With `tolerance == 0` no vertices are merged and
/// only degenerate faces go.
pub fn weld_and_clean(mesh: &TriangleMesh, tolerance: f64) -> TriangleMesh {
    let verts = mesh.vertices();
    let n = verts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    if tolerance > 0.0 {
        let cell = |p: &Vec3| -> [i64; 3] { p.map(|c| (c / tolerance).floor() as i64).into() };
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in verts.iter().enumerate() {
            buckets.entry(cell(p)).or_default().push(i);
        }
        let tol2 = tolerance * tolerance;
        for (i, p) in verts.iter().enumerate() {
            let c = cell(p);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let Some(list) = buckets.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &j in list {
                            if j > i && (verts[j] - p).norm_squared() <= tol2 {
                                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                                if a != b {
                                    parent[a.max(b)] = a.min(b);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // cluster means, accumulated in index order
    let mut sum = vec![Vec3::zeros(); n];
    let mut count = vec![0usize; n];
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    for i in 0..n {
        sum[roots[i]] += verts[i];
        count[roots[i]] += 1;
    }
    let compact = tolerance > 0.0;
    let mut remap = vec![usize::MAX; n];
    let mut out_verts = Vec::new();
    if !compact {
        out_verts = verts.to_vec();
        remap = (0..n).collect();
    }
    let mut seen = std::collections::HashSet::new();
    let mut out_tris = Vec::new();
    for t in mesh.triangles() {
        let r = t.map(|i| roots[i]);
        if r[0] == r[1] || r[1] == r[2] || r[0] == r[2] {
            continue;
        }
        let pos = r.map(|i| {
            if compact {
                sum[i] / count[i] as f64
            } else {
                verts[i]
            }
        });
        if 0.5 * (pos[1] - pos[0]).cross(&(pos[2] - pos[0])).norm() <= MIN_TRIANGLE_AREA {
            continue;
        }
        let mut key = r;
        key.sort_unstable();
        if !seen.insert(key) {
            continue;
        }
        let idx = r.map(|i| {
            if remap[i] == usize::MAX {
                remap[i] = out_verts.len();
                out_verts.push(sum[i] / count[i] as f64);
            }
            remap[i]
        });
        out_tris.push(idx);
    }
    TriangleMesh::new(out_verts, out_tris).expect("indices remapped in range")
}

/// Offset extraction, projection and welding with `config`.
pub fn extract_surface(udf: &UdfVolume, config: &ExtractionConfig) -> Result<TriangleMesh> {
    config.validate(udf)?;
    let offset = extract_offset_surface(udf, config.iso_for(udf))?;
    let projected = project_to_zero_set(&offset, udf, config);
    let mesh = weld_and_clean(&projected, config.weld_for(udf));
    if mesh.triangle_count() == 0 {
        return Err(Error::DegenerateGeometry(
            "every triangle collapsed while welding".into(),
        ));
    }
    Ok(mesh)
}
