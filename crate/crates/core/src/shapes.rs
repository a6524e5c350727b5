//! Analytic primitives: tessellated meshes plus their exact unsigned distances.
//!
//! Used as fixtures by tests and the acceptance suite.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{TriangleMesh, Vec3};

fn mesh(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> TriangleMesh {
    TriangleMesh::new(vertices, triangles).expect("primitive indices are in range")
}

/// Axis-aligned cube surface with corners at ±0.5: 8 vertices, 12 triangles.
pub fn unit_cube_surface() -> TriangleMesh {
    let v = (0..8)
        .map(|i| {
            Vec3::new(
                (i & 1) as f64 - 0.5,
                ((i >> 1) & 1) as f64 - 0.5,
                ((i >> 2) & 1) as f64 - 0.5,
            )
        })
        .collect();
    let t = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    mesh(v, t)
}

/// The triangle (0,0,0), (1,0,0), (0,1,0).
pub fn single_triangle() -> TriangleMesh {
    mesh(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]])
}

/// Square of the given side in the z = 0 plane, centered at the origin,
/// split into `n` x `n` cells of two triangles each.
pub fn square(side: f64, n: usize) -> TriangleMesh {
    let n = n.max(1);
    let mut v = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            v.push(Vec3::new(
                side * (i as f64 / n as f64 - 0.5),
                side * (j as f64 / n as f64 - 0.5),
                0.0,
            ));
        }
    }
    let mut t = Vec::new();
    let id = |i: usize, j: usize| j * (n + 1) + i;
    for j in 0..n {
        for i in 0..n {
            t.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            t.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    mesh(v, t)
}

/// Subdivided icosahedron projected onto a sphere of the given radius.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriangleMesh {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ]
    .iter()
    .map(|c| Vec3::from(*c).normalize())
    .collect();
    let mut t: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(t.len() * 4);
        for [a, b, c] in t {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        t = next;
    }
    for x in &mut v {
        *x *= radius;
    }
    mesh(v, t)
}

/// Torus around the z axis with tube radius `minor`.
pub fn torus(major: f64, minor: f64, nu: usize, nv: usize) -> TriangleMesh {
    let mut v = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = 2.0 * PI * i as f64 / nu as f64;
        for j in 0..nv {
            let w = 2.0 * PI * j as f64 / nv as f64;
            let rho = major + minor * w.cos();
            v.push(Vec3::new(rho * u.cos(), rho * u.sin(), minor * w.sin()));
        }
    }
    let id = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut t = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            t.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            t.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    mesh(v, t)
}

/// Closed surface of an axis-aligned box, each face split into `n` x `n` cells.
pub fn box_surface(half: Vec3, n: usize) -> TriangleMesh {
    let mut out = TriangleMesh::empty();
    let face = square(2.0, n);
    // (normal axis, sign)
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut f = face.clone();
            for p in f.vertices_mut() {
                let (a, b) = (p.x, p.y);
                let mut q = Vec3::zeros();
                q[axis] = sign;
                q[(axis + 1) % 3] = a;
                q[(axis + 2) % 3] = b;
                *p = q.component_mul(&half);
            }
            out.append(&f);
        }
    }
    crate::meshing::weld_and_clean(&out, 1e-9)
}

/// Flat disk of the given radius in the z = 0 plane (an open surface).
pub fn disk(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let mut v = vec![Vec3::zeros()];
    for r in 1..=rings {
        let rho = radius * r as f64 / rings as f64;
        for s in 0..segments {
            let a = 2.0 * PI * s as f64 / segments as f64;
            v.push(Vec3::new(rho * a.cos(), rho * a.sin(), 0.0));
        }
    }
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
    let mut t = Vec::new();
    for s in 0..segments {
        t.push([0, ring(1, s), ring(1, s + 1)]);
    }
    for r in 1..rings {
        for s in 0..segments {
            t.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
            t.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
        }
    }
    mesh(v, t)
}

/// Half of a cylinder wall (z >= 0) of given radius, running along y.
pub fn half_cylinder(radius: f64, length: f64, arc: usize, along: usize) -> TriangleMesh {
    let mut v = Vec::new();
    for j in 0..=along {
        let y = length * (j as f64 / along as f64 - 0.5);
        for i in 0..=arc {
            let a = PI * i as f64 / arc as f64;
            v.push(Vec3::new(radius * a.cos(), y, radius * a.sin()));
        }
    }
    let id = |i: usize, j: usize| j * (arc + 1) + i;
    let mut t = Vec::new();
    for j in 0..along {
        for i in 0..arc {
            t.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            t.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    mesh(v, t)
}

/// A primitive with a closed-form unsigned distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Torus around an axis parallel to z.
    Torus {
        center: Vec3,
        major: f64,
        minor: f64,
    },
    /// Surface of an axis-aligned box.
    Box {
        center: Vec3,
        half: Vec3,
    },
    /// Disk in a plane parallel to z = 0.
    Disk {
        center: Vec3,
        radius: f64,
    },
    /// Half cylinder wall (local z >= 0) running along y.
    HalfCylinder {
        center: Vec3,
        radius: f64,
        length: f64,
    },
}

impl Primitive {
    pub fn distance(&self, p: &Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Primitive::Torus {
                center,
                major,
                minor,
            } => {
                let q = p - center;
                let rho = (q.x * q.x + q.y * q.y).sqrt();
                ((rho - major).hypot(q.z) - minor).abs()
            }
            Primitive::Box { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Primitive::Disk { center, radius } => {
                let q = p - center;
                let rho = (q.x * q.x + q.y * q.y).sqrt();
                (rho - radius).max(0.0).hypot(q.z)
            }
            Primitive::HalfCylinder {
                center,
                radius,
                length,
            } => {
                let q = p - center;
                let dy = (q.y.abs() - 0.5 * length).max(0.0);
                let dxz = if q.z >= 0.0 {
                    (q.x.hypot(q.z) - radius).abs()
                } else {
                    (q.x.abs() - radius).hypot(q.z)
                };
                dxz.hypot(dy)
            }
        }
    }

    /// A tessellation of the surface; `detail` scales the triangle count.
    pub fn mesh(&self, detail: usize) -> TriangleMesh {
        let detail = detail.max(1);
        let (mut m, center) = match *self {
            Primitive::Sphere { center, radius } => (icosphere(radius, detail.min(6)), center),
            Primitive::Torus {
                center,
                major,
                minor,
            } => (torus(major, minor, 24 * detail, 12 * detail), center),
            Primitive::Box { center, half } => (box_surface(half, 4 * detail), center),
            Primitive::Disk { center, radius } => (disk(radius, 8 * detail, 32 * detail), center),
            Primitive::HalfCylinder {
                center,
                radius,
                length,
            } => (
                half_cylinder(radius, length, 16 * detail, 8 * detail),
                center,
            ),
        };
        for v in m.vertices_mut() {
            *v += center;
        }
        m
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Primitive::Sphere { .. } => "sphere",
            Primitive::Torus { .. } => "torus",
            Primitive::Box { .. } => "box",
            Primitive::Disk { .. } => "disk",
            Primitive::HalfCylinder { .. } => "half_cylinder",
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-amount..=amount),
        rng.random_range(-amount..=amount),
        rng.random_range(-amount..=amount),
    )
}

/// Randomized sphere / torus / box corpus that fits inside [-0.45, 0.45]^3.
pub fn closed_corpus(count: usize, seed: u64) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| match i % 3 {
            0 => Primitive::Sphere {
                center: jitter(&mut rng, 0.05),
                radius: rng.random_range(0.22..0.34),
            },
            1 => Primitive::Torus {
                center: jitter(&mut rng, 0.04),
                major: rng.random_range(0.22..0.3),
                minor: rng.random_range(0.07..0.11),
            },
            _ => Primitive::Box {
                center: jitter(&mut rng, 0.04),
                half: Vec3::new(
                    rng.random_range(0.16..0.33),
                    rng.random_range(0.16..0.33),
                    rng.random_range(0.16..0.33),
                ),
            },
        })
        .collect()
}

/// Randomized spheres (class 0) and boxes (class 1), alternating.
pub fn two_class_corpus(per_class: usize, seed: u64) -> Vec<(Primitive, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * per_class)
        .map(|i| {
            if i % 2 == 0 {
                (
                    Primitive::Sphere {
                        center: jitter(&mut rng, 0.03),
                        radius: rng.random_range(0.26..0.34),
                    },
                    0,
                )
            } else {
                let s = rng.random_range(0.22..0.3);
                (
                    Primitive::Box {
                        center: jitter(&mut rng, 0.03),
                        half: Vec3::repeat(s) + jitter(&mut rng, 0.03),
                    },
                    1,
                )
            }
        })
        .collect()
}
