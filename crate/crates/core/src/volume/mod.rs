//! Truncated unsigned distance volumes, the near-surface weight mask and the
//! `UDFV` file format.
//!
//! Sample locations are voxel centers. For a cubic volume of resolution `n`
//! the first center sits at `(-0.5, -0.5, -0.5)` and the spacing is
//! `1 / (n - 1)`, so the grid spans the whole normalized domain.

mod io;

pub use io::{read_volume, write_volume, VOLUME_MAGIC, VOLUME_VERSION};

use rayon::prelude::*;

use crate::error::{invalid, mismatch, Result};
use crate::geometry::{DistanceAccelerator, TriangleMesh, Vec3};
use crate::grid::Grid3;

pub const DEFAULT_TRUNCATION: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_FAR_WEIGHT: f64 = 0.01;
pub const MIN_RESOLUTION: usize = 8;

/// A dense grid of truncated unsigned distances.
///
/// Values are kept in single precision, which is also the on-disk
/// precision, so a file round-trip is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct UdfVolume {
    resolution: [usize; 3],
    origin: Vec3,
    spacing: f64,
    truncation: f64,
    values: Vec<f32>,
}

impl UdfVolume {
    pub fn new(
        resolution: [usize; 3],
        origin: Vec3,
        spacing: f64,
        truncation: f64,
        values: Vec<f32>,
    ) -> Result<Self> {
        if resolution.contains(&0) {
            return Err(invalid("volume resolution must be positive"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(invalid(format!("spacing {spacing} must be positive")));
        }
        if !(truncation > 0.0 && truncation.is_finite()) {
            return Err(invalid(format!("truncation {truncation} must be positive")));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(invalid("non-finite origin"));
        }
        let n = resolution.iter().product::<usize>();
        if values.len() != n {
            return Err(mismatch(format!(
                "{} values for resolution {resolution:?}",
                values.len()
            )));
        }
        let cap = truncation as f32;
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && **v <= cap)) {
            return Err(invalid(format!("value {v} outside [0, {truncation}]")));
        }
        Ok(Self {
            resolution,
            origin,
            spacing,
            truncation,
            values,
        })
    }

    /// Clamps a real-valued grid into `[0, truncation]`.
    pub fn from_grid(grid: &Grid3, origin: Vec3, spacing: f64, truncation: f64) -> Result<Self> {
        let cap = truncation as f32;
        let values = grid
            .data()
            .iter()
            .map(|&v| {
                if v.is_nan() {
                    cap
                } else {
                    (v as f32).clamp(0.0, cap)
                }
            })
            .collect();
        Self::new(grid.dims(), origin, spacing, truncation, values)
    }

    /// Same geometry as `self`, new (clamped) values.
    pub fn with_grid(&self, grid: &Grid3) -> Result<Self> {
        if grid.dims() != self.resolution {
            return Err(mismatch(format!(
                "grid {:?} vs volume {:?}",
                grid.dims(),
                self.resolution
            )));
        }
        Self::from_grid(grid, self.origin, self.spacing, self.truncation)
    }

    /// Fills a cubic volume over the unit domain from a distance function.
    pub fn from_distance_fn(
        resolution: usize,
        truncation: f64,
        f: impl Fn(&Vec3) -> f64 + Sync,
    ) -> Result<Self> {
        check_sampling(resolution, truncation)?;
        let (origin, spacing) = unit_domain(resolution);
        let n = resolution;
        let cap = truncation as f32;
        let values: Vec<f32> = (0..n * n * n)
            .into_par_iter()
            .map(|i| {
                let p = origin
                    + Vec3::new((i % n) as f64, ((i / n) % n) as f64, (i / (n * n)) as f64)
                        * spacing;
                (f(&p) as f32).clamp(0.0, cap)
            })
            .collect();
        Self::new([n; 3], origin, spacing, truncation, values)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)] as f64
    }

    /// Center of voxel `(x, y, z)`.
    pub fn position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin + Vec3::new(x as f64, y as f64, z as f64) * self.spacing
    }

    /// Upper corner of the sampled box.
    pub fn extent_max(&self) -> Vec3 {
        self.position(
            self.resolution[0] - 1,
            self.resolution[1] - 1,
            self.resolution[2] - 1,
        )
    }

    pub fn to_grid(&self) -> Grid3 {
        Grid3::from_vec(
            self.resolution,
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("volume length matches its resolution")
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min) as f64
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max) as f64
    }

    /// Trilinear interpolation; positions outside the grid are clamped to it.
    pub fn trilinear(&self, p: &Vec3) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = ((p[a] - self.origin[a]) / self.spacing).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            base[a] = i;
            frac[a] = if n > 1 { u - i as f64 } else { 0.0 };
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                let n = self.resolution[a];
                idx[a] = (base[a] + bit).min(n - 1);
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.value(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }

    /// Whether `p` lies inside the sampled box (inclusive).
    pub fn contains(&self, p: &Vec3) -> bool {
        let hi = self.extent_max();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= hi[a])
    }

    pub fn clamp_to_bounds(&self, p: &Vec3) -> Vec3 {
        let hi = self.extent_max();
        Vec3::from_fn(|a, _| p[a].clamp(self.origin[a], hi[a]))
    }
}

/// Grid origin and spacing for a cubic volume over `[-0.5, 0.5]^3`.
pub fn unit_domain(resolution: usize) -> (Vec3, f64) {
    (Vec3::repeat(-0.5), 1.0 / (resolution as f64 - 1.0))
}

fn check_sampling(resolution: usize, truncation: f64) -> Result<()> {
    if resolution < MIN_RESOLUTION {
        return Err(invalid(format!(
            "resolution {resolution} is below the minimum of {MIN_RESOLUTION}"
        )));
    }
    if !(truncation > 0.0 && truncation.is_finite()) {
        return Err(invalid(format!("truncation {truncation} must be positive")));
    }
    Ok(())
}

/// Samples the exact unsigned distance to `mesh` at every voxel center of a
/// cubic grid over the unit domain, clamped to `[0, truncation]`.
pub fn sample_udf(mesh: &TriangleMesh, resolution: usize, truncation: f64) -> Result<UdfVolume> {
    check_sampling(resolution, truncation)?;
    let accel = DistanceAccelerator::build(mesh)?;
    UdfVolume::from_distance_fn(resolution, truncation, |p| accel.unsigned_distance(p))
}

/// Per-voxel weights: 1 near the surface, `far_weight` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    resolution: [usize; 3],
    weights: Vec<f64>,
}

impl WeightMask {
    pub fn uniform(resolution: [usize; 3]) -> Self {
        Self {
            resolution,
            weights: vec![1.0; resolution.iter().product()],
        }
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of voxels carrying full weight.
    pub fn near_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w == 1.0).count()
    }
}

pub fn weight_mask(udf: &UdfVolume, gamma: f64, far_weight: f64) -> Result<WeightMask> {
    if !(gamma > 0.0) || gamma > udf.truncation {
        return Err(invalid(format!(
            "gamma {gamma} must lie in (0, truncation = {}]",
            udf.truncation
        )));
    }
    if !(0.0..1.0).contains(&far_weight) {
        return Err(invalid(format!(
            "far_weight {far_weight} must lie in [0, 1)"
        )));
    }
    let g = gamma as f32;
    Ok(WeightMask {
        resolution: udf.resolution,
        weights: udf
            .values
            .iter()
            .map(|&v| if v <= g { 1.0 } else { far_weight })
            .collect(),
    })
}

/// Root mean square difference over voxels where `reference <= gamma`.
pub fn near_surface_rmse(reference: &UdfVolume, other: &UdfVolume, gamma: f64) -> Result<f64> {
    if reference.resolution != other.resolution {
        return Err(mismatch(format!(
            "{:?} vs {:?}",
            reference.resolution, other.resolution
        )));
    }
    let g = gamma as f32;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&a, &b) in reference.values.iter().zip(&other.values) {
        if a <= g {
            let d = a as f64 - b as f64;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("no voxel lies within gamma of the surface"));
    }
    Ok((sum / n as f64).sqrt())
}
