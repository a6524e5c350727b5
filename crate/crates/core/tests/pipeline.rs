use udfwave::meshing::{extract_surface, ExtractionConfig};
use udfwave::metrics::{chamfer, emd};
use udfwave::wavelet::{decompose, decompose_full, invert, invert_full};
use udfwave::{FilterBank, PointCloud, UdfVolume, Vec3};

fn sphere(res: usize) -> UdfVolume {
    UdfVolume::from_distance_fn(res, 0.15, |p| (p.norm() - 0.3).abs()).unwrap()
}

#[test]
fn one_level_and_full_pyramids_reconstruct() {
    let v = sphere(32);
    let u = v.to_grid();
    for name in ["haar", "bior3.3", "bior6.8"] {
        let bank = FilterBank::preset(name).unwrap();
        let back = invert(&decompose(&v, &bank, 1).unwrap(), &bank).unwrap();
        let err = v
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-6, "{name}: {err}");
        let full = invert_full(&decompose_full(&u, &bank, 3).unwrap(), &bank).unwrap();
        let err = u
            .data()
            .iter()
            .zip(full.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{name} full: {err}");
    }
}

#[test]
fn dropping_finer_details_is_lossy_but_close() {
    let v = sphere(32);
    let bank = FilterBank::preset("bior6.8").unwrap();
    let back = invert(&decompose(&v, &bank, 2).unwrap(), &bank).unwrap();
    let rmse = (v
        .values()
        .iter()
        .zip(back.values())
        .map(|(a, b)| f64::from(a - b).powi(2))
        .sum::<f64>()
        / v.len() as f64)
        .sqrt();
    assert!(rmse > 0.0 && rmse < 0.1 * v.truncation(), "{rmse}");
}

#[test]
fn extracted_sphere_lies_on_the_surface() {
    let v = sphere(40);
    let mesh = extract_surface(&v, &ExtractionConfig::default()).unwrap();
    assert!(!mesh.triangles().is_empty());
    let h = v.spacing();
    let off: Vec<f64> = mesh
        .vertices()
        .iter()
        .map(|p| (p.norm() - 0.3).abs())
        .collect();
    let worst = off.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1.5 * h, "vertex off the sphere by {worst}");
    let close = off.iter().filter(|&&d| d < h).count();
    assert!(
        close as f64 >= 0.9 * off.len() as f64,
        "{close}/{}",
        off.len()
    );
}

#[test]
fn shifted_cloud_distances_match_the_shift() {
    // points far apart compared with the shift, so each matches its own copy
    let pts: Vec<Vec3> = (0..5)
        .flat_map(|i| (0..5).map(move |j| Vec3::new(i as f64 * 0.2, j as f64 * 0.2, 0.0)))
        .collect();
    let d = Vec3::new(0.01, -0.02, 0.005);
    let a = PointCloud::new(pts.clone()).unwrap();
    let b = PointCloud::new(pts.iter().map(|p| p + d).collect()).unwrap();
    let cd = chamfer(&a, &b).unwrap();
    assert!((cd - 2.0 * d.norm_squared()).abs() < 1e-15, "{cd}");
    let e = emd(&a, &b).unwrap();
    assert!((e - d.norm()).abs() < 1e-12, "{e}");
}
